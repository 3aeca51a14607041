"""Shared fixtures: a small synthetic bundle, encodings and a briefly
trained model reused across test modules."""

import numpy as np
import pytest
import torch

from graphcf import data as gdata
from graphcf import scm, training
from graphcf.model import GraphCounterfactualModel, ModelConfig


def finite_difference_check(fn, params, step=1e-5, tol=1e-4, max_coords=None,
                            rng=None):
    """Compare autograd gradients of the scalar fn() against central finite
    differences, coordinate by coordinate, at relative error < tol.

    fn must close over params (tensors with requires_grad=True). When
    max_coords is set, a random subset of coordinates per tensor is checked.
    """
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        ana = g.reshape(-1)
        coords = range(flat.numel())
        if max_coords is not None and flat.numel() > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = rng.choice(flat.numel(), size=max_coords, replace=False)
        num = []
        idx = []
        for i in coords:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + step
                f_plus = float(fn())
                flat[i] = orig - step
                f_minus = float(fn())
                flat[i] = orig
            num.append((f_plus - f_minus) / (2.0 * step))
            idx.append(int(i))
        num = torch.tensor(num, dtype=torch.float64)
        sub = ana[idx]
        denom = max(float(torch.linalg.norm(num)), float(torch.linalg.norm(sub)), 1.0)
        rel = float(torch.linalg.norm(sub - num)) / denom
        assert rel < tol, f"gradient mismatch: relative error {rel:.2e} >= {tol}"


@pytest.fixture(scope="session")
def small_config():
    return scm.ScmConfig(
        n_genes=12,
        n_cells=300,
        n_treatments=3,
        covariate_levels=2,
        effect_targets=4,
        noise_low=0.15,
        noise_high=0.3,
        baseline_scale=0.3,
        seed=5,
    )


@pytest.fixture(scope="session")
def small_bundle(small_config):
    return scm.generate(small_config)


@pytest.fixture(scope="session")
def small_split(small_bundle):
    assignment = gdata.select_ood(small_bundle.dataset, "cell_type", "c0", 1)
    return gdata.split_train_val(small_bundle.dataset, assignment, seed=11)


@pytest.fixture(scope="session")
def small_enc(small_bundle):
    return training.Encodings.from_dataset(small_bundle.dataset)


def build_model(dataset, graph, enc, latent_dim=16, graph_dim=4, hidden=(32,),
                init_seed=0, **kwargs):
    config = ModelConfig(
        n_genes=dataset.n_genes,
        n_covariate_dims=enc.cov_matrix.shape[1],
        n_treatment_dims=enc.t_matrix.shape[1],
        n_node_features=graph.n_features,
        latent_dim=latent_dim,
        graph_dim=graph_dim,
        encoder_hidden=hidden,
        decoder_hidden=hidden,
        init_seed=init_seed,
        **kwargs,
    )
    model = GraphCounterfactualModel(config)
    model.set_graph(graph)
    return model


@pytest.fixture(scope="session")
def trained_small(small_bundle, small_split, small_enc):
    """A briefly trained model on the small bundle; good enough for estimator
    and evaluation tests, not for accuracy claims."""
    model = build_model(small_bundle.dataset, small_bundle.prior_graph, small_enc,
                        latent_dim=24, hidden=(64,))
    config = training.TrainingConfig(
        learning_rate=5e-3,
        max_epochs=200,
        patience=1000,
        eval_every=10,
        batch_size=64,
        seed=3,
    )
    history = training.train(
        model,
        small_bundle.dataset,
        small_bundle.prior_graph,
        small_split,
        config,
        control=scm.CONTROL_LABEL,
    )
    return model, history
