"""Training loop with early stopping, and group-averaged R^2 evaluation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch

from graphcf import data as gdata
from graphcf.errors import DataError, DivergenceError
from graphcf.layers import DTYPE
from graphcf.model import (
    GraphCounterfactualModel,
    make_batch,
    objective,
    sample_counterfactual_treatment,
)

METRIC_COLUMNS = ["epoch", "recon_nll", "dist_loss", "kl", "val_r2_all", "val_r2_de"]


@dataclass
class TrainingConfig:
    omega1: float = 1.0
    omega2: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 4
    eval_every: int = 5
    seed: int = 0
    cf_mode: str = "uniform-other"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError("learning rate must be positive")
        if self.batch_size <= 0:
            raise DataError("batch size must be positive")
        if self.omega1 < 0 or self.omega2 < 0:
            raise DataError("loss weights must be nonnegative")


@dataclass
class Encodings:
    """One-hot machinery shared by training and evaluation."""

    cov_maps: list
    cov_matrix: np.ndarray
    t_map: gdata.OneHotMap
    t_matrix: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: gdata.ExpressionDataset):
        cov_maps = gdata.covariate_maps(dataset)
        t_map = gdata.OneHotMap(dataset.treatments)
        return cls(
            cov_maps=cov_maps,
            cov_matrix=gdata.encode_covariates(dataset, cov_maps),
            t_map=t_map,
            t_matrix=gdata.encode_treatments(dataset, t_map),
        )


def r_squared(truth: np.ndarray, prediction: np.ndarray) -> float:
    """Coefficient of determination, 1 - SS_res / SS_tot."""
    truth = np.asarray(truth, dtype=np.float64)
    prediction = np.asarray(prediction, dtype=np.float64)
    ss_res = float(np.sum((truth - prediction) ** 2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res < 1e-24 else 0.0
    return 1.0 - ss_res / ss_tot


def evaluate_r2(model: GraphCounterfactualModel, dataset: gdata.ExpressionDataset,
                split: gdata.SplitAssignment, tag: str, control,
                gene_sets: dict | None = None,
                enc: Encodings | None = None):
    """Group-averaged R^2 of counterfactual mean predictions.

    For each (covariate tuple, non-control treatment) group among cells with
    the given split tag, control cells of the same covariate tuple (outside
    the OOD set) are used as factual inputs with the group's treatment as the
    counterfactual; the averaged prediction is scored against the group's true
    mean. Returns (mean R^2 over all genes, mean R^2 over DE genes).
    """
    enc = enc or Encodings.from_dataset(dataset)
    tagged = split.indices(tag)
    if tagged.size == 0:
        raise DataError(f"no cells with split tag {tag!r}")
    cov_tuples = dataset.covariate_tuples()
    non_ood = split.tags != gdata.TAG_OOD

    groups = []
    seen = set()
    for i in tagged:
        key = (cov_tuples[i], dataset.treatments[i])
        if key[1] != control and key not in seen:
            seen.add(key)
            groups.append(key)
    if not groups:
        raise DataError("no non-control groups to evaluate")

    r2_all, r2_de = [], []
    for cov, lab in groups:
        members = [i for i in tagged if cov_tuples[i] == cov and dataset.treatments[i] == lab]
        controls = [
            i
            for i in range(dataset.n_cells)
            if non_ood[i] and cov_tuples[i] == cov and dataset.treatments[i] == control
        ]
        if not controls:
            raise DataError(f"no control cells for covariate group {cov!r}")
        batch = make_batch(dataset, controls, enc.cov_matrix, enc.t_matrix)
        t_prime = torch.as_tensor(
            enc.t_map.encode([lab] * len(controls)), dtype=DTYPE
        )
        pred = model.predict_counterfactual_mean(batch.y, batch.x, batch.t, t_prime)
        pred_mean = pred.numpy().mean(axis=0)
        truth_mean = dataset.outcomes[members].mean(axis=0)
        r2_all.append(r_squared(truth_mean, pred_mean))
        if gene_sets is not None:
            genes = gene_sets[lab]
            r2_de.append(r_squared(truth_mean[genes], pred_mean[genes]))
    mean_all = float(np.mean(r2_all))
    mean_de = float(np.mean(r2_de)) if r2_de else float("nan")
    return mean_all, mean_de


def reconstruction_r2(model: GraphCounterfactualModel, dataset: gdata.ExpressionDataset,
                      indices, enc: Encodings | None = None) -> float:
    """Pooled R^2 of factual reconstructions over the given cells (eval mode)."""
    enc = enc or Encodings.from_dataset(dataset)
    batch = make_batch(dataset, indices, enc.cov_matrix, enc.t_matrix)
    pred = model.predict_counterfactual_mean(batch.y, batch.x, batch.t, batch.t)
    truth = dataset.outcomes[np.asarray(indices)]
    resid = truth - pred.numpy()
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((truth - truth.mean(axis=0)) ** 2))
    return 1.0 - ss_res / ss_tot


def train(model: GraphCounterfactualModel, dataset: gdata.ExpressionDataset,
          graph: gdata.RelationGraph, split: gdata.SplitAssignment,
          config: TrainingConfig, control, gene_sets: dict | None = None,
          strata: gdata.StratumTable | None = None):
    """Optimize the three-term objective with Adam; early-stop on validation R^2.

    The model is left at its best-validation checkpoint. Returns the per-epoch
    metrics history (list of dicts with METRIC_COLUMNS keys).
    """
    model.set_graph(graph)
    enc = Encodings.from_dataset(dataset)
    train_idx = split.indices(gdata.TAG_TRAIN)
    if train_idx.size == 0:
        raise DataError("empty training split")
    if strata is None:
        strata = gdata.fit_stratum_gaussians(subset(dataset, train_idx))

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(int(config.seed))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    levels = enc.t_map.levels

    history = []
    best_r2 = -math.inf
    best_state = copy.deepcopy(model.state_dict())
    evals_since_improvement = 0

    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(train_idx)
        sums = {"recon_nll": 0.0, "dist_nll": 0.0, "kl": 0.0}
        n_batches = 0
        for start in range(0, perm.size, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = make_batch(dataset, idx, enc.cov_matrix, enc.t_matrix)
            t_prime_labels = sample_counterfactual_treatment(
                batch.t_labels, levels, config.cf_mode, rng
            )
            total, terms = objective(
                model, batch, strata, config.omega1, config.omega2,
                t_prime_labels, enc.t_map, training=True, generator=gen,
            )
            if not torch.isfinite(total):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} (recon "
                    f"{float(terms['recon_nll'].detach())}, dist "
                    f"{float(terms['dist_nll'].detach())}, kl "
                    f"{float(terms['kl'].detach())})"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for key in sums:
                sums[key] += float(terms[key].detach())
            n_batches += 1

        row = {
            "epoch": epoch,
            "recon_nll": sums["recon_nll"] / n_batches,
            "dist_loss": sums["dist_nll"] / n_batches,
            "kl": sums["kl"] / n_batches,
            "val_r2_all": float("nan"),
            "val_r2_de": float("nan"),
        }

        if epoch % config.eval_every == 0 or epoch == config.max_epochs:
            val_all, val_de = evaluate_r2(
                model, dataset, split, gdata.TAG_VAL, control,
                gene_sets=gene_sets, enc=enc,
            )
            row["val_r2_all"], row["val_r2_de"] = val_all, val_de
            if val_all > best_r2:
                best_r2 = val_all
                best_state = copy.deepcopy(model.state_dict())
                evals_since_improvement = 0
            else:
                evals_since_improvement += 1
            history.append(row)
            if evals_since_improvement > config.patience:
                break
        else:
            history.append(row)

    model.load_state_dict(best_state)
    return history


def subset(dataset: gdata.ExpressionDataset, indices) -> gdata.ExpressionDataset:
    idx = np.asarray(indices)
    return gdata.ExpressionDataset(
        outcomes=dataset.outcomes[idx],
        covariates=dataset.covariates[idx],
        covariate_names=dataset.covariate_names,
        treatments=dataset.treatments[idx],
        gene_names=dataset.gene_names,
    )


def write_metrics(path, history):
    with open(path, "w") as fh:
        fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in history:
            cells = []
            for col in METRIC_COLUMNS:
                val = row[col]
                if isinstance(val, float) and math.isnan(val):
                    cells.append("")
                elif col == "epoch":
                    cells.append(str(val))
                else:
                    cells.append(format(float(val), ".17g"))
            fh.write(",".join(cells) + "\n")


def write_predictions(path, dataset, cell_indices, t_prime_labels, predictions):
    with open(path, "w") as fh:
        fh.write("cell\ttreatment\t" + "\t".join(dataset.gene_names) + "\n")
        for i, lab, row in zip(cell_indices, t_prime_labels, predictions):
            vals = "\t".join(format(float(x), ".17g") for x in row)
            fh.write(f"{i}\t{lab}\t{vals}\n")
