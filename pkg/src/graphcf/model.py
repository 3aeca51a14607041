"""Graph-conditioned variational counterfactual model.

Encoder: a dense branch over (Y, X, T), a graph-convolution branch over the
relation graph, and a Gaussian head fusing both into a graph-level latent.
Decoder: a Gaussian head over (latent, treatment) producing a feature vector
whose entries are mixed per gene by attention over the node embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from graphcf import data as gdata
from graphcf.errors import DataError
from graphcf.layers import (
    DTYPE,
    LOGVAR_MAX,
    LOGVAR_MIN,
    AttentionAggregator,
    DenseStack,
    DiagGaussianHead,
    GraphConvStack,
    gaussian_log_likelihood,
    kl_diag_gaussian,
    reparam_sample,
)

AGGR_MODES = ("sum", "max", "mean")


@dataclass
class ModelConfig:
    n_genes: int
    n_covariate_dims: int
    n_treatment_dims: int
    n_node_features: int
    latent_dim: int = 32
    graph_dim: int = 8
    encoder_hidden: tuple = (128,)
    decoder_hidden: tuple = (128,)
    gcn_hidden: tuple = ()
    attention_mode: str = "key-independent"
    aggr: str = "mean"
    # larger attention init diversifies the per-gene readout weights, which
    # otherwise start near-uniform and break symmetry slowly
    attention_init_gain: float = 5.0
    output_logvar_init: float = 1.0
    init_seed: int = 0

    def __post_init__(self):
        if self.aggr not in AGGR_MODES:
            raise DataError(f"unknown aggregation mode {self.aggr!r}")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.gcn_hidden = tuple(self.gcn_hidden)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentState:
    """Encoder outputs for a batch of cells sharing one graph."""

    z_g: torch.Tensor  # (n, graph_dim), deterministic, cell-independent
    z_m: torch.Tensor  # (batch, latent_dim)
    mean: torch.Tensor  # (batch, latent_dim)
    variance: torch.Tensor  # (batch, latent_dim)
    z_h: torch.Tensor  # (batch, latent_dim), sampled or mean


@dataclass
class DecodedGaussian:
    mean: torch.Tensor  # (batch, n_genes)
    variance: torch.Tensor  # (n_genes,)
    y_m: torch.Tensor  # (batch, latent_dim)


@dataclass
class Batch:
    y: torch.Tensor
    x: torch.Tensor
    t: torch.Tensor
    cov_tuples: list
    t_labels: np.ndarray


def make_batch(dataset, indices, cov_matrix, t_matrix) -> Batch:
    idx = np.asarray(indices)
    return Batch(
        y=torch.as_tensor(dataset.outcomes[idx], dtype=DTYPE),
        x=torch.as_tensor(cov_matrix[idx], dtype=DTYPE),
        t=torch.as_tensor(t_matrix[idx], dtype=DTYPE),
        cov_tuples=[dataset.covariate_tuple(i) for i in idx],
        t_labels=dataset.treatments[idx],
    )


class GraphCounterfactualModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.init_seed)
        n, m, r = config.n_genes, config.n_covariate_dims, config.n_treatment_dims
        d, dg, v = config.latent_dim, config.graph_dim, config.n_node_features

        enc_dims = [n + m + r, *config.encoder_hidden, d]
        enc_acts = ["relu"] * len(config.encoder_hidden) + ["identity"]
        self.f_m = DenseStack(enc_dims, enc_acts, gen)

        gcn_dims = [v, *config.gcn_hidden, dg]
        gcn_acts = ["relu"] * len(config.gcn_hidden) + ["tanh"]
        self.f_g = GraphConvStack(gcn_dims, gcn_acts, gen)

        head_dims = [d + dg, *config.encoder_hidden, d]
        head_acts = ["relu"] * len(config.encoder_hidden) + ["identity"]
        self.q_h = DiagGaussianHead(head_dims, head_acts, gen)

        dec_dims = [d + r, *config.decoder_hidden, d]
        dec_acts = ["relu"] * len(config.decoder_hidden) + ["identity"]
        self.p_m = DiagGaussianHead(dec_dims, dec_acts, gen)

        self.f_h = AttentionAggregator(dg, d, gen, mode=config.attention_mode)
        with torch.no_grad():
            for w in self.f_h.stack.weights:
                w.mul_(config.attention_init_gain)
        self.gene_logvar = nn.Parameter(
            torch.full((n,), float(config.output_logvar_init), dtype=DTYPE)
        )

        self._node_features = None
        self._adjacency = None

    # -- graph handling ----------------------------------------------------
    def set_graph(self, graph: gdata.RelationGraph):
        if graph.n_nodes != self.config.n_genes:
            raise DataError("graph node count does not match model gene count")
        if graph.n_features != self.config.n_node_features:
            raise DataError("graph feature width does not match model config")
        self._node_features = torch.as_tensor(graph.node_features, dtype=DTYPE)
        self._adjacency = torch.as_tensor(graph.adjacency, dtype=DTYPE)

    def node_embeddings(self) -> torch.Tensor:
        if self._node_features is None:
            raise DataError("no graph set on the model")
        return self.f_g(self._node_features, self._adjacency)

    def _aggregate(self, z_g: torch.Tensor) -> torch.Tensor:
        if self.config.aggr == "sum":
            return z_g.sum(dim=0)
        if self.config.aggr == "max":
            return z_g.max(dim=0).values
        return z_g.mean(dim=0)

    # -- encoder / decoder --------------------------------------------------
    def encode(self, y, x, t, sample=True, noise=None,
               generator: torch.Generator | None = None) -> LatentState:
        z_g = self.node_embeddings()
        z_m = self.f_m(torch.cat([y, x, t], dim=-1))
        pooled = self._aggregate(z_g).unsqueeze(0).expand(z_m.shape[0], -1)
        mean, variance = self.q_h(torch.cat([z_m, pooled], dim=-1))
        if sample:
            z_h = reparam_sample(mean, variance, noise=noise, generator=generator)
        else:
            z_h = mean
        return LatentState(z_g=z_g, z_m=z_m, mean=mean, variance=variance, z_h=z_h)

    def decode(self, latent: LatentState, t, sample=False, noise=None,
               generator: torch.Generator | None = None) -> DecodedGaussian:
        ym_mean, ym_var = self.p_m(torch.cat([latent.z_h, t], dim=-1))
        if sample:
            y_m = reparam_sample(ym_mean, ym_var, noise=noise, generator=generator)
        else:
            y_m = ym_mean
        weights = self.f_h.scores(latent.z_g, y_m)  # (batch, n, d)
        mean = torch.einsum("bnd,bd->bn", weights, y_m)
        variance = torch.exp(torch.clamp(self.gene_logvar, LOGVAR_MIN, LOGVAR_MAX))
        return DecodedGaussian(mean=mean, variance=variance, y_m=y_m)

    # -- prediction helpers ---------------------------------------------------
    def predict_counterfactual_mean(self, y, x, t, t_prime,
                                    sample_latent=False,
                                    generator: torch.Generator | None = None) -> torch.Tensor:
        """Deterministic counterfactual mean prediction (eval mode)."""
        with torch.no_grad():
            latent = self.encode(y, x, t, sample=sample_latent, generator=generator)
            return self.decode(latent, t_prime, sample=False).mean


def sample_counterfactual_treatment(t_labels, levels, mode: str, rng: np.random.Generator):
    """Counterfactual treatment labels: uniform over the other observed labels,
    or a random permutation of the batch's own labels."""
    t_labels = np.asarray(t_labels, dtype=object)
    if mode == "permute":
        return t_labels[rng.permutation(len(t_labels))]
    if mode == "uniform-other":
        if len(levels) < 2:
            raise DataError("uniform-other sampling needs at least two treatments")
        out = np.empty(len(t_labels), dtype=object)
        for i, lab in enumerate(t_labels):
            others = [lev for lev in levels if lev != lab]
            out[i] = others[rng.integers(len(others))]
        return out
    raise DataError(f"unknown counterfactual sampling mode {mode!r}")


def counterfactual_forward(model: GraphCounterfactualModel, batch: Batch,
                           t_prime: torch.Tensor, training=True,
                           generator: torch.Generator | None = None,
                           noise: dict | None = None):
    """Encode factually, decode under the counterfactual treatment, re-encode.

    Returns (factual latent, counterfactual outcome draw, re-encoded latent,
    factual decode). In training mode the counterfactual outcome is a
    reparameterized draw; in eval mode it is the decoded mean.
    """
    noise = noise or {}
    latent = model.encode(batch.y, batch.x, batch.t, sample=training,
                          noise=noise.get("z_h"), generator=generator)
    decoded_fact = model.decode(latent, batch.t, sample=training,
                                noise=noise.get("y_m"), generator=generator)
    decoded_cf = model.decode(latent, t_prime, sample=training,
                              noise=noise.get("y_m_cf"), generator=generator)
    if training:
        eps = noise.get("y_cf")
        if eps is None:
            eps = torch.randn(decoded_cf.mean.shape, generator=generator, dtype=DTYPE)
        y_cf = decoded_cf.mean + torch.sqrt(decoded_cf.variance) * eps
    else:
        y_cf = decoded_cf.mean
    latent_cf = model.encode(y_cf, batch.x, t_prime, sample=False)
    return latent, y_cf, latent_cf, decoded_fact


def objective(model: GraphCounterfactualModel, batch: Batch,
              strata: gdata.StratumTable, omega1: float, omega2: float,
              t_prime_labels, t_map: gdata.OneHotMap,
              training=True, generator: torch.Generator | None = None,
              noise: dict | None = None):
    """Three-term training loss (to minimize) and its breakdown.

    total = recon_nll + omega1 * dist_nll + omega2 * kl, each averaged over
    the batch. Gradients flow through the counterfactual draw into the
    distribution and KL terms.
    """
    t_prime = torch.as_tensor(t_map.encode(t_prime_labels), dtype=DTYPE)
    latent, y_cf, latent_cf, decoded_fact = counterfactual_forward(
        model, batch, t_prime, training=training, generator=generator, noise=noise
    )
    recon_nll = -gaussian_log_likelihood(
        batch.y, decoded_fact.mean, decoded_fact.variance
    ).mean()

    means = np.empty((len(batch.cov_tuples), model.config.n_genes))
    variances = np.empty_like(means)
    for i, (cov, lab) in enumerate(zip(batch.cov_tuples, t_prime_labels)):
        fit = strata.lookup(cov, lab)
        means[i] = fit.mean
        variances[i] = fit.variance
    dist_nll = -gaussian_log_likelihood(
        y_cf,
        torch.as_tensor(means, dtype=DTYPE),
        torch.as_tensor(variances, dtype=DTYPE),
    ).mean()

    kl = kl_diag_gaussian(
        latent.mean, latent.variance, latent_cf.mean, latent_cf.variance
    ).mean()

    total = recon_nll + omega1 * dist_nll + omega2 * kl
    terms = {"recon_nll": recon_nll, "dist_nll": dist_nll, "kl": kl}
    return total, terms
