"""Seeded linear-Gaussian structural causal model over a planted gene graph.

Serves as the verification substrate: datasets come with a known edge set,
stored noise realizations for abduction-action-prediction counterfactuals,
and closed-form marginal effects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from graphcf.data import ExpressionDataset, RelationGraph
from graphcf.errors import DataError

CONTROL_LABEL = "control"


@dataclass
class ScmConfig:
    n_genes: int = 50
    n_cells: int = 2000
    n_treatments: int = 5
    covariate_levels: int = 2
    edge_probability: float = 0.08
    coeff_low: float = 0.4
    coeff_high: float = 0.9
    noise_low: float = 0.3
    noise_high: float = 0.6
    effect_targets: int = 8
    effect_low: float = 1.0
    effect_high: float = 2.0
    baseline_scale: float = 1.0
    corrupt_delete_rate: float = 0.2
    nonlinear: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_genes < 2:
            raise DataError("n_genes must be at least 2")
        if self.n_treatments < 2:
            raise DataError("n_treatments must be at least 2 (control plus one)")
        if self.covariate_levels < 1:
            raise DataError("covariate_levels must be at least 1")


@dataclass
class SyntheticScm:
    adjacency: np.ndarray  # (n, n) uint8, entry (i, j): gene i -> gene j, upper-triangular
    coefficients: np.ndarray  # (n, n) float, same orientation
    noise_scale: np.ndarray  # (n,)
    treatment_effects: dict  # label -> (n,)
    baselines: dict  # covariate level -> (n,)
    nonlinear: bool
    seed: int
    # per-generated-cell records, filled by sample_cells
    cell_treatments: np.ndarray = field(default=None)
    cell_levels: np.ndarray = field(default=None)
    cell_noise: np.ndarray = field(default=None)

    def __post_init__(self):
        if np.any(np.tril(self.adjacency) != 0):
            raise DataError("planted adjacency must be acyclic (upper-triangular)")
        if np.any(self.noise_scale <= 0):
            raise DataError("noise scales must be positive")

    @property
    def n_genes(self) -> int:
        return self.adjacency.shape[0]

    def propagate(self, baseline: np.ndarray, effect: np.ndarray,
                  noise: np.ndarray) -> np.ndarray:
        """Forward-simulate in topological (index) order; supports batched noise."""
        noise = np.atleast_2d(noise)
        y = np.zeros_like(noise)
        for j in range(self.n_genes):
            parents = self.coefficients[:j, j]
            incoming = y[:, :j] @ parents
            if self.nonlinear:
                incoming = np.tanh(incoming)
            y[:, j] = baseline[j] + effect[j] + incoming + noise[:, j] * self.noise_scale[j]
        return y


@dataclass
class SyntheticData:
    dataset: ExpressionDataset
    true_graph: RelationGraph
    prior_graph: RelationGraph
    scm: SyntheticScm


def _build_scm(config: ScmConfig) -> SyntheticScm:
    rng = np.random.default_rng(config.seed)
    n = config.n_genes
    adjacency = np.triu(
        (rng.random((n, n)) < config.edge_probability).astype(np.uint8), k=1
    )
    signs = rng.choice([-1.0, 1.0], size=(n, n))
    coeffs = adjacency * signs * rng.uniform(config.coeff_low, config.coeff_high, (n, n))
    noise_scale = rng.uniform(config.noise_low, config.noise_high, n)

    effects = {CONTROL_LABEL: np.zeros(n)}
    for t in range(1, config.n_treatments):
        vec = np.zeros(n)
        targets = rng.choice(n, size=min(config.effect_targets, n), replace=False)
        vec[targets] = rng.choice([-1.0, 1.0], size=len(targets)) * rng.uniform(
            config.effect_low, config.effect_high, len(targets)
        )
        effects[f"t{t}"] = vec
    baselines = {
        f"c{lvl}": rng.normal(0.0, config.baseline_scale, n)
        for lvl in range(config.covariate_levels)
    }
    return SyntheticScm(
        adjacency=adjacency,
        coefficients=coeffs,
        noise_scale=noise_scale,
        treatment_effects=effects,
        baselines=baselines,
        nonlinear=config.nonlinear,
        seed=config.seed,
    )


def _node_features(scm: SyntheticScm, rng: np.random.Generator) -> np.ndarray:
    """Structural-role features: degrees and coefficient sums, lightly noised."""
    feats = np.column_stack(
        [
            scm.adjacency.sum(axis=1),
            scm.adjacency.sum(axis=0),
            scm.coefficients.sum(axis=1),
            scm.coefficients.sum(axis=0),
        ]
    ).astype(np.float64)
    return feats + 0.1 * rng.normal(size=feats.shape)


def _corrupt_prior(adjacency: np.ndarray, delete_rate: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Delete a fraction of true edges and add an equal count of false ones."""
    prior = adjacency.copy()
    edges = np.argwhere(prior == 1)
    n_delete = int(round(delete_rate * len(edges)))
    if n_delete > 0:
        drop = rng.choice(len(edges), size=n_delete, replace=False)
        for i, j in edges[drop]:
            prior[i, j] = 0
        non_edges = np.argwhere((adjacency == 0) & ~np.eye(adjacency.shape[0], dtype=bool))
        add = rng.choice(len(non_edges), size=n_delete, replace=False)
        for i, j in non_edges[add]:
            prior[i, j] = 1
    return prior


def sample_cells(scm: SyntheticScm, n_cells: int, seed: int,
                 gene_names=None, record: bool = True) -> ExpressionDataset:
    """Draw cells from the SCM; optionally record noise for counterfactual oracles."""
    rng = np.random.default_rng(seed)
    labels = list(scm.treatment_effects)
    levels = list(scm.baselines)
    treatments = rng.choice(labels, size=n_cells)
    cell_levels = rng.choice(levels, size=n_cells)
    noise = rng.normal(size=(n_cells, scm.n_genes))
    outcomes = np.empty((n_cells, scm.n_genes))
    for lab in labels:
        for lvl in levels:
            mask = (treatments == lab) & (cell_levels == lvl)
            if mask.any():
                outcomes[mask] = scm.propagate(
                    scm.baselines[lvl], scm.treatment_effects[lab], noise[mask]
                )
    if record:
        scm.cell_treatments = treatments.astype(object)
        scm.cell_levels = cell_levels.astype(object)
        scm.cell_noise = noise
    gene_names = gene_names or [f"g{i}" for i in range(scm.n_genes)]
    return ExpressionDataset(
        outcomes=outcomes,
        covariates=cell_levels.astype(object).reshape(-1, 1),
        covariate_names=["cell_type"],
        treatments=treatments.astype(object),
        gene_names=gene_names,
    )


def generate(config: ScmConfig) -> SyntheticData:
    """Build an SCM, sample a dataset and emit true and corrupted prior graphs."""
    scm = _build_scm(config)
    rng = np.random.default_rng(config.seed + 1)
    gene_names = [f"g{i}" for i in range(config.n_genes)]
    dataset = sample_cells(scm, config.n_cells, config.seed + 2, gene_names)
    features = _node_features(scm, rng)
    true_graph = RelationGraph(
        node_features=features, adjacency=scm.adjacency, gene_names=gene_names
    )
    prior_graph = RelationGraph(
        node_features=features,
        adjacency=_corrupt_prior(scm.adjacency, config.corrupt_delete_rate, rng),
        gene_names=gene_names,
    )
    return SyntheticData(dataset=dataset, true_graph=true_graph,
                         prior_graph=prior_graph, scm=scm)


def true_counterfactual(scm: SyntheticScm, cell: int, treatment) -> np.ndarray:
    """Re-propagate the cell's stored noise under a different treatment."""
    if scm.cell_noise is None or not 0 <= cell < len(scm.cell_noise):
        raise DataError(f"cell {cell} was not generated by this SCM")
    if treatment not in scm.treatment_effects:
        raise DataError(f"unknown treatment {treatment!r}")
    level = scm.cell_levels[cell]
    return scm.propagate(
        scm.baselines[level], scm.treatment_effects[treatment], scm.cell_noise[cell]
    )[0]


def true_marginal(scm: SyntheticScm, treatment, level, n_samples: int = 200_000,
                  seed: int = 12345) -> np.ndarray:
    """Expected expression under (treatment, covariate level).

    Closed-form for the linear SCM; Monte-Carlo for the nonlinear variant.
    """
    if treatment not in scm.treatment_effects:
        raise DataError(f"unknown treatment {treatment!r}")
    if level not in scm.baselines:
        raise DataError(f"unknown covariate level {level!r}")
    drive = scm.baselines[level] + scm.treatment_effects[treatment]
    if not scm.nonlinear:
        n = scm.n_genes
        return np.linalg.solve(np.eye(n) - scm.coefficients.T, drive)
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=(n_samples, scm.n_genes))
    return scm.propagate(
        scm.baselines[level], scm.treatment_effects[treatment], noise
    ).mean(axis=0)


def dump_truth(path, scm: SyntheticScm):
    """Structured dump of the SCM parameters for audit."""
    payload = {
        "seed": scm.seed,
        "nonlinear": scm.nonlinear,
        "adjacency": scm.adjacency.tolist(),
        "coefficients": scm.coefficients.tolist(),
        "noise_scale": scm.noise_scale.tolist(),
        "treatment_effects": {k: v.tolist() for k, v in scm.treatment_effects.items()},
        "baselines": {k: v.tolist() for k, v in scm.baselines.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
