"""Dataset ingestion, covariate encoding, splits, DE-gene selection and stratum fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from graphcf.errors import DataError

TAG_TRAIN = "train"
TAG_VAL = "val"
TAG_OOD = "ood"

VARIANCE_FLOOR = 1e-4
MIN_STRATUM_SIZE = 3
DE_GENES_PER_TREATMENT = 50
OOD_TREATMENT_COUNT = 20
_DE_EPS = 1e-8


def _fmt(x) -> str:
    return format(float(x), ".17g")


class OneHotMap:
    """Bijective label <-> one-hot mapping with first-occurrence level order."""

    def __init__(self, labels):
        levels = []
        seen = set()
        for lab in labels:
            if lab not in seen:
                seen.add(lab)
                levels.append(lab)
        self.levels = levels
        self._index = {lab: i for i, lab in enumerate(levels)}

    @property
    def width(self) -> int:
        return len(self.levels)

    def encode(self, labels) -> np.ndarray:
        out = np.zeros((len(labels), self.width))
        for row, lab in enumerate(labels):
            try:
                out[row, self._index[lab]] = 1.0
            except KeyError:
                raise DataError(f"unknown label {lab!r}") from None
        return out

    def decode(self, onehot: np.ndarray) -> list:
        return [self.levels[j] for j in np.argmax(onehot, axis=1)]


@dataclass
class ExpressionDataset:
    """Per-cell outcome matrix with categorical covariates and treatments."""

    outcomes: np.ndarray  # (cells, n_genes) float
    covariates: np.ndarray  # (cells, n_covariates) object/str
    covariate_names: list[str]
    treatments: np.ndarray  # (cells,) str
    gene_names: list[str]

    def __post_init__(self):
        self.outcomes = np.asarray(self.outcomes, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=object)
        if self.covariates.ndim == 1:
            self.covariates = self.covariates.reshape(-1, 1)
        self.treatments = np.asarray(self.treatments, dtype=object)
        cells = self.outcomes.shape[0]
        if self.outcomes.ndim != 2 or self.outcomes.shape[1] != len(self.gene_names):
            raise DataError("outcome matrix shape does not match gene names")
        if not np.all(np.isfinite(self.outcomes)):
            bad = np.argwhere(~np.isfinite(self.outcomes))[0]
            raise DataError(
                f"non-finite expression value at cell {bad[0]}, gene "
                f"{self.gene_names[bad[1]]!r}"
            )
        if self.covariates.shape != (cells, len(self.covariate_names)):
            raise DataError("covariate matrix shape does not match covariate names")
        if self.treatments.shape != (cells,):
            raise DataError(
                f"treatment count {self.treatments.shape[0]} does not match "
                f"cell count {cells}"
            )

    @property
    def n_cells(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_genes(self) -> int:
        return self.outcomes.shape[1]

    def covariate_tuple(self, cell: int) -> tuple:
        return tuple(self.covariates[cell])

    def covariate_tuples(self) -> list[tuple]:
        return [tuple(row) for row in self.covariates]

    def treatment_levels(self) -> list:
        return OneHotMap(self.treatments).levels


@dataclass
class RelationGraph:
    """Directed relation graph: rows of the adjacency are source nodes."""

    node_features: np.ndarray  # (n, v) float
    adjacency: np.ndarray  # (n, n) binary
    gene_names: list[str]

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.adjacency = np.asarray(self.adjacency)
        n = len(self.gene_names)
        if self.node_features.shape[0] != n:
            raise DataError("node feature rows do not match gene count")
        if self.adjacency.shape != (n, n):
            raise DataError("adjacency must be square over the gene set")
        vals = np.unique(self.adjacency)
        if not np.all(np.isin(vals, [0, 1])):
            raise DataError("adjacency entries must be binary")
        self.adjacency = self.adjacency.astype(np.uint8)

    @property
    def n_nodes(self) -> int:
        return len(self.gene_names)

    @property
    def n_features(self) -> int:
        return self.node_features.shape[1]


@dataclass
class SplitAssignment:
    """Per-cell split tag in {train, val, ood}."""

    tags: np.ndarray  # (cells,) str

    def __post_init__(self):
        self.tags = np.asarray(self.tags, dtype=object)
        bad = set(self.tags) - {TAG_TRAIN, TAG_VAL, TAG_OOD}
        if bad:
            raise DataError(f"unknown split tags: {sorted(bad)}")

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.tags == tag)


@dataclass
class StratumGaussian:
    """Diagonal Gaussian fit of outcomes within one (covariates, treatment) stratum."""

    covariates: tuple
    treatment: object
    mean: np.ndarray
    variance: np.ndarray
    n_cells: int
    pooled: bool = False

    def log_density(self, y: np.ndarray) -> float:
        resid = np.asarray(y) - self.mean
        return float(
            -0.5 * np.sum(np.log(2 * math.pi * self.variance) + resid**2 / self.variance)
        )


@dataclass
class StratumTable:
    """Lookup of stratum Gaussians with pooled-by-treatment fallback."""

    strata: dict = field(default_factory=dict)  # (cov_tuple, treatment) -> StratumGaussian
    pooled: dict = field(default_factory=dict)  # treatment -> StratumGaussian

    def lookup(self, covariates: tuple, treatment) -> StratumGaussian:
        fit = self.strata.get((tuple(covariates), treatment))
        if fit is not None:
            return fit
        fit = self.pooled.get(treatment)
        if fit is None:
            raise DataError(f"no stratum fit for treatment {treatment!r}")
        return fit

    def records(self) -> list[StratumGaussian]:
        return list(self.strata.values())


# ---------------------------------------------------------------------------
# File ingestion / emission
# ---------------------------------------------------------------------------

def _read_tsv(path):
    with open(path) as fh:
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip() != ""]
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows


def load_dataset(expression_path, covariate_path, treatment_path) -> ExpressionDataset:
    """Load the three-file TSV dataset layout; row i across files is one cell."""
    expr_rows = _read_tsv(expression_path)
    gene_names = expr_rows[0]
    outcomes = np.empty((len(expr_rows) - 1, len(gene_names)))
    for i, row in enumerate(expr_rows[1:]):
        if len(row) != len(gene_names):
            raise DataError(
                f"{expression_path}: row {i} has {len(row)} values, expected "
                f"{len(gene_names)}"
            )
        for j, tok in enumerate(row):
            try:
                val = float(tok)
            except ValueError:
                raise DataError(
                    f"{expression_path}: non-numeric value {tok!r} at row {i}, "
                    f"column {gene_names[j]!r}"
                ) from None
            if not math.isfinite(val):
                raise DataError(
                    f"{expression_path}: non-finite value at row {i}, column "
                    f"{gene_names[j]!r}"
                )
            outcomes[i, j] = val

    cov_rows = _read_tsv(covariate_path)
    covariate_names = cov_rows[0]
    covariates = np.array(cov_rows[1:], dtype=object)
    if covariates.size and covariates.shape[1] != len(covariate_names):
        raise DataError(f"{covariate_path}: ragged covariate rows")

    with open(treatment_path) as fh:
        treatments = [line.strip() for line in fh if line.strip() != ""]

    n_cells = outcomes.shape[0]
    if covariates.shape[0] != n_cells or len(treatments) != n_cells:
        raise DataError(
            f"cell count mismatch: expression {n_cells}, covariates "
            f"{covariates.shape[0]}, treatments {len(treatments)}"
        )
    return ExpressionDataset(
        outcomes=outcomes,
        covariates=covariates,
        covariate_names=covariate_names,
        treatments=np.array(treatments, dtype=object),
        gene_names=gene_names,
    )


def save_dataset(dataset: ExpressionDataset, expression_path, covariate_path, treatment_path):
    with open(expression_path, "w") as fh:
        fh.write("\t".join(dataset.gene_names) + "\n")
        for row in dataset.outcomes:
            fh.write("\t".join(_fmt(x) for x in row) + "\n")
    with open(covariate_path, "w") as fh:
        fh.write("\t".join(dataset.covariate_names) + "\n")
        for row in dataset.covariates:
            fh.write("\t".join(str(x) for x in row) + "\n")
    with open(treatment_path, "w") as fh:
        for lab in dataset.treatments:
            fh.write(f"{lab}\n")


def load_graph(edges_path, features_path) -> RelationGraph:
    """Load a relation graph; features file carries the gene order (first column)."""
    feat_rows = _read_tsv(features_path)
    gene_names = [row[0] for row in feat_rows[1:]]
    features = np.array([[float(x) for x in row[1:]] for row in feat_rows[1:]])
    index = {g: i for i, g in enumerate(gene_names)}
    adjacency = np.zeros((len(gene_names), len(gene_names)), dtype=np.uint8)
    edge_rows = _read_tsv(edges_path)
    start = 1 if edge_rows[0] == ["source", "target"] else 0
    for row in edge_rows[start:]:
        if len(row) != 2:
            raise DataError(f"{edges_path}: expected two columns per edge")
        try:
            adjacency[index[row[0]], index[row[1]]] = 1
        except KeyError as exc:
            raise DataError(f"{edges_path}: unknown gene {exc.args[0]!r}") from None
    return RelationGraph(node_features=features, adjacency=adjacency, gene_names=gene_names)


def save_graph(graph: RelationGraph, edges_path, features_path):
    with open(edges_path, "w") as fh:
        fh.write("source\ttarget\n")
        for i, j in np.argwhere(graph.adjacency == 1):
            fh.write(f"{graph.gene_names[i]}\t{graph.gene_names[j]}\n")
    with open(features_path, "w") as fh:
        header = ["gene"] + [f"f{k}" for k in range(graph.n_features)]
        fh.write("\t".join(header) + "\n")
        for name, row in zip(graph.gene_names, graph.node_features):
            fh.write(name + "\t" + "\t".join(_fmt(x) for x in row) + "\n")


def save_split(split: SplitAssignment, path):
    with open(path, "w") as fh:
        fh.write("cell\ttag\n")
        for i, tag in enumerate(split.tags):
            fh.write(f"{i}\t{tag}\n")


def load_split(path) -> SplitAssignment:
    rows = _read_tsv(path)
    tags = [row[1] for row in rows[1:]]
    return SplitAssignment(tags=np.array(tags, dtype=object))


# ---------------------------------------------------------------------------
# Encoding, pseudobulk, splits
# ---------------------------------------------------------------------------

def covariate_maps(dataset: ExpressionDataset) -> list[OneHotMap]:
    return [OneHotMap(dataset.covariates[:, j]) for j in range(len(dataset.covariate_names))]


def encode_covariates(dataset: ExpressionDataset, maps=None) -> np.ndarray:
    """Concatenated one-hot blocks, one per covariate column."""
    maps = maps if maps is not None else covariate_maps(dataset)
    blocks = [m.encode(dataset.covariates[:, j]) for j, m in enumerate(maps)]
    return np.concatenate(blocks, axis=1)


def encode_treatments(dataset: ExpressionDataset, treatment_map=None) -> np.ndarray:
    treatment_map = treatment_map if treatment_map is not None else OneHotMap(dataset.treatments)
    return treatment_map.encode(dataset.treatments)


def pseudobulk(dataset: ExpressionDataset) -> dict:
    """Per-treatment mean expression vector."""
    out = {}
    for lab in OneHotMap(dataset.treatments).levels:
        out[lab] = dataset.outcomes[dataset.treatments == lab].mean(axis=0)
    return out


def ood_treatment_distances(dataset: ExpressionDataset) -> dict:
    """Euclidean distance between each treatment's pseudobulk and the rest's."""
    dist = {}
    for lab, pb in pseudobulk(dataset).items():
        rest = dataset.outcomes[dataset.treatments != lab]
        if rest.shape[0] == 0:
            dist[lab] = 0.0
        else:
            dist[lab] = float(np.linalg.norm(pb - rest.mean(axis=0)))
    return dist


def select_ood(
    dataset: ExpressionDataset,
    covariate_name: str,
    category,
    k: int = OOD_TREATMENT_COUNT,
) -> SplitAssignment:
    """Tag as OOD the held-out category's cells under the k most distant treatments."""
    if covariate_name not in dataset.covariate_names:
        raise DataError(f"unknown covariate {covariate_name!r}")
    col = dataset.covariate_names.index(covariate_name)
    if category not in set(dataset.covariates[:, col]):
        raise DataError(f"covariate {covariate_name!r} has no category {category!r}")
    levels = OneHotMap(dataset.treatments).levels
    if k > len(levels):
        raise DataError(f"k={k} exceeds the number of distinct treatments ({len(levels)})")
    dist = ood_treatment_distances(dataset)
    order = sorted(levels, key=lambda lab: (-dist[lab], levels.index(lab)))
    held = set(order[:k])
    tags = np.array(
        [
            TAG_OOD
            if dataset.covariates[i, col] == category and dataset.treatments[i] in held
            else TAG_TRAIN
            for i in range(dataset.n_cells)
        ],
        dtype=object,
    )
    return SplitAssignment(tags=tags)


def split_train_val(dataset: ExpressionDataset, assignment: SplitAssignment, seed: int) -> SplitAssignment:
    """Split non-OOD cells 4:1 train:val, seeded."""
    tags = assignment.tags.copy()
    candidates = np.flatnonzero(tags != TAG_OOD)
    if candidates.size == 0:
        raise DataError("no non-OOD cells to split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(candidates)
    n_val = candidates.size // 5
    tags[perm[:n_val]] = TAG_VAL
    tags[perm[n_val:]] = TAG_TRAIN
    return SplitAssignment(tags=tags)


# ---------------------------------------------------------------------------
# DE genes and stratum fits
# ---------------------------------------------------------------------------

def select_de_genes(
    dataset: ExpressionDataset,
    control,
    per_treatment_count: int = DE_GENES_PER_TREATMENT,
) -> dict:
    """Top genes per treatment by |standardized mean difference| against control."""
    if control not in set(dataset.treatments):
        raise DataError(f"control treatment {control!r} not present in dataset")
    ctrl = dataset.outcomes[dataset.treatments == control]
    mu_c, var_c, n_c = ctrl.mean(axis=0), ctrl.var(axis=0), ctrl.shape[0]
    count = min(per_treatment_count, dataset.n_genes)
    out = {}
    for lab in OneHotMap(dataset.treatments).levels:
        grp = dataset.outcomes[dataset.treatments == lab]
        mu_t, var_t, n_t = grp.mean(axis=0), grp.var(axis=0), grp.shape[0]
        pooled_sd = np.sqrt((var_t * n_t + var_c * n_c) / (n_t + n_c))
        score = np.abs(mu_t - mu_c) / (pooled_sd + _DE_EPS)
        out[lab] = np.argsort(-score, kind="stable")[:count]
    return out


def fit_stratum_gaussians(
    dataset: ExpressionDataset,
    variance_floor: float = VARIANCE_FLOOR,
    min_stratum_size: int = MIN_STRATUM_SIZE,
) -> StratumTable:
    """Diagonal Gaussian per (covariates, treatment) stratum, pooled fallback for small ones.

    Population variance convention, clamped below by the floor.
    """
    if variance_floor <= 0:
        raise DataError("variance_floor must be positive")
    table = StratumTable()
    cov_tuples = dataset.covariate_tuples()
    for lab in OneHotMap(dataset.treatments).levels:
        mask = dataset.treatments == lab
        grp = dataset.outcomes[mask]
        table.pooled[lab] = StratumGaussian(
            covariates=(),
            treatment=lab,
            mean=grp.mean(axis=0),
            variance=np.maximum(grp.var(axis=0), variance_floor),
            n_cells=grp.shape[0],
            pooled=True,
        )
    keys = []
    seen = set()
    for i in range(dataset.n_cells):
        key = (cov_tuples[i], dataset.treatments[i])
        if key not in seen:
            seen.add(key)
            keys.append(key)
    for cov, lab in keys:
        idx = [
            i
            for i in range(dataset.n_cells)
            if cov_tuples[i] == cov and dataset.treatments[i] == lab
        ]
        if len(idx) < min_stratum_size:
            pooled = table.pooled[lab]
            table.strata[(cov, lab)] = StratumGaussian(
                covariates=cov,
                treatment=lab,
                mean=pooled.mean,
                variance=pooled.variance,
                n_cells=len(idx),
                pooled=True,
            )
        else:
            grp = dataset.outcomes[idx]
            table.strata[(cov, lab)] = StratumGaussian(
                covariates=cov,
                treatment=lab,
                mean=grp.mean(axis=0),
                variance=np.maximum(grp.var(axis=0), variance_floor),
                n_cells=len(idx),
            )
    return table
