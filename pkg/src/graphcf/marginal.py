"""Covariate-stratified marginal effect estimation: robust (influence-corrected)
and empirical-mean estimators, plus their comparison harness."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from graphcf import data as gdata
from graphcf.errors import DataError
from graphcf.layers import DTYPE
from graphcf.model import GraphCounterfactualModel, make_batch
from graphcf.training import Encodings, r_squared

METHOD_ROBUST = "robust"
METHOD_MEAN = "empirical-mean"


@dataclass
class MarginalEstimate:
    treatment: object
    covariates: tuple
    estimate: np.ndarray
    method: str
    n_stratum: int
    n_treated: int

    def __post_init__(self):
        if self.n_treated > self.n_stratum:
            raise DataError("treated count exceeds stratum size")
        if not np.all(np.isfinite(self.estimate)):
            raise DataError("non-finite marginal estimate")


def stratum_predictions(model: GraphCounterfactualModel, dataset: gdata.ExpressionDataset,
                        treatment, covariates: tuple, enc: Encodings | None = None,
                        sample_latent: bool = False,
                        generator: torch.Generator | None = None):
    """Counterfactual mean predictions at T'=treatment for all cells with X=covariates.

    Returns (cell indices, predictions array).
    """
    enc = enc or Encodings.from_dataset(dataset)
    covariates = tuple(covariates)
    idx = [i for i, cov in enumerate(dataset.covariate_tuples()) if cov == covariates]
    if not idx:
        raise DataError(f"no cells with covariates {covariates!r}")
    batch = make_batch(dataset, idx, enc.cov_matrix, enc.t_matrix)
    t_prime = torch.as_tensor(enc.t_map.encode([treatment] * len(idx)), dtype=DTYPE)
    preds = model.predict_counterfactual_mean(
        batch.y, batch.x, batch.t, t_prime,
        sample_latent=sample_latent, generator=generator,
    )
    return np.asarray(idx), preds.numpy()


def robust_estimate(model, dataset, treatment, covariates, enc=None,
                    sample_latent=False, generator=None) -> MarginalEstimate:
    """Influence-corrected estimate: treated-cells mean residual plus the
    stratum-wide mean prediction."""
    idx, preds = stratum_predictions(
        model, dataset, treatment, covariates, enc, sample_latent, generator
    )
    treated = dataset.treatments[idx] == treatment
    if not np.any(treated):
        raise DataError(
            f"no cells with treatment {treatment!r} in stratum {tuple(covariates)!r}; "
            "use empirical_mean_estimate instead"
        )
    residual = (dataset.outcomes[idx[treated]] - preds[treated]).mean(axis=0)
    estimate = residual + preds.mean(axis=0)
    return MarginalEstimate(
        treatment=treatment,
        covariates=tuple(covariates),
        estimate=estimate,
        method=METHOD_ROBUST,
        n_stratum=len(idx),
        n_treated=int(treated.sum()),
    )


def empirical_mean_estimate(model, dataset, treatment, covariates, enc=None,
                            sample_latent=False, generator=None) -> MarginalEstimate:
    """Mean model prediction over the covariate stratum."""
    idx, preds = stratum_predictions(
        model, dataset, treatment, covariates, enc, sample_latent, generator
    )
    treated = dataset.treatments[idx] == treatment
    return MarginalEstimate(
        treatment=treatment,
        covariates=tuple(covariates),
        estimate=preds.mean(axis=0),
        method=METHOD_MEAN,
        n_stratum=len(idx),
        n_treated=int(treated.sum()),
    )


def efficient_influence(y, factual_mean, counterfactual_mean, in_stratum: bool,
                        in_treated_stratum: bool, p_x: float, p_xt: float,
                        psi) -> np.ndarray:
    """Per-observation efficient influence function value.

    I(X=c, T=a)/p(X,T) * (Y - E[Y|Z,T]) + I(X=c)/p(X) * (E[Y'|Z,T'=a] - Psi).
    """
    if not (0.0 < p_x <= 1.0 and 0.0 < p_xt <= 1.0):
        raise DataError("stratum probabilities must lie in (0, 1]")
    y = np.asarray(y, dtype=np.float64)
    out = np.zeros_like(y)
    if in_treated_stratum:
        out += (y - np.asarray(factual_mean)) / p_xt
    if in_stratum:
        out += (np.asarray(counterfactual_mean) - np.asarray(psi)) / p_x
    return out


def average_influence(dataset: gdata.ExpressionDataset, predictions: dict,
                      treatment, covariates: tuple, psi: np.ndarray) -> np.ndarray:
    """Dataset average of the plug-in influence function with empirical densities.

    predictions maps cell index -> counterfactual mean at T'=treatment (which
    equals the factual conditional mean on cells already treated with it).
    Equals robust_estimate - psi exactly when psi is arbitrary.
    """
    covariates = tuple(covariates)
    cov_tuples = dataset.covariate_tuples()
    n = dataset.n_cells
    n_c = sum(1 for cov in cov_tuples if cov == covariates)
    n_ac = sum(
        1
        for i, cov in enumerate(cov_tuples)
        if cov == covariates and dataset.treatments[i] == treatment
    )
    if n_c == 0 or n_ac == 0:
        raise DataError("empty stratum for influence averaging")
    p_x, p_xt = n_c / n, n_ac / n
    total = np.zeros(dataset.n_genes)
    for i in range(n):
        in_stratum = cov_tuples[i] == covariates
        in_treated = in_stratum and dataset.treatments[i] == treatment
        if not in_stratum:
            continue
        pred = predictions[i]
        total += efficient_influence(
            dataset.outcomes[i], pred, pred, in_stratum, in_treated, p_x, p_xt, psi
        )
    return total / n


def compare_estimators(model, dataset, split: gdata.SplitAssignment,
                       gene_sets: dict | None = None, repeats: int = 1,
                       sample_latent: bool = False, seed: int = 0):
    """Score both estimators against reference-split stratum means.

    Estimates are computed on the training split; the truth for each
    (treatment, covariates) stratum is the validation split's mean outcome.
    Returns rows with method, gene_set, r2 (mean over repeats) and std.
    """
    from graphcf.training import subset

    train_idx = split.indices(gdata.TAG_TRAIN)
    val_idx = split.indices(gdata.TAG_VAL)
    if train_idx.size == 0 or val_idx.size == 0:
        raise DataError("need nonempty train and validation splits")
    train_ds = subset(dataset, train_idx)
    val_ds = subset(dataset, val_idx)
    enc = Encodings.from_dataset(train_ds)

    val_tuples = val_ds.covariate_tuples()
    strata = []
    seen = set()
    for i in range(val_ds.n_cells):
        key = (val_ds.treatments[i], val_tuples[i])
        if key not in seen:
            seen.add(key)
            strata.append(key)

    generator = torch.Generator().manual_seed(int(seed))
    scores = {
        (method, gs): []
        for method in (METHOD_MEAN, METHOD_ROBUST)
        for gs in (["all", "de"] if gene_sets is not None else ["all"])
    }
    for _ in range(max(1, repeats)):
        per_method = {METHOD_MEAN: {"all": [], "de": []}, METHOD_ROBUST: {"all": [], "de": []}}
        for treatment, cov in strata:
            truth = val_ds.outcomes[
                [
                    i
                    for i in range(val_ds.n_cells)
                    if val_ds.treatments[i] == treatment and val_tuples[i] == cov
                ]
            ].mean(axis=0)
            try:
                est_r = robust_estimate(
                    model, train_ds, treatment, cov, enc,
                    sample_latent=sample_latent, generator=generator,
                )
                est_m = empirical_mean_estimate(
                    model, train_ds, treatment, cov, enc,
                    sample_latent=sample_latent, generator=generator,
                )
            except DataError as exc:
                warnings.warn(f"skipping stratum {(treatment, cov)!r}: {exc}")
                continue
            for est in (est_r, est_m):
                per_method[est.method]["all"].append(r_squared(truth, est.estimate))
                if gene_sets is not None:
                    genes = gene_sets[treatment]
                    per_method[est.method]["de"].append(
                        r_squared(truth[genes], est.estimate[genes])
                    )
        for (method, gs) in scores:
            vals = per_method[method][gs]
            if vals:
                scores[(method, gs)].append(float(np.mean(vals)))
    rows = []
    for (method, gs), vals in scores.items():
        if not vals:
            continue
        rows.append(
            {
                "method": method,
                "gene_set": "all-genes" if gs == "all" else "de-genes",
                "r2": float(np.mean(vals)),
                "std": float(np.std(vals)),
            }
        )
    return rows


def write_marginals(path, estimates):
    with open(path, "w") as fh:
        fh.write("treatment\tcovariates\tmethod\testimates\n")
        for est in estimates:
            cov = "|".join(str(c) for c in est.covariates)
            vals = "\t".join(format(float(x), ".17g") for x in est.estimate)
            fh.write(f"{est.treatment}\t{cov}\t{est.method}\t{vals}\n")


def write_comparison(path, rows):
    with open(path, "w") as fh:
        fh.write("method,gene_set,r2,std\n")
        for row in rows:
            fh.write(
                f"{row['method']},{row['gene_set']},"
                f"{format(row['r2'], '.17g')},{format(row['std'], '.17g')}\n"
            )
