"""Sweep the refinement lasso weight on a planted SCM and report, per setting,
the refined edge count and the AUPRC of the learned edge weights against the
true graph, next to the absolute-correlation baseline.

    python3 scripts/refinement_sweep.py --seeds 3 --lasso 0.0 0.05 0.1 0.2
"""

import argparse

import numpy as np
from sklearn.metrics import average_precision_score

from graphcf import refine, scm


def offdiag(m: np.ndarray) -> np.ndarray:
    return m[~np.eye(m.shape[0], dtype=bool)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, default=3)
    parser.add_argument("--lasso", type=float, nargs="+", default=[0.0, 0.05, 0.1, 0.2])
    parser.add_argument("--genes", type=int, default=50)
    parser.add_argument("--cells", type=int, default=1200)
    parser.add_argument("--epochs", type=int, default=60)
    parser.add_argument("--threshold", type=float, default=0.5)
    args = parser.parse_args(argv)

    print("lasso\tseed\tedges\tauprc\tbaseline")
    for seed in range(args.seeds):
        config = scm.ScmConfig(
            n_genes=args.genes, n_cells=args.cells, n_treatments=5,
            covariate_levels=2, corrupt_delete_rate=0.2,
            noise_low=0.1, noise_high=0.25, baseline_scale=0.15, seed=100 + seed,
        )
        bundle = scm.generate(config)
        labels = offdiag(bundle.true_graph.adjacency)
        baseline = average_precision_score(
            labels, offdiag(np.abs(np.corrcoef(bundle.dataset.outcomes.T)))
        )
        for lasso in args.lasso:
            ref_config = refine.RefinementConfig(
                lasso_weight=lasso, epochs=args.epochs,
                threshold=args.threshold, seed=seed,
            )
            refined, weights = refine.refine(
                bundle.dataset, bundle.prior_graph, ref_config
            )
            auprc = average_precision_score(labels, offdiag(weights))
            print(
                f"{lasso:g}\t{seed}\t{int(refined.adjacency.sum())}"
                f"\t{auprc:.4f}\t{baseline:.4f}"
            )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
