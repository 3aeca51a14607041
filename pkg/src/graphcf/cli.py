"""Command-line pipeline: synth -> refine-graph -> train -> evaluate -> estimate."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from graphcf import data as gdata
from graphcf import marginal, refine, scm, training
from graphcf.config import RunConfig, apply_override, load_config
from graphcf.errors import ConfigError, DataError, DivergenceError
from graphcf.layers import DTYPE, load_checkpoint, restore_module, save_checkpoint
from graphcf.model import GraphCounterfactualModel, ModelConfig, make_batch

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

CHECKPOINT_FILE = "checkpoint.npz"
SPLIT_FILE = "split.tsv"


def _resolve(path: str, out_dir: str) -> str:
    if os.path.isabs(path) or os.path.exists(path):
        return path
    candidate = os.path.join(out_dir, path)
    return candidate if os.path.exists(candidate) else path


def _prepare_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    for assignment in args.set or []:
        apply_override(config, assignment)
    if args.seed is not None:
        config.seed = args.seed
    if args.out is not None:
        config.paths.output_dir = args.out
    os.makedirs(config.paths.output_dir, exist_ok=True)
    return config


def _load_dataset(config: RunConfig) -> gdata.ExpressionDataset:
    out = config.paths.output_dir
    try:
        return gdata.load_dataset(
            _resolve(config.paths.expression, out),
            _resolve(config.paths.covariates, out),
            _resolve(config.paths.treatments, out),
        )
    except FileNotFoundError as exc:
        raise DataError(f"missing dataset file: {exc.filename}") from None


def _load_graph(config: RunConfig) -> gdata.RelationGraph:
    out = config.paths.output_dir
    try:
        return gdata.load_graph(
            _resolve(config.paths.graph_edges, out),
            _resolve(config.paths.graph_features, out),
        )
    except FileNotFoundError as exc:
        raise DataError(f"missing graph file: {exc.filename}") from None


def _split(config: RunConfig, dataset: gdata.ExpressionDataset) -> gdata.SplitAssignment:
    path = os.path.join(config.paths.output_dir, SPLIT_FILE)
    if os.path.exists(path):
        split = gdata.load_split(path)
        if split.tags.shape[0] != dataset.n_cells:
            raise DataError(f"{path}: split size does not match dataset")
        return split
    blk = config.split
    assignment = gdata.select_ood(dataset, blk.covariate, blk.category, blk.k)
    split = gdata.split_train_val(
        dataset, assignment, config.seed_for("split", blk.seed)
    )
    gdata.save_split(split, path)
    return split


def _training_config(config: RunConfig) -> training.TrainingConfig:
    blk = config.training
    return training.TrainingConfig(
        omega1=blk.omega1,
        omega2=blk.omega2,
        learning_rate=blk.learning_rate,
        batch_size=blk.batch_size,
        max_epochs=blk.max_epochs,
        patience=blk.patience,
        eval_every=blk.eval_every,
        seed=config.seed_for("train", blk.seed),
        cf_mode=blk.cf_mode,
    )


def _build_model(config: RunConfig, dataset, graph) -> GraphCounterfactualModel:
    enc = training.Encodings.from_dataset(dataset)
    blk = config.model
    mc = ModelConfig(
        n_genes=dataset.n_genes,
        n_covariate_dims=enc.cov_matrix.shape[1],
        n_treatment_dims=enc.t_matrix.shape[1],
        n_node_features=graph.n_features,
        latent_dim=blk.latent_dim,
        graph_dim=blk.graph_dim,
        encoder_hidden=tuple(blk.encoder_hidden),
        decoder_hidden=tuple(blk.decoder_hidden),
        gcn_hidden=tuple(blk.gcn_hidden),
        attention_mode=blk.attention_mode,
        aggr=blk.aggr,
        attention_init_gain=blk.attention_init_gain,
        output_logvar_init=blk.output_logvar_init,
        init_seed=config.seed_for("model-init", None),
    )
    model = GraphCounterfactualModel(mc)
    model.set_graph(graph)
    return model


def _restore_model(config: RunConfig, dataset, graph) -> GraphCounterfactualModel:
    path = os.path.join(config.paths.output_dir, CHECKPOINT_FILE)
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint: {path}")
    arrays, metadata = load_checkpoint(path)
    mc = ModelConfig(**metadata["model_config"])
    model = GraphCounterfactualModel(mc)
    restore_module(model, arrays)
    model.set_graph(graph)
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(config: RunConfig) -> int:
    blk = config.synth
    try:
        scm_config = scm.ScmConfig(
            n_genes=blk.n_genes,
            n_cells=blk.n_cells,
            n_treatments=blk.n_treatments,
            covariate_levels=blk.covariate_levels,
            edge_probability=blk.edge_probability,
            effect_targets=blk.effect_targets,
            noise_low=blk.noise_low,
            noise_high=blk.noise_high,
            baseline_scale=blk.baseline_scale,
            corrupt_delete_rate=blk.corrupt_delete_rate,
            nonlinear=blk.nonlinear,
            seed=config.seed_for("synth", blk.seed),
        )
    except DataError as exc:
        raise ConfigError(f"synth: {exc}") from None
    bundle = scm.generate(scm_config)
    out = config.paths.output_dir
    gdata.save_dataset(
        bundle.dataset,
        os.path.join(out, config.paths.expression),
        os.path.join(out, config.paths.covariates),
        os.path.join(out, config.paths.treatments),
    )
    gdata.save_graph(
        bundle.prior_graph,
        os.path.join(out, config.paths.graph_edges),
        os.path.join(out, config.paths.graph_features),
    )
    gdata.save_graph(
        bundle.true_graph,
        os.path.join(out, "true.edges.tsv"),
        os.path.join(out, "true.features.tsv"),
    )
    scm.dump_truth(os.path.join(out, "scm_truth.json"), bundle.scm)
    print(
        f"synth: {bundle.dataset.n_cells} cells x {bundle.dataset.n_genes} genes, "
        f"{int(bundle.true_graph.adjacency.sum())} true edges, "
        f"{int(bundle.prior_graph.adjacency.sum())} prior edges -> {out}"
    )
    return 0


def cmd_refine(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    graph = _load_graph(config)
    split = _split(config, dataset)
    blk = config.refinement
    ref_config = refine.RefinementConfig(
        keep_rate_prior=blk.keep_rate_prior,
        keep_rate_other=blk.keep_rate_other,
        lasso_weight=blk.lasso_weight,
        threshold=blk.threshold,
        epochs=blk.epochs,
        learning_rate=blk.learning_rate,
        batch_size=blk.batch_size,
        hidden_width=blk.hidden_width,
        penalize_diagonal=blk.penalize_diagonal,
        diagonal_weight=blk.diagonal_weight,
        seed=config.seed_for("refine", blk.seed),
    )
    refined, weights = refine.refine(
        dataset, graph, ref_config, cell_indices=split.indices(gdata.TAG_TRAIN)
    )
    out = config.paths.output_dir
    gdata.save_graph(
        refined,
        os.path.join(out, "refined.edges.tsv"),
        os.path.join(out, "refined.features.tsv"),
    )
    refine.write_edge_weights(
        os.path.join(out, "edge_weights.tsv"),
        refined.gene_names,
        weights,
        top_k=blk.top_k_weights,
    )
    before = int(graph.adjacency.sum())
    after = int(refined.adjacency.sum())
    print(f"refine-graph: edges before={before} after={after} (threshold={blk.threshold})")
    if after > 0.5 * refined.n_nodes**2:
        print("refine-graph: warning: refined graph is dense; consider a higher threshold")
    return 0


def cmd_train(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    graph = _load_graph(config)
    split = _split(config, dataset)
    control = config.split.control
    gene_sets = gdata.select_de_genes(dataset, control, config.split.de_count)
    model = _build_model(config, dataset, graph)
    history = training.train(
        model, dataset, graph, split, _training_config(config),
        control, gene_sets=gene_sets,
    )
    out = config.paths.output_dir
    training.write_metrics(os.path.join(out, "metrics.csv"), history)
    save_checkpoint(
        os.path.join(out, CHECKPOINT_FILE),
        model,
        metadata={"model_config": model.config.to_dict(), "control": control},
    )
    evaluated = [row for row in history if not np.isnan(row["val_r2_all"])]
    best = max(row["val_r2_all"] for row in evaluated)
    print(
        f"train: {len(history)} epochs, best validation R2(all)="
        f"{best:.4f} -> {out}"
    )
    return 0


def cmd_evaluate(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    graph = _load_graph(config)
    split = _split(config, dataset)
    model = _restore_model(config, dataset, graph)
    control = config.split.control
    gene_sets = gdata.select_de_genes(dataset, control, config.split.de_count)
    enc = training.Encodings.from_dataset(dataset)

    tag = gdata.TAG_OOD if split.indices(gdata.TAG_OOD).size else gdata.TAG_VAL
    r2_all, r2_de = training.evaluate_r2(
        model, dataset, split, tag, control, gene_sets=gene_sets, enc=enc
    )

    # Counterfactual mean predictions for every evaluated group, seeded by the
    # control cells of the group's covariate tuple.
    cov_tuples = dataset.covariate_tuples()
    non_ood = split.tags != gdata.TAG_OOD
    rows_cells, rows_labels, rows_preds = [], [], []
    seen = set()
    for i in split.indices(tag):
        key = (cov_tuples[i], dataset.treatments[i])
        if key[1] == control or key in seen:
            continue
        seen.add(key)
        controls = [
            j
            for j in range(dataset.n_cells)
            if non_ood[j] and cov_tuples[j] == key[0] and dataset.treatments[j] == control
        ]
        batch = make_batch(dataset, controls, enc.cov_matrix, enc.t_matrix)
        t_prime = torch.as_tensor(enc.t_map.encode([key[1]] * len(controls)), dtype=DTYPE)
        preds = model.predict_counterfactual_mean(batch.y, batch.x, batch.t, t_prime)
        rows_cells.extend(controls)
        rows_labels.extend([key[1]] * len(controls))
        rows_preds.extend(preds.numpy())

    out = config.paths.output_dir
    training.write_predictions(
        os.path.join(out, "predictions.tsv"), dataset, rows_cells, rows_labels, rows_preds
    )
    with open(os.path.join(out, "evaluation.csv"), "w") as fh:
        fh.write("split,r2_all,r2_de\n")
        fh.write(f"{tag},{format(r2_all, '.17g')},{format(r2_de, '.17g')}\n")
    print(f"evaluate[{tag}]: R2(all)={r2_all:.4f} R2(DE)={r2_de:.4f}")
    return 0


def cmd_estimate(config: RunConfig) -> int:
    dataset = _load_dataset(config)
    graph = _load_graph(config)
    split = _split(config, dataset)
    model = _restore_model(config, dataset, graph)
    control = config.split.control
    gene_sets = gdata.select_de_genes(dataset, control, config.split.de_count)
    blk = config.estimator
    rows = marginal.compare_estimators(
        model, dataset, split,
        gene_sets=gene_sets,
        repeats=blk.repeats,
        sample_latent=blk.sample_latent,
        seed=config.seed_for("estimate", blk.seed),
    )
    out = config.paths.output_dir
    marginal.write_comparison(os.path.join(out, "estimator_comparison.csv"), rows)

    train_ds = training.subset(dataset, split.indices(gdata.TAG_TRAIN))
    enc = training.Encodings.from_dataset(train_ds)
    if blk.strata == "all":
        strata = []
        seen = set()
        for i in range(train_ds.n_cells):
            key = (train_ds.treatments[i], train_ds.covariate_tuple(i))
            if key not in seen:
                seen.add(key)
                strata.append(key)
    else:
        strata = [(t, (c,)) for t, c in blk.strata]
    estimates = []
    for treatment, cov in strata:
        estimates.append(
            marginal.robust_estimate(model, train_ds, treatment, cov, enc)
        )
        estimates.append(
            marginal.empirical_mean_estimate(model, train_ds, treatment, cov, enc)
        )
    marginal.write_marginals(os.path.join(out, "marginals.tsv"), estimates)
    for row in rows:
        print(
            f"estimate[{row['gene_set']}]: {row['method']} R2={row['r2']:.4f} "
            f"(std {row['std']:.4f})"
        )
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphcf",
        description="Graph-conditioned counterfactual prediction pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in [
        ("synth", cmd_synth),
        ("refine-graph", cmd_refine),
        ("train", cmd_train),
        ("evaluate", cmd_evaluate),
        ("estimate", cmd_estimate),
    ]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="YAML run configuration")
        p.add_argument("--set", action="append", metavar="K=V",
                       help="override a config value, e.g. training.max_epochs=50")
        p.add_argument("--seed", type=int, default=None, help="root seed override")
        p.add_argument("--out", default=None, help="output directory override")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _prepare_config(args)
        return args.func(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
