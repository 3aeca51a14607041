"""Dataset plumbing: ingestion, encodings, splits, DE genes, stratum fits."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphcf import data as gdata
from graphcf.errors import DataError


def make_dataset(outcomes, covariates, treatments, covariate_names=None,
                 gene_names=None):
    outcomes = np.asarray(outcomes, dtype=np.float64)
    covariate_names = covariate_names or [f"cov{j}" for j in range(np.asarray(covariates, dtype=object).reshape(len(outcomes), -1).shape[1])]
    gene_names = gene_names or [f"g{i}" for i in range(outcomes.shape[1])]
    return gdata.ExpressionDataset(
        outcomes=outcomes,
        covariates=np.asarray(covariates, dtype=object),
        covariate_names=covariate_names,
        treatments=np.asarray(treatments, dtype=object),
        gene_names=gene_names,
    )


# -- ingestion ---------------------------------------------------------------

def write_dataset_files(tmp_path, expr_lines, cov_lines, t_lines):
    paths = []
    for name, lines in [("expression.tsv", expr_lines),
                        ("covariates.tsv", cov_lines),
                        ("treatments.tsv", t_lines)]:
        p = tmp_path / name
        p.write_text("\n".join(lines) + "\n")
        paths.append(str(p))
    return paths


def test_load_dataset_shapes(tmp_path):
    paths = write_dataset_files(
        tmp_path,
        ["g0\tg1", "1\t2", "3\t4", "5\t6"],
        ["cell_type", "a", "a", "b"],
        ["control", "t1", "control"],
    )
    ds = gdata.load_dataset(*paths)
    assert ds.outcomes.shape == (3, 2)
    assert ds.gene_names == ["g0", "g1"]
    assert list(ds.treatments) == ["control", "t1", "control"]


def test_load_dataset_row_count_mismatch(tmp_path):
    paths = write_dataset_files(
        tmp_path,
        ["g0\tg1", "1\t2", "3\t4", "5\t6"],
        ["cell_type", "a", "a", "b"],
        ["control", "t1"],
    )
    with pytest.raises(DataError, match="mismatch"):
        gdata.load_dataset(*paths)


def test_load_dataset_nan_names_row_and_column(tmp_path):
    paths = write_dataset_files(
        tmp_path,
        ["g0\tg1", "1\t2", "3\tNaN"],
        ["cell_type", "a", "a"],
        ["control", "t1"],
    )
    with pytest.raises(DataError, match=r"row 1.*g1"):
        gdata.load_dataset(*paths)


def test_load_dataset_non_numeric_named(tmp_path):
    paths = write_dataset_files(
        tmp_path,
        ["g0\tg1", "1\tbogus"],
        ["cell_type", "a"],
        ["control"],
    )
    with pytest.raises(DataError, match="bogus"):
        gdata.load_dataset(*paths)


def test_dataset_roundtrip(tmp_path):
    ds = make_dataset(
        [[0.25, -1.5], [3.0, 4.125]], [["a"], ["b"]], ["control", "t1"]
    )
    paths = [str(tmp_path / n) for n in ("e.tsv", "c.tsv", "t.tsv")]
    gdata.save_dataset(ds, *paths)
    back = gdata.load_dataset(*paths)
    np.testing.assert_array_equal(back.outcomes, ds.outcomes)
    assert list(back.treatments) == list(ds.treatments)
    assert back.covariate_tuples() == ds.covariate_tuples()


def test_graph_roundtrip(tmp_path):
    graph = gdata.RelationGraph(
        node_features=np.arange(6.0).reshape(3, 2),
        adjacency=np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]]),
        gene_names=["g0", "g1", "g2"],
    )
    edges, feats = str(tmp_path / "e.tsv"), str(tmp_path / "f.tsv")
    gdata.save_graph(graph, edges, feats)
    back = gdata.load_graph(edges, feats)
    np.testing.assert_array_equal(back.adjacency, graph.adjacency)
    np.testing.assert_array_equal(back.node_features, graph.node_features)
    assert back.gene_names == graph.gene_names


def test_graph_rejects_non_binary_adjacency():
    with pytest.raises(DataError, match="binary"):
        gdata.RelationGraph(
            node_features=np.zeros((2, 1)),
            adjacency=np.array([[0, 2], [0, 0]]),
            gene_names=["g0", "g1"],
        )


def test_split_roundtrip(tmp_path):
    split = gdata.SplitAssignment(np.array(["train", "val", "ood"], dtype=object))
    path = str(tmp_path / "split.tsv")
    gdata.save_split(split, path)
    back = gdata.load_split(path)
    assert list(back.tags) == list(split.tags)


# -- one-hot encoding --------------------------------------------------------

def test_encode_covariates_two_blocks():
    ds = make_dataset(
        np.zeros((3, 1)),
        [["A", "Z"], ["B", "X"], ["A", "Y"]],
        ["t"] * 3,
    )
    enc = gdata.encode_covariates(ds)
    assert enc.shape == (3, 5)
    # first-occurrence order: A,B then Z,X,Y; row (A, Y) -> [1,0, 0,0,1]
    np.testing.assert_array_equal(enc[2], [1, 0, 0, 0, 1])


def test_single_level_covariate_all_ones():
    ds = make_dataset(np.zeros((4, 1)), [["only"]] * 4, ["t"] * 4)
    enc = gdata.encode_covariates(ds)
    np.testing.assert_array_equal(enc, np.ones((4, 1)))


def test_onehot_unknown_label_errors():
    m = gdata.OneHotMap(["a", "b"])
    with pytest.raises(DataError, match="unknown label"):
        m.encode(["c"])


@given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_onehot_roundtrip(labels):
    m = gdata.OneHotMap(labels)
    assert m.decode(m.encode(labels)) == labels
    assert np.all(m.encode(labels).sum(axis=1) == 1)


def test_encoding_row_permutation_equivariance():
    labels = ["a", "b", "a", "c", "b"]
    ds = make_dataset(np.zeros((5, 1)), [[x] for x in labels], ["t"] * 5)
    enc = gdata.encode_covariates(ds)
    perm = [3, 0, 4, 2, 1]
    ds_p = make_dataset(np.zeros((5, 1)), [[labels[i]] for i in perm], ["t"] * 5)
    maps = gdata.covariate_maps(ds)
    np.testing.assert_array_equal(gdata.encode_covariates(ds_p, maps), enc[perm])


# -- pseudobulk and OOD selection --------------------------------------------

def test_pseudobulk_mean():
    ds = make_dataset([[1, 3], [3, 5], [10, 10]], [["a"]] * 3, ["t1", "t1", "t2"])
    pb = gdata.pseudobulk(ds)
    np.testing.assert_array_equal(pb["t1"], [2, 4])
    np.testing.assert_array_equal(pb["t2"], [10, 10])


def test_pseudobulk_cell_order_invariant():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(20, 3))
    t = rng.choice(["t1", "t2"], size=20)
    ds = make_dataset(y, [["a"]] * 20, t)
    perm = rng.permutation(20)
    ds_p = make_dataset(y[perm], [["a"]] * 20, t[perm])
    for lab in ("t1", "t2"):
        np.testing.assert_allclose(
            gdata.pseudobulk(ds)[lab], gdata.pseudobulk(ds_p)[lab]
        )


def brute_force_ood(dataset, covariate_name, category, k):
    """Independent oracle: rank treatments by pseudobulk distance to the rest."""
    levels = gdata.OneHotMap(dataset.treatments).levels
    dist = {}
    for lab in levels:
        pb = dataset.outcomes[dataset.treatments == lab].mean(axis=0)
        rest = dataset.outcomes[dataset.treatments != lab]
        dist[lab] = np.linalg.norm(pb - rest.mean(axis=0)) if len(rest) else 0.0
    held = set(sorted(levels, key=lambda lab: (-dist[lab], levels.index(lab)))[:k])
    col = dataset.covariate_names.index(covariate_name)
    return {
        i
        for i in range(dataset.n_cells)
        if dataset.covariates[i, col] == category and dataset.treatments[i] in held
    }


def test_select_ood_fixture():
    # pseudobulks [0,0], [1,0], [10,0]: treatment t3 is by far the most distant
    ds = make_dataset(
        [[0, 0], [1, 0], [10, 0]], [["a"], ["a"], ["a"]], ["t1", "t2", "t3"]
    )
    split = gdata.select_ood(ds, "cov0", "a", k=1)
    assert list(split.tags) == ["train", "train", "ood"]


def test_select_ood_matches_brute_force():
    rng = np.random.default_rng(7)
    n = 120
    y = rng.normal(size=(n, 4)) + rng.integers(0, 4, size=(n, 1))
    t = rng.choice(["t1", "t2", "t3", "t4", "control"], size=n)
    c = rng.choice(["a", "b"], size=n)
    ds = make_dataset(y, [[x] for x in c], t)
    for k in (1, 2, 5):
        split = gdata.select_ood(ds, "cov0", "a", k=k)
        expected = brute_force_ood(ds, "cov0", "a", k)
        assert set(split.indices(gdata.TAG_OOD)) == expected


def test_select_ood_all_treatments():
    ds = make_dataset(
        [[0.0], [1.0], [2.0], [3.0]], [["a"], ["a"], ["b"], ["b"]],
        ["t1", "t2", "t1", "t2"],
    )
    split = gdata.select_ood(ds, "cov0", "a", k=2)
    assert set(split.indices(gdata.TAG_OOD)) == {0, 1}


def test_select_ood_k_too_large():
    ds = make_dataset([[0.0], [1.0]], [["a"], ["a"]], ["t1", "t2"])
    with pytest.raises(DataError, match="exceeds"):
        gdata.select_ood(ds, "cov0", "a", k=3)


def test_select_ood_default_k_is_twenty():
    import inspect

    sig = inspect.signature(gdata.select_ood)
    assert sig.parameters["k"].default == 20


# -- train/val split ---------------------------------------------------------

def test_split_counts_exact():
    ds = make_dataset(np.zeros((100, 1)), [["a"]] * 100, ["t"] * 100)
    base = gdata.SplitAssignment(np.array(["train"] * 100, dtype=object))
    split = gdata.split_train_val(ds, base, seed=0)
    assert split.indices(gdata.TAG_TRAIN).size == 80
    assert split.indices(gdata.TAG_VAL).size == 20


def test_split_five_cells():
    ds = make_dataset(np.zeros((5, 1)), [["a"]] * 5, ["t"] * 5)
    base = gdata.SplitAssignment(np.array(["train"] * 5, dtype=object))
    split = gdata.split_train_val(ds, base, seed=1)
    assert split.indices(gdata.TAG_TRAIN).size == 4
    assert split.indices(gdata.TAG_VAL).size == 1


def test_split_seed_determinism_and_partition(small_bundle):
    ds = small_bundle.dataset
    base = gdata.select_ood(ds, "cell_type", "c0", 1)
    a = gdata.split_train_val(ds, base, seed=9)
    b = gdata.split_train_val(ds, base, seed=9)
    assert list(a.tags) == list(b.tags)
    sizes = [a.indices(t).size for t in (gdata.TAG_TRAIN, gdata.TAG_VAL, gdata.TAG_OOD)]
    assert sum(sizes) == ds.n_cells
    assert not set(a.indices(gdata.TAG_OOD)) & set(a.indices(gdata.TAG_TRAIN))


# -- DE genes ----------------------------------------------------------------

def test_de_genes_shifted_gene_ranks_first():
    rng = np.random.default_rng(2)
    y = rng.normal(size=(200, 5)) * 0.1
    t = np.array(["control"] * 100 + ["t1"] * 100, dtype=object)
    y[100:, 2] += 5.0  # only gene 2 shifts under t1
    ds = make_dataset(y, [["a"]] * 200, t)
    sets = gdata.select_de_genes(ds, "control", per_treatment_count=1)
    assert list(sets["t1"]) == [2]


def test_de_genes_clamped_to_gene_count():
    ds = make_dataset(np.zeros((4, 3)), [["a"]] * 4, ["control", "t1"] * 2)
    sets = gdata.select_de_genes(ds, "control", per_treatment_count=50)
    assert len(sets["t1"]) == 3


def test_de_genes_missing_control():
    ds = make_dataset(np.zeros((2, 2)), [["a"]] * 2, ["t1", "t2"])
    with pytest.raises(DataError, match="control"):
        gdata.select_de_genes(ds, "control")


def test_de_genes_stable_across_reruns(small_bundle):
    a = gdata.select_de_genes(small_bundle.dataset, "control", 5)
    b = gdata.select_de_genes(small_bundle.dataset, "control", 5)
    assert set(a) == set(b)
    for lab in a:
        np.testing.assert_array_equal(a[lab], b[lab])


# -- stratum Gaussians -------------------------------------------------------

def test_stratum_fit_hand_values():
    # samples {1, 3}: mean 2, population variance 1
    ds = make_dataset(
        [[1.0], [3.0], [1.0], [3.0]], [["a"]] * 4, ["t"] * 4
    )
    table = gdata.fit_stratum_gaussians(ds, variance_floor=0.01, min_stratum_size=2)
    fit = table.lookup(("a",), "t")
    assert fit.mean[0] == pytest.approx(2.0)
    assert fit.variance[0] == pytest.approx(1.0)


def test_stratum_small_falls_back_to_pooled():
    ds = make_dataset(
        [[0.0], [10.0], [10.0], [10.0]],
        [["a"], ["b"], ["b"], ["b"]],
        ["t"] * 4,
    )
    table = gdata.fit_stratum_gaussians(ds, min_stratum_size=2)
    fit = table.lookup(("a",), "t")
    assert fit.pooled
    assert fit.mean[0] == pytest.approx(7.5)  # pooled over all four cells


def test_stratum_constant_gets_floor():
    ds = make_dataset([[5.0]] * 4, [["a"]] * 4, ["t"] * 4)
    table = gdata.fit_stratum_gaussians(ds, variance_floor=1e-4, min_stratum_size=2)
    assert table.lookup(("a",), "t").variance[0] == pytest.approx(1e-4)


def test_stratum_log_density_finite():
    ds = make_dataset([[5.0]] * 4, [["a"]] * 4, ["t"] * 4)
    table = gdata.fit_stratum_gaussians(ds)
    assert np.isfinite(table.lookup(("a",), "t").log_density(np.array([1e6])))


def test_stratum_lookup_unknown_treatment():
    ds = make_dataset([[0.0]] * 4, [["a"]] * 4, ["t"] * 4)
    table = gdata.fit_stratum_gaussians(ds)
    with pytest.raises(DataError, match="no stratum fit"):
        table.lookup(("a",), "nope")
