"""Differentiable primitives: finite-difference gradient oracles, Monte-Carlo
and quadrature cross-checks, checkpoint round-trips."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from graphcf import layers
from graphcf.errors import DataError
from conftest import finite_difference_check

DTYPE = torch.float64


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


# -- dense stacks ------------------------------------------------------------

def test_dense_zero_weights_returns_activated_bias():
    stack = layers.DenseStack([3, 2], ["tanh"], gen())
    with torch.no_grad():
        stack.weights[0].zero_()
        stack.biases[0].copy_(torch.tensor([0.5, -1.0], dtype=DTYPE))
    out = stack(torch.ones(4, 3, dtype=DTYPE))
    expected = torch.tanh(torch.tensor([0.5, -1.0], dtype=DTYPE)).expand(4, 2)
    torch.testing.assert_close(out, expected)


def test_dense_identity_single_layer_is_affine():
    stack = layers.DenseStack([2, 3], ["identity"], gen(1))
    x = torch.randn(5, 2, generator=gen(2), dtype=DTYPE)
    expected = x @ stack.weights[0] + stack.biases[0]
    torch.testing.assert_close(stack(x), expected)


def test_dense_width_mismatch():
    stack = layers.DenseStack([2, 3], ["identity"], gen())
    with pytest.raises(DataError, match="width"):
        stack(torch.zeros(1, 4, dtype=DTYPE))


@pytest.mark.parametrize("seed", range(5))
def test_dense_gradients_match_finite_differences(seed):
    stack = layers.DenseStack([3, 5, 4, 2], ["tanh", "tanh", "identity"], gen(seed))
    x = torch.randn(4, 3, generator=gen(seed + 100), dtype=DTYPE, requires_grad=True)
    params = [x, *stack.weights, *stack.biases]
    finite_difference_check(lambda: (stack(x) ** 2).sum(), params)


# -- graph convolution -------------------------------------------------------

def test_gcn_identity_adjacency_equals_dense():
    stack = layers.GraphConvStack([3, 2], ["identity"], gen(4))
    x = torch.randn(6, 3, generator=gen(5), dtype=DTYPE)
    eye = torch.eye(6, dtype=DTYPE)
    dense = x @ stack.stack.weights[0] + stack.stack.biases[0]
    torch.testing.assert_close(stack(x, eye), dense)


def test_gcn_star_graph_center_is_neighborhood_mean():
    # center node 0 connected to 1, 2, 3; one identity layer
    adj = torch.zeros(4, 4, dtype=DTYPE)
    adj[0, 1:] = 1.0
    stack = layers.GraphConvStack([2, 2], ["identity"], gen(6))
    x = torch.randn(4, 2, generator=gen(7), dtype=DTYPE)
    out = stack(x, adj)
    expected = x.mean(dim=0) @ stack.stack.weights[0] + stack.stack.biases[0]
    torch.testing.assert_close(out[0], expected)


def test_gcn_isolated_node_without_self_loops_errors():
    stack = layers.GraphConvStack([1, 1], ["identity"], gen(), self_loops=False)
    with pytest.raises(DataError, match="isolated"):
        stack(torch.zeros(2, 1, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE))


def test_normalized_adjacency_rows_sum_to_one():
    adj = (torch.rand(8, 8, generator=gen(8), dtype=DTYPE) < 0.3).to(DTYPE)
    norm = layers.normalize_adjacency(adj)
    torch.testing.assert_close(norm.sum(dim=1), torch.ones(8, dtype=DTYPE))


@pytest.mark.parametrize("seed", range(5))
def test_gcn_gradients_match_finite_differences(seed):
    stack = layers.GraphConvStack([2, 3, 2], ["tanh", "identity"], gen(seed))
    adj = (torch.rand(5, 5, generator=gen(seed + 50), dtype=DTYPE) < 0.4).to(DTYPE)
    x = torch.randn(5, 2, generator=gen(seed + 60), dtype=DTYPE, requires_grad=True)
    params = [x, *stack.stack.weights, *stack.stack.biases]
    finite_difference_check(lambda: (stack(x, adj) ** 2).sum(), params)


# -- attention ---------------------------------------------------------------

def test_attention_equal_logits_uniform():
    att = layers.AttentionAggregator(3, 4, gen(9), mode="key-independent")
    with torch.no_grad():
        att.stack.weights[0].zero_()
    scores = att.scores(torch.randn(5, 3, generator=gen(10), dtype=DTYPE),
                        torch.randn(2, 4, generator=gen(11), dtype=DTYPE))
    torch.testing.assert_close(scores, torch.full((2, 5, 4), 0.25, dtype=DTYPE))


def test_attention_scores_are_probability_vectors():
    for mode in ("key-dependent", "key-independent"):
        att = layers.AttentionAggregator(3, 4, gen(12), mode=mode)
        scores = att.scores(
            torch.randn(6, 3, generator=gen(13), dtype=DTYPE),
            torch.randn(2, 4, generator=gen(14), dtype=DTYPE),
        )
        assert torch.all(scores >= 0)
        torch.testing.assert_close(
            scores.sum(dim=-1), torch.ones(2, 6, dtype=DTYPE), atol=1e-12, rtol=0
        )


def test_key_independent_ignores_key():
    att = layers.AttentionAggregator(3, 4, gen(15), mode="key-independent")
    nodes = torch.randn(5, 3, generator=gen(16), dtype=DTYPE)
    k1 = torch.randn(2, 4, generator=gen(17), dtype=DTYPE)
    torch.testing.assert_close(att.scores(nodes, k1), att.scores(nodes, k1 + 100.0))


def test_attention_unknown_mode():
    with pytest.raises(DataError, match="mode"):
        layers.AttentionAggregator(2, 2, gen(), mode="bogus")


@pytest.mark.parametrize("mode", ["key-dependent", "key-independent"])
def test_attention_gradients_match_finite_differences(mode):
    att = layers.AttentionAggregator(3, 4, gen(18), mode=mode)
    nodes = torch.randn(5, 3, generator=gen(19), dtype=DTYPE, requires_grad=True)
    key = torch.randn(2, 4, generator=gen(20), dtype=DTYPE, requires_grad=True)
    params = [nodes, *att.stack.weights, *att.stack.biases]
    if mode == "key-dependent":
        params.append(key)
    finite_difference_check(lambda: (att.scores(nodes, key) ** 3).sum(), params)


# -- Gaussian machinery ------------------------------------------------------

def test_reparam_zero_noise_returns_mean():
    mean = torch.tensor([1.0, -2.0], dtype=DTYPE)
    var = torch.tensor([0.5, 2.0], dtype=DTYPE)
    torch.testing.assert_close(
        layers.reparam_sample(mean, var, noise=torch.zeros(2, dtype=DTYPE)), mean
    )


def test_reparam_zero_variance_clamped():
    mean = torch.tensor([3.0], dtype=DTYPE)
    out = layers.reparam_sample(
        mean, torch.zeros(1, dtype=DTYPE), noise=torch.ones(1, dtype=DTYPE)
    )
    torch.testing.assert_close(out, mean + layers.VAR_FLOOR**0.5)


def test_reparam_monte_carlo_mean():
    mean = torch.tensor([2.0], dtype=DTYPE)
    var = torch.tensor([4.0], dtype=DTYPE)
    g = gen(21)
    draws = torch.stack(
        [layers.reparam_sample(mean, var, generator=g) for _ in range(100_000)]
    )
    # sample mean within 5 standard errors
    se = (4.0 / 100_000) ** 0.5
    assert abs(float(draws.mean()) - 2.0) < 5 * se


def test_reparam_gradients_match_finite_differences():
    mean = torch.randn(4, generator=gen(22), dtype=DTYPE, requires_grad=True)
    var = torch.rand(4, generator=gen(23), dtype=DTYPE).add(0.1).requires_grad_()
    noise = torch.randn(4, generator=gen(24), dtype=DTYPE)
    finite_difference_check(
        lambda: (layers.reparam_sample(mean, var, noise=noise) ** 2).sum(),
        [mean, var],
    )


def test_kl_identical_is_zero():
    m = torch.tensor([1.0, 2.0], dtype=DTYPE)
    v = torch.tensor([0.3, 1.7], dtype=DTYPE)
    assert float(layers.kl_diag_gaussian(m, v, m, v)) == pytest.approx(0.0, abs=1e-14)


def test_kl_unit_shift_is_half():
    one = torch.ones(1, dtype=DTYPE)
    assert float(
        layers.kl_diag_gaussian(one, one, torch.zeros(1, dtype=DTYPE), one)
    ) == pytest.approx(0.5)


def test_kl_nonnegative_random():
    g = gen(25)
    for _ in range(50):
        pm, qm = torch.randn(3, generator=g, dtype=DTYPE), torch.randn(3, generator=g, dtype=DTYPE)
        pv = torch.rand(3, generator=g, dtype=DTYPE) + 0.05
        qv = torch.rand(3, generator=g, dtype=DTYPE) + 0.05
        assert float(layers.kl_diag_gaussian(pm, pv, qm, qv)) >= 0.0


def test_kl_matches_monte_carlo_log_ratio():
    """Closed form vs E_p[log p - log q] over 1e6 reparameterized draws."""
    g = gen(26)
    rng = np.random.default_rng(27)
    for _ in range(10):
        pm = torch.tensor(rng.normal(size=2), dtype=DTYPE)
        qm = torch.tensor(rng.normal(size=2), dtype=DTYPE)
        pv = torch.tensor(rng.uniform(0.3, 2.0, size=2), dtype=DTYPE)
        qv = torch.tensor(rng.uniform(0.3, 2.0, size=2), dtype=DTYPE)
        noise = torch.randn(1_000_000, 2, generator=g, dtype=DTYPE)
        draws = pm + pv.sqrt() * noise
        log_ratio = layers.gaussian_log_likelihood(draws, pm, pv) - \
            layers.gaussian_log_likelihood(draws, qm, qv)
        mc = float(log_ratio.mean())
        closed = float(layers.kl_diag_gaussian(pm, pv, qm, qv))
        assert mc == pytest.approx(closed, rel=0.02, abs=0.01)


def test_gaussian_log_likelihood_at_mode():
    val = layers.gaussian_log_likelihood(
        torch.zeros(1, dtype=DTYPE), torch.zeros(1, dtype=DTYPE), torch.ones(1, dtype=DTYPE)
    )
    assert float(val) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_gaussian_log_likelihood_monotone_in_distance():
    mean = torch.zeros(1, dtype=DTYPE)
    var = torch.full((1,), 0.7, dtype=DTYPE)
    vals = [
        float(layers.gaussian_log_likelihood(torch.tensor([x], dtype=DTYPE), mean, var))
        for x in (0.0, 0.5, 1.0, 2.0)
    ]
    assert vals == sorted(vals, reverse=True)


def test_gaussian_density_integrates_to_one():
    mean = torch.tensor([0.3], dtype=DTYPE)
    var = torch.tensor([1.4], dtype=DTYPE)
    grid = torch.linspace(-12, 12, 20_001, dtype=DTYPE).unsqueeze(1)
    dens = torch.exp(layers.gaussian_log_likelihood(grid, mean, var))
    integral = float(torch.trapezoid(dens.squeeze(), grid.squeeze()))
    assert integral == pytest.approx(1.0, abs=1e-3)


@given(
    st.floats(-3, 3), st.floats(0.1, 3), st.floats(-3, 3), st.floats(0.1, 3)
)
@settings(max_examples=80, deadline=None)
def test_kl_nonnegative_property(pm, pv, qm, qv):
    kl = float(layers.kl_diag_gaussian(
        torch.tensor([pm], dtype=DTYPE), torch.tensor([pv], dtype=DTYPE),
        torch.tensor([qm], dtype=DTYPE), torch.tensor([qv], dtype=DTYPE),
    ))
    assert kl >= -1e-12


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_roundtrip_bit_exact(tmp_path):
    stack = layers.DenseStack([3, 4, 2], ["relu", "identity"], gen(28))
    path = str(tmp_path / "ckpt.npz")
    layers.save_checkpoint(path, stack, metadata={"note": "fixture"})
    arrays, metadata = layers.load_checkpoint(path)
    assert metadata == {"note": "fixture"}
    clone = layers.DenseStack([3, 4, 2], ["relu", "identity"], gen(999))
    layers.restore_module(clone, arrays)
    for a, b in zip(stack.parameters(), clone.parameters()):
        assert torch.equal(a, b)
