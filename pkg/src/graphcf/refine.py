"""Relation-graph refinement: learnable dense edge logits under asymmetric
edge dropout, row-softmax graph convolution and a lasso objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from graphcf import data as gdata
from graphcf.errors import DataError, DivergenceError
from graphcf.layers import DTYPE, DenseStack, apply_activation

NEG_INF = float("-inf")


@dataclass
class RefinementConfig:
    keep_rate_prior: float = 0.9  # 1 - r_l, prior edges kept often
    keep_rate_other: float = 0.1  # 1 - r_h, non-prior edges kept rarely
    lasso_weight: float = 0.01
    threshold: float = 0.3
    epochs: int = 30
    learning_rate: float = 1e-2
    batch_size: int = 64
    hidden_width: int = 64
    seed: int = 0
    penalize_diagonal: bool = False
    diagonal_weight: float = 0.0

    def __post_init__(self):
        r_l, r_h = 1.0 - self.keep_rate_prior, 1.0 - self.keep_rate_other
        if not (0.0 <= r_l <= 1.0 and 0.0 <= r_h <= 1.0):
            raise DataError("dropout rates must lie in [0, 1]")
        if r_l >= r_h:
            raise DataError("prior-edge dropout must be lower than non-edge dropout")
        if not 0.0 < self.threshold < 1.0:
            raise DataError("threshold must lie in (0, 1)")


def prior_with_self_loops(adjacency: np.ndarray) -> np.ndarray:
    """|E - I| + I: the prior adjacency with an all-ones diagonal."""
    eye = np.eye(adjacency.shape[0])
    return (np.abs(adjacency.astype(np.float64) - eye) + eye).clip(max=1.0).astype(np.uint8)


def sample_keep_mask(prior: np.ndarray, r_l: float, r_h: float,
                     generator: torch.Generator) -> torch.Tensor:
    """Sparse binary keep-mask: prior edges kept w.p. 1-r_l, others w.p. 1-r_h.

    The diagonal is always kept so no softmax row is empty.
    """
    prior_t = torch.as_tensor(prior, dtype=DTYPE)
    keep_prob = prior_t * (1.0 - r_l) + (1.0 - prior_t) * (1.0 - r_h)
    kept = torch.rand(prior_t.shape, generator=generator, dtype=DTYPE) < keep_prob
    kept = kept | torch.eye(prior_t.shape[0], dtype=torch.bool)
    return kept.to(DTYPE).to_sparse_coo()


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row softmax over kept entries only; masked entries get exactly zero weight."""
    dense_mask = mask.to_dense() if mask.is_sparse else mask
    filled = torch.where(dense_mask > 0, logits, torch.full_like(logits, NEG_INF))
    return torch.softmax(filled, dim=-1)


def masked_softmax_conv(h: torch.Tensor, logits: torch.Tensor, mask: torch.Tensor,
                        weight: torch.Tensor, bias: torch.Tensor | None = None,
                        activation: str = "identity") -> torch.Tensor:
    """One refinement layer: row-softmax of masked logits, aggregate, map, activate."""
    attn = masked_softmax(logits, mask)
    out = attn @ h if h.dim() == 2 else torch.einsum("ij,bjf->bif", attn, h)
    out = out @ weight
    if bias is not None:
        out = out + bias
    return apply_activation(activation, out)


def build_node_inputs(y_cell: np.ndarray, node_features: np.ndarray,
                      x_cell: np.ndarray) -> np.ndarray:
    """Per-node input rows [Y_(i), features_(i), covariate one-hot]."""
    y_cell = np.asarray(y_cell, dtype=np.float64).reshape(-1, 1)
    n = y_cell.shape[0]
    if node_features.shape[0] != n:
        raise DataError("node feature rows do not match outcome length")
    shared = np.broadcast_to(np.asarray(x_cell, dtype=np.float64), (n, len(x_cell)))
    return np.concatenate([y_cell, node_features, shared], axis=1)


def rescale_weights(logits: torch.Tensor) -> torch.Tensor:
    """Elementwise (1 + exp(-L))^-1, mapping logits into (0, 1)."""
    return torch.sigmoid(logits)


def threshold_graph(weights: np.ndarray, alpha: float) -> np.ndarray:
    """Binary adjacency keeping entries strictly above the threshold."""
    if not 0.0 < alpha < 1.0:
        raise DataError("threshold must lie in (0, 1)")
    return (np.asarray(weights) > alpha).astype(np.uint8)


def refinement_objective(g_output: torch.Tensor, y: torch.Tensor,
                         rescaled: torch.Tensor, lasso_weight: float,
                         diagonal_weight: float = 0.0) -> torch.Tensor:
    """Mean squared reconstruction error plus scale-free L1 edge penalty."""
    recon = torch.mean((g_output - y) ** 2)
    penalty = torch.mean(rescaled)
    loss = recon + lasso_weight * penalty
    if diagonal_weight > 0.0:
        loss = loss + diagonal_weight * torch.mean(torch.diagonal(rescaled))
    return loss


class RefinementNet(nn.Module):
    """Two-layer edge-learning GCN predicting each node's expression."""

    def __init__(self, n_nodes: int, in_dim: int, hidden: int, generator: torch.Generator):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_nodes, n_nodes, dtype=DTYPE))
        stack = DenseStack([in_dim, hidden, 1], ["relu", "identity"], generator)
        self.weights = stack.weights
        self.biases = stack.biases
        self.activations = stack.activations

    def forward(self, node_inputs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = node_inputs
        for w, b, act in zip(self.weights, self.biases, self.activations):
            h = masked_softmax_conv(h, self.logits, mask, w, b, act)
        return h.squeeze(-1)


def refine(dataset: gdata.ExpressionDataset, graph: gdata.RelationGraph,
           config: RefinementConfig, cell_indices=None):
    """Train the edge-learning GCN and emit the refined graph.

    Returns (refined RelationGraph, rescaled dense weight matrix).
    """
    if graph.gene_names != dataset.gene_names:
        raise DataError("dataset and graph gene sets differ")
    n = dataset.n_genes
    prior = prior_with_self_loops(graph.adjacency)
    r_l = 1.0 - config.keep_rate_prior
    r_h = 1.0 - config.keep_rate_other

    cov_matrix = gdata.encode_covariates(dataset)
    cells = np.asarray(cell_indices) if cell_indices is not None else np.arange(dataset.n_cells)
    node_inputs = np.stack(
        [
            build_node_inputs(dataset.outcomes[i], graph.node_features, cov_matrix[i])
            for i in cells
        ]
    )
    inputs = torch.as_tensor(node_inputs, dtype=DTYPE)
    targets = torch.as_tensor(dataset.outcomes[cells], dtype=DTYPE)

    gen = torch.Generator().manual_seed(int(config.seed))
    rng = np.random.default_rng(config.seed)
    net = RefinementNet(n, inputs.shape[-1], config.hidden_width, gen)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    diag_w = config.diagonal_weight if config.penalize_diagonal else 0.0

    for epoch in range(config.epochs):
        perm = rng.permutation(len(cells))
        for start in range(0, len(cells), config.batch_size):
            idx = perm[start : start + config.batch_size]
            mask = sample_keep_mask(prior, r_l, r_h, gen)
            out = net(inputs[idx], mask)
            loss = refinement_objective(
                out, targets[idx], rescale_weights(net.logits),
                config.lasso_weight, diag_w,
            )
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite refinement loss at epoch {epoch + 1}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    rescaled = rescale_weights(net.logits).detach().numpy()
    refined = gdata.RelationGraph(
        node_features=graph.node_features,
        adjacency=threshold_graph(rescaled, config.threshold),
        gene_names=graph.gene_names,
    )
    return refined, rescaled


def write_edge_weights(path, gene_names, weights, top_k: int | None = None):
    """Emit source/target/weight rows, optionally truncated to the top-k entries."""
    n = len(gene_names)
    order = np.dstack(np.unravel_index(np.argsort(-weights, axis=None, kind="stable"), (n, n)))[0]
    if top_k is not None:
        order = order[:top_k]
    with open(path, "w") as fh:
        fh.write("source\ttarget\tweight\n")
        for i, j in order:
            fh.write(f"{gene_names[i]}\t{gene_names[j]}\t{format(float(weights[i, j]), '.17g')}\n")
