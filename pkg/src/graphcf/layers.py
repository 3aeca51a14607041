"""Differentiable building blocks: dense stacks, graph convolution, attention,
diagonal Gaussians and parameter checkpointing.

Everything runs in double precision on CPU; gradients come from reverse-mode
autodiff and are cross-checked against finite differences in the test suite.
"""

from __future__ import annotations

import json

import numpy as np
import torch
from torch import nn

from graphcf.errors import DataError

DTYPE = torch.float64
LOGVAR_MIN = -15.0
LOGVAR_MAX = 15.0
VAR_FLOOR = 1e-12

_ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": torch.relu,
    "tanh": torch.tanh,
}


def apply_activation(name: str, x: torch.Tensor) -> torch.Tensor:
    try:
        return _ACTIVATIONS[name](x)
    except KeyError:
        raise DataError(f"unknown activation {name!r}") from None


def _init_linear(n_in: int, n_out: int, generator: torch.Generator):
    scale = (2.0 / (n_in + n_out)) ** 0.5
    w = torch.randn(n_in, n_out, generator=generator, dtype=DTYPE) * scale
    b = torch.zeros(n_out, dtype=DTYPE)
    return nn.Parameter(w), nn.Parameter(b)


class DenseStack(nn.Module):
    """Affine layers with per-layer activations (identity | relu | tanh)."""

    def __init__(self, dims, activations, generator: torch.Generator):
        super().__init__()
        if len(activations) != len(dims) - 1:
            raise DataError("need one activation per layer")
        self.dims = list(dims)
        self.activations = list(activations)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            w, b = _init_linear(n_in, n_out, generator)
            self.weights.append(w)
            self.biases.append(b)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.dims[0]:
            raise DataError(f"input width {x.shape[-1]} != expected {self.dims[0]}")
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = apply_activation(act, x @ w + b)
        return x


class DiagGaussianHead(nn.Module):
    """Dense stack producing a diagonal Gaussian (mean, variance)."""

    def __init__(self, dims, activations, generator: torch.Generator):
        super().__init__()
        self.mean_stack = DenseStack(dims, activations, generator)
        self.logvar_stack = DenseStack(dims, activations, generator)

    def forward(self, x: torch.Tensor):
        mean = self.mean_stack(x)
        logvar = torch.clamp(self.logvar_stack(x), LOGVAR_MIN, LOGVAR_MAX)
        return mean, torch.exp(logvar)


def normalize_adjacency(adjacency: torch.Tensor, self_loops: bool = True) -> torch.Tensor:
    """Row-mean normalization over self-augmented neighborhoods."""
    a = adjacency.to(DTYPE)
    if self_loops:
        a = torch.clamp(a + torch.eye(a.shape[0], dtype=DTYPE), max=1.0)
    degree = a.sum(dim=1, keepdim=True)
    if torch.any(degree == 0):
        raise DataError("isolated node with self-loops disabled")
    return a / degree


class GraphConvStack(nn.Module):
    """Graph convolution layers: row-normalized adjacency x features x weights."""

    def __init__(self, dims, activations, generator: torch.Generator, self_loops: bool = True):
        super().__init__()
        self.stack = DenseStack(dims, activations, generator)
        self.self_loops = self_loops

    def forward(self, node_features: torch.Tensor, adjacency: torch.Tensor) -> torch.Tensor:
        a_norm = normalize_adjacency(adjacency, self.self_loops)
        h = node_features
        for w, b, act in zip(self.stack.weights, self.stack.biases, self.stack.activations):
            h = apply_activation(act, a_norm @ h @ w + b)
        return h


class AttentionAggregator(nn.Module):
    """Per-node attention over the feature dimensions of a key vector.

    Key-dependent mode scores each node embedding against the key; the
    key-independent mode scores node embeddings alone. Scores are
    softmax-normalized over the key's feature dimensions.
    """

    def __init__(self, node_dim: int, key_dim: int, generator: torch.Generator,
                 mode: str = "key-dependent", hidden: int = 0):
        super().__init__()
        if mode not in ("key-dependent", "key-independent"):
            raise DataError(f"unknown attention mode {mode!r}")
        self.mode = mode
        in_dim = node_dim + key_dim if mode == "key-dependent" else node_dim
        dims = [in_dim, key_dim] if hidden == 0 else [in_dim, hidden, key_dim]
        acts = ["identity"] if hidden == 0 else ["relu", "identity"]
        self.stack = DenseStack(dims, acts, generator)

    def scores(self, node_embeddings: torch.Tensor, key: torch.Tensor) -> torch.Tensor:
        """(n, node_dim) embeddings, (batch, key_dim) key -> (batch, n, key_dim) weights."""
        n = node_embeddings.shape[0]
        batch = key.shape[0]
        if self.mode == "key-dependent":
            q = node_embeddings.unsqueeze(0).expand(batch, n, -1)
            k = key.unsqueeze(1).expand(batch, n, -1)
            logits = self.stack(torch.cat([q, k], dim=-1))
        else:
            logits = self.stack(node_embeddings).unsqueeze(0).expand(batch, n, -1)
        return torch.softmax(logits, dim=-1)


def reparam_sample(mean: torch.Tensor, variance: torch.Tensor, noise=None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """mean + sqrt(variance) * standard-normal noise; differentiable in both."""
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.sqrt(torch.clamp(variance, min=VAR_FLOOR)) * noise


def kl_diag_gaussian(p_mean, p_var, q_mean, q_var) -> torch.Tensor:
    """KL[N(p_mean, p_var) || N(q_mean, q_var)], summed over the last dimension."""
    return 0.5 * torch.sum(
        torch.log(q_var / p_var) + (p_var + (p_mean - q_mean) ** 2) / q_var - 1.0,
        dim=-1,
    )


def gaussian_log_likelihood(x, mean, variance) -> torch.Tensor:
    """Sum of per-dimension Gaussian log-densities over the last dimension."""
    return -0.5 * torch.sum(
        torch.log(2 * torch.pi * variance) + (x - mean) ** 2 / variance, dim=-1
    )


# ---------------------------------------------------------------------------
# Checkpoints: a flat npz container mapping parameter names to arrays.
# ---------------------------------------------------------------------------

def save_checkpoint(path, module: nn.Module, metadata: dict | None = None):
    arrays = {name: p.detach().numpy() for name, p in module.state_dict().items()}
    arrays["__metadata__"] = np.frombuffer(
        json.dumps(metadata or {}, sort_keys=True).encode(), dtype=np.uint8
    )
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Return (name -> array dict, metadata dict)."""
    with np.load(path) as blob:
        arrays = {k: blob[k] for k in blob.files if k != "__metadata__"}
        metadata = json.loads(bytes(blob["__metadata__"].tobytes()).decode())
    return arrays, metadata


def restore_module(module: nn.Module, arrays: dict):
    state = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()}
    module.load_state_dict(state)
