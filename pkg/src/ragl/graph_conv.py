"""Adaptive graph convolution: gating, cosine aggregation and its oracles."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kernels
from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    eco_aggregate as _eco_tensor,
    l2_normalize_rows,
    matmul,
    mul,
    relu,
    softmax_rows,
    sparse_matmul,
    transpose,
)

DEGREE_EPS = kernels.DEGREE_EPS
NORM_EPS = 1e-12


class GraphConfigError(ValueError):
    pass


@dataclass
class GatedEmbedding:
    """Row-normalised, non-negative node embedding driving the cosine graph."""

    e_hat: Tensor

    @property
    def n_nodes(self):
        return self.e_hat.shape[0]

    def similarity(self):
        """Dense ``E E^T``; test and inspection use only."""
        e = self.e_hat.data
        return e @ e.T


def _data(x):
    if isinstance(x, GatedEmbedding):
        return x.e_hat.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def gate_embeddings(e_node, w1, w2):
    """``softmax(E W1) * relu(E W2)``, softmax taken over each node's features."""
    e_node, w1, w2 = as_tensor(e_node), as_tensor(w1), as_tensor(w2)
    k = e_node.shape[-1]
    if w1.shape != (k, k) or w2.shape != (k, k):
        raise DimensionError(f"gate weights must be {(k, k)}, got {w1.shape} and {w2.shape}")
    return mul(softmax_rows(matmul(e_node, w1)), relu(matmul(e_node, w2)))


def normalize_gated(e_g, eps=NORM_EPS) -> GatedEmbedding:
    return GatedEmbedding(l2_normalize_rows(as_tensor(e_g), eps))


def eco_aggregate(e_hat, h, eps=DEGREE_EPS):
    """Linear-cost row-stochastic aggregation over the cosine graph."""
    e = e_hat.e_hat if isinstance(e_hat, GatedEmbedding) else as_tensor(e_hat)
    return _eco_tensor(e, h, eps)


def explicit_oracle(e_hat, h, eps=DEGREE_EPS):
    """Materialise ``S``, ``D`` and return ``D^-1 S h`` as a plain array."""
    e = _data(e_hat)
    s = e @ e.T
    deg = np.maximum(s.sum(axis=1), eps)
    return (s / deg[:, None]) @ _data(h)


def explicit_adjacency(e_hat, eps=DEGREE_EPS):
    e = _data(e_hat)
    s = e @ e.T
    return s / np.maximum(s.sum(axis=1), eps)[:, None]


def softmax_adjacency(e_node):
    """Dense ``softmax(relu(E E^T))`` (the conventional adaptive adjacency)."""
    e_node = as_tensor(e_node)
    gram = matmul(e_node, transpose(e_node))
    return softmax_rows(relu(gram))


def propagator(adjacency, eps=DEGREE_EPS):
    """Return ``f(h) -> A h`` for a gated embedding, a dense Tensor, or a sparse matrix."""
    if isinstance(adjacency, GatedEmbedding):
        return lambda h: eco_aggregate(adjacency, h, eps)
    if sp.issparse(adjacency):
        return lambda h: sparse_matmul(adjacency, h)
    dense = as_tensor(adjacency)
    if dense.ndim != 2 or dense.shape[0] != dense.shape[1]:
        raise DimensionError(f"adjacency must be square, got {dense.shape}")
    return lambda h: matmul(dense, h)


def diffusion_convolve(adjacency, h, weights, eps=DEGREE_EPS):
    """``sum_z A^z h W_z`` with ``A^z h`` built by repeated propagation.

    ``weights`` holds Z+1 square matrices; entry 0 multiplies ``h`` itself.
    """
    if len(weights) == 0:
        raise GraphConfigError("diffusion needs at least one weight matrix (Z >= 0)")
    step = propagator(adjacency, eps)
    h = as_tensor(h)
    state = h
    out = matmul(state, weights[0])
    for w in weights[1:]:
        state = step(state)
        out = add(out, matmul(state, w))
    return out
