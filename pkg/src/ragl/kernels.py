"""Hot numeric kernels for the cosine graph operator.

Every kernel has a numba implementation and a pure-numpy one. The numba path
is used when numba imports cleanly and ``RAGL_BACKEND`` is not ``numpy``.
Set ``RAGL_BACKEND=numpy`` (or ``RAGL_DISABLE_NUMBA=1``) to force the
fallback; ``use_backend`` switches temporarily inside one process, which is
what the backend benchmark does.

All kernels take ``h`` as a 3-D array ``[batch, nodes, features]`` and the
gated embedding ``e`` as ``[nodes, k]``.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

DEGREE_EPS = 1e-8


def _env_backend() -> str:
    if os.environ.get("RAGL_DISABLE_NUMBA", "").lower() in ("1", "true", "yes"):
        return "numpy"
    requested = (os.environ.get("RAGL_BACKEND") or "numba").lower()
    if requested not in ("numba", "numpy"):
        raise ValueError(f"RAGL_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and numba is None:
        return "numpy"
    return requested


_BACKEND = _env_backend()


def backend() -> str:
    return _BACKEND


def numba_available() -> bool:
    return numba is not None


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route kernel calls to ``name`` ('numba' or 'numpy')."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    previous = _BACKEND
    _BACKEND = name
    try:
        yield
    finally:
        _BACKEND = previous


# ---------------------------------------------------------------- numpy path

def nodes_first(h):
    """[B, N, d] -> [N, B*d] so one GEMM covers the whole batch."""
    b, n, d = h.shape
    return h.transpose(1, 0, 2).reshape(n, b * d)


def batch_first(x, b):
    """Inverse of ``nodes_first``."""
    n = x.shape[0]
    return x.reshape(n, b, -1).transpose(1, 0, 2)


def _eco_numpy(e, h, eps):
    colsum = e.sum(axis=0)
    deg = np.maximum(e @ colsum, eps)
    m = e.T @ nodes_first(h)  # [k, B*d]
    out = batch_first((e @ m) / deg[:, None], h.shape[0])
    return np.ascontiguousarray(out), deg


def _explicit_numpy(e, h, eps):
    s = e @ e.T
    deg = np.maximum(s.sum(axis=1), eps)
    a = s / deg[:, None]
    return a @ h, deg


# ---------------------------------------------------------------- numba path

if numba is not None:

    @numba.njit(cache=True, nogil=True, fastmath=True)
    def _eco_numba(e, h, eps):
        n_batch, n, d = h.shape
        k = e.shape[1]
        colsum = np.zeros(k)
        for i in range(n):
            for a in range(k):
                colsum[a] += e[i, a]
        deg = np.empty(n)
        for i in range(n):
            acc = 0.0
            for a in range(k):
                acc += e[i, a] * colsum[a]
            deg[i] = acc if acc > eps else eps
        out = np.empty_like(h)
        m = np.empty((k, d))
        for b in range(n_batch):
            m[:, :] = 0.0
            for i in range(n):
                for a in range(k):
                    w = e[i, a]
                    if w != 0.0:
                        for j in range(d):
                            m[a, j] += w * h[b, i, j]
            for i in range(n):
                inv = 1.0 / deg[i]
                for j in range(d):
                    out[b, i, j] = 0.0
                for a in range(k):
                    w = e[i, a]
                    if w != 0.0:
                        for j in range(d):
                            out[b, i, j] += w * m[a, j]
                for j in range(d):
                    out[b, i, j] *= inv
        return out, deg

    @numba.njit(cache=True, nogil=True, fastmath=True)
    def _explicit_numba(e, h, eps):
        # one similarity row at a time; still quadratic in nodes
        n_batch, n, d = h.shape
        k = e.shape[1]
        out = np.zeros_like(h)
        deg = np.empty(n)
        row = np.empty(n)
        for i in range(n):
            total = 0.0
            for j in range(n):
                acc = 0.0
                for a in range(k):
                    acc += e[i, a] * e[j, a]
                row[j] = acc
                total += acc
            deg[i] = total if total > eps else eps
            inv = 1.0 / deg[i]
            for b in range(n_batch):
                for j in range(n):
                    w = row[j] * inv
                    if w != 0.0:
                        for c in range(d):
                            out[b, i, c] += w * h[b, j, c]
        return out, deg


def _as3d(h):
    h = np.asarray(h)
    if h.ndim == 2:
        return h[None], True
    if h.ndim != 3:
        raise ValueError(f"features must be 2-D or 3-D, got shape {h.shape}")
    return h, False


def _check(e, h):
    if e.ndim != 2:
        raise ValueError(f"embedding must be 2-D, got shape {e.shape}")
    if h.shape[-2] != e.shape[0]:
        raise ValueError(
            f"feature rows ({h.shape[-2]}) must equal embedding rows ({e.shape[0]})"
        )


def eco_aggregate(e, h, eps=DEGREE_EPS, *, return_degree=False):
    """Row-normalised cosine aggregation ``D^-1 E (E^T h)`` without an N x N matrix."""
    e = np.ascontiguousarray(e)
    h3, squeeze = _as3d(h)
    _check(e, h3)
    if e.dtype != h3.dtype:
        e = e.astype(h3.dtype)
    if _BACKEND == "numba":
        out, deg = _eco_numba(e, np.ascontiguousarray(h3), eps)
    else:
        out, deg = _eco_numpy(e, h3, eps)
    if squeeze:
        out = out[0]
    return (out, deg) if return_degree else out


def explicit_aggregate(e, h, eps=DEGREE_EPS, *, return_degree=False):
    """Quadratic reference: build ``S = E E^T``, normalise rows, multiply."""
    e = np.ascontiguousarray(e)
    h3, squeeze = _as3d(h)
    _check(e, h3)
    if e.dtype != h3.dtype:
        e = e.astype(h3.dtype)
    if _BACKEND == "numba":
        out, deg = _explicit_numba(e, np.ascontiguousarray(h3), eps)
    else:
        out, deg = _explicit_numpy(e, h3, eps)
    if squeeze:
        out = out[0]
    return (out, deg) if return_degree else out
