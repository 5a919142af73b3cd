"""Stochastic Shared Embedding (SSE) for the node-embedding table."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, take_rows

TRAINING = "training"
EVALUATION = "evaluation"


class SseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SseConfig:
    p: float = 0.1
    seed: int = 0
    mode: str = TRAINING

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise SseConfigError(f"replacement probability must lie in [0, 1], got {self.p}")
        if self.mode not in (TRAINING, EVALUATION):
            raise SseConfigError(f"mode must be {TRAINING!r} or {EVALUATION!r}, got {self.mode!r}")


@dataclass
class SseDraw:
    """Realised randomness of one perturbation."""

    mask: np.ndarray  # bool [N]
    replacement: np.ndarray  # int [N], r(i) drawn uniformly from all N rows
    source: np.ndarray  # int [N], row actually used for output row i

    @classmethod
    def identity(cls, n):
        idx = np.arange(n)
        return cls(np.zeros(n, dtype=bool), idx.copy(), idx)

    @classmethod
    def from_source(cls, source):
        source = np.asarray(source, dtype=np.intp)
        n = source.size
        return cls(source != np.arange(n), source.copy(), source)


def draw_sse(n, p, rng):
    """Sample the Bernoulli mask and uniform replacement indices for ``n`` rows."""
    mask = rng.random(n) < p
    replacement = rng.integers(0, n, size=n)
    source = np.where(mask, replacement, np.arange(n))
    return SseDraw(mask, replacement, source)


def sse_perturb(e_node, cfg: SseConfig, rng=None):
    """Replace each row with a uniformly chosen row with probability ``cfg.p``.

    Returns ``(perturbed, draw)``. ``e_node`` may be an array or a Tensor; for
    a Tensor the result is differentiable and gradients land on the source
    rows. Evaluation mode returns the input untouched.
    """
    n = e_node.shape[0]
    if n < 1:
        raise SseConfigError("need at least one embedding row")
    if cfg.mode == EVALUATION:
        return e_node, SseDraw.identity(n)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    draw = draw_sse(n, cfg.p, rng)
    return apply_draw(e_node, draw), draw


def apply_draw(e_node, draw: SseDraw):
    if isinstance(e_node, Tensor):
        return take_rows(e_node, draw.source)
    return np.asarray(e_node)[draw.source]


def sse_expectation(e_node, p):
    """Closed-form mean of the perturbed table: ``p * colmean + (1 - p) * e_i``."""
    e = np.asarray(e_node.data if isinstance(e_node, Tensor) else e_node, dtype=np.float64)
    return p * e.mean(axis=0, keepdims=True) + (1.0 - p) * e


__all__ = [
    "EVALUATION",
    "TRAINING",
    "SseConfig",
    "SseConfigError",
    "SseDraw",
    "apply_draw",
    "draw_sse",
    "sse_expectation",
    "sse_perturb",
]
