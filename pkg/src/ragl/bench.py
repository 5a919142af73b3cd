"""Scaling benchmark for the cosine aggregation and weight inspection helpers."""
from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .graph_conv import softmax_adjacency

EXPLICIT_CAP_BYTES = 2 * 1024**3
GATE_TOL = 1e-9


class EquivalenceGateError(AssertionError):
    """The linear and explicit operators disagree; timings would be meaningless."""


@dataclass
class BenchRecord:
    operator: str  # eco | explicit | softmax_adj
    n: int
    d_node: int
    d: int
    repetitions: int
    median_seconds: float
    max_abs_deviation: float | None = None


@dataclass
class BenchResult:
    records: list
    slopes: dict  # operator -> fitted log-log slope
    gate_n: int
    gate_deviation: float
    threads: int
    backend: str
    notes: list = field(default_factory=list)

    def table(self):
        lines = [f"# backend={self.backend} threads={self.threads} "
                 f"gate N={self.gate_n} max|eco-explicit|={self.gate_deviation:.3e}",
                 f"{'operator':<12} {'N':>7} {'d_node':>6} {'d':>5} {'reps':>4} "
                 f"{'median_s':>12} {'max_abs_dev':>12}"]
        for r in self.records:
            dev = "-" if r.max_abs_deviation is None else f"{r.max_abs_deviation:.3e}"
            lines.append(f"{r.operator:<12} {r.n:>7} {r.d_node:>6} {r.d:>5} {r.repetitions:>4} "
                         f"{r.median_seconds:>12.6e} {dev:>12}")
        for op, slope in self.slopes.items():
            lines.append(f"# slope {op} = {slope:.3f}")
        lines.extend(f"# note: {n}" for n in self.notes)
        return "\n".join(lines)


def random_gated(n, d_node, rng, dtype=np.float64):
    """Non-negative embedding with unit rows, like the gated embeddings."""
    e = np.abs(rng.standard_normal((n, d_node)))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    return e.astype(dtype)


def median_time(fn, reps, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def loglog_slope(ns, seconds):
    if len(ns) < 2:
        return float("nan")
    return float(np.polyfit(np.log(ns), np.log(seconds), 1)[0])


def fit_slope(records, operator, n_values=None):
    rows = [r for r in records if r.operator == operator and (n_values is None or r.n in n_values)]
    return loglog_slope([r.n for r in rows], [r.median_seconds for r in rows])


def explicit_feasible(n, cap_bytes=EXPLICIT_CAP_BYTES):
    return n * n * 8 <= cap_bytes


def _limit_threads(threads):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return None
    return threadpool_limits(limits=threads)


def bench_scaling(n_list, d_node=32, d=64, reps=5, *, warmup=2, seed=0, threads=1,
                  explicit_n_max=None, include_softmax=True, gate_n=512,
                  cap_bytes=EXPLICIT_CAP_BYTES, dtype=np.float64) -> BenchResult:
    """Time eco vs explicit aggregation across node counts.

    The numeric equivalence gate at ``gate_n`` nodes runs (in float64) before
    any timing; a failure raises :class:`EquivalenceGateError`.
    """
    if reps < 5:
        raise ValueError("repetitions must be >= 5")
    if any(n < 2 for n in n_list):
        raise ValueError("every N must be >= 2")
    rng = np.random.default_rng(seed)
    limiter = _limit_threads(threads)
    notes = []
    try:
        e = random_gated(gate_n, d_node, rng)
        h = rng.standard_normal((gate_n, d))
        gate_dev = float(np.max(np.abs(kernels.eco_aggregate(e, h) - kernels.explicit_aggregate(e, h))))
        if not gate_dev <= GATE_TOL:
            raise EquivalenceGateError(f"eco and explicit differ by {gate_dev:.3e} at N={gate_n}")
        kernels.eco_aggregate(e.astype(dtype), h.astype(dtype))  # compile for this dtype

        records = []
        for n in n_list:
            e = random_gated(n, d_node, rng, dtype)
            h = rng.standard_normal((n, d)).astype(dtype)
            t_eco = median_time(lambda: kernels.eco_aggregate(e, h), reps, warmup)
            records.append(BenchRecord("eco", n, d_node, d, reps, t_eco))
            explicit_ok = explicit_feasible(n, cap_bytes) and (explicit_n_max is None or n <= explicit_n_max)
            if not explicit_ok:
                notes.append(f"explicit arm skipped at N={n}")
                continue
            eco_out = kernels.eco_aggregate(e, h)
            dev = float(np.max(np.abs(eco_out - kernels.explicit_aggregate(e, h))))
            records[-1].max_abs_deviation = dev
            t_exp = median_time(lambda: kernels.explicit_aggregate(e, h), reps, warmup)
            records.append(BenchRecord("explicit", n, d_node, d, reps, t_exp, dev))
            if include_softmax:
                def softmax_arm():
                    return softmax_adjacency(e).data @ h
                t_sm = median_time(softmax_arm, reps, warmup)
                records.append(BenchRecord("softmax_adj", n, d_node, d, reps, t_sm))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    slopes = {op: fit_slope(records, op) for op in ("eco", "explicit", "softmax_adj")
              if sum(r.operator == op for r in records) >= 2}
    return BenchResult(records, slopes, gate_n, gate_dev, threads, kernels.backend(), notes)


# ---------------------------------------------------------------- weight inspection

@dataclass
class LayerWeightSummary:
    layer: int
    summed: np.ndarray  # sum over diffusion steps
    identity_distance: float  # ||W - I||_F / ||I||_F


def inspect_weights(params):
    """Summed diffusion weights per encoder layer and their distance from identity."""
    out = []
    for i, layer in enumerate(params.layers):
        w = layer.summed_diffusion()
        eye = np.eye(w.shape[0])
        dist = float(np.linalg.norm(w - eye) / np.linalg.norm(eye))
        out.append(LayerWeightSummary(i, w, dist))
    return out


def write_matrix(path, m):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_matrix(path):
    with open(path) as fh:
        rows, cols = (int(v) for v in fh.readline().split())
        data = np.loadtxt(fh, ndmin=2)
    if data.shape != (rows, cols):
        raise ValueError(f"matrix file declares {rows}x{cols}, holds {data.shape}")
    return data
