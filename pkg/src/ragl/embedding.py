"""Input embedding: series projection, calendar lookups, node table, concat."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    matmul,
    parameter,
    reshape,
    take_rows,
)

SECONDS_PER_DAY = 86400
DAYS_PER_WEEK = 7


def steps_per_day(interval_seconds):
    if interval_seconds <= 0 or SECONDS_PER_DAY % interval_seconds:
        raise ValueError(f"interval {interval_seconds}s does not divide a day")
    return SECONDS_PER_DAY // interval_seconds


@dataclass(frozen=True)
class TimeIndex:
    tod: int
    dow: int

    @classmethod
    def from_timestamp(cls, timestamp, interval_seconds):
        """Calendar slot of a UTC epoch timestamp; Monday is day 0."""
        ts = int(timestamp)
        days, seconds = divmod(ts, SECONDS_PER_DAY)
        # 1970-01-01 was a Thursday
        return cls(seconds // interval_seconds, (days + 3) % DAYS_PER_WEEK)


def time_indices(timestamps, interval_seconds):
    ts = np.asarray(timestamps, dtype=np.int64)
    days, seconds = np.divmod(ts, SECONDS_PER_DAY)
    return seconds // interval_seconds, (days + 3) % DAYS_PER_WEEK


@dataclass
class EmbeddingTables:
    w_in: Tensor  # [(T*C), d_in]
    b_in: Tensor  # [d_in]
    tid: Tensor  # [T_d, d_tid]
    diw: Tensor  # [7, d_diw]
    node: Tensor  # [N, d_node]

    @classmethod
    def init(cls, rng, *, n_nodes, horizon_in, channels, d_in, d_tid, d_diw, d_node,
             steps_per_day):
        fan_in = horizon_in * channels
        bound = 1.0 / np.sqrt(fan_in)

        def table(rows, width):
            return rng.uniform(-0.5, 0.5, size=(rows, width)) / np.sqrt(width)

        return cls(
            w_in=parameter(rng.uniform(-bound, bound, size=(fan_in, d_in)), "embed.w_in"),
            b_in=parameter(rng.uniform(-bound, bound, size=d_in), "embed.b_in"),
            tid=parameter(table(steps_per_day, d_tid), "embed.tid"),
            diw=parameter(table(DAYS_PER_WEEK, d_diw), "embed.diw"),
            node=parameter(table(n_nodes, d_node), "embed.node"),
        )

    def named(self):
        return {
            "embed.w_in": self.w_in,
            "embed.b_in": self.b_in,
            "embed.tid": self.tid,
            "embed.diw": self.diw,
            "embed.node": self.node,
        }


def embed_inputs(window, tables: EmbeddingTables):
    """Affine map of each node's flattened history.

    ``window`` is [N, T, C] or [B, N, T, C]; the T x C block is flattened
    time-major (time index varies slowest).
    """
    window = as_tensor(window)
    if window.ndim not in (3, 4):
        raise DimensionError(f"window must be [N,T,C] or [B,N,T,C], got {window.shape}")
    flat_width = window.shape[-2] * window.shape[-1]
    if flat_width != tables.w_in.shape[0]:
        raise DimensionError(
            f"window carries {flat_width} values per node, projection expects {tables.w_in.shape[0]}"
        )
    flat = reshape(window, window.shape[:-2] + (flat_width,))
    return add(matmul(flat, tables.w_in), tables.b_in)


def time_lookup(tod, dow, tables: EmbeddingTables):
    """Rows of the time-of-day and day-of-week tables.

    Scalars give vectors; index arrays (one per batch element) give stacks.
    """
    tod_arr, dow_arr = np.asarray(tod), np.asarray(dow)
    if np.any(tod_arr < 0) or np.any(tod_arr >= tables.tid.shape[0]):
        raise IndexError(f"time-of-day index out of range [0, {tables.tid.shape[0]})")
    if np.any(dow_arr < 0) or np.any(dow_arr >= DAYS_PER_WEEK):
        raise IndexError("day-of-week index out of range [0, 7)")
    return take_rows(tables.tid, tod_arr), take_rows(tables.diw, dow_arr)


def assemble_state(e_in, e_tid, e_diw, e_node_used):
    """Concatenate ``[input | time-of-day | day-of-week | node]`` per node.

    ``e_in`` is [N, d_in] or [B, N, d_in]. Time vectors are [d] or [B, d] and
    are broadcast over nodes; the node table is [N, d_node] (broadcast over B).
    """
    e_in = as_tensor(e_in)
    lead = e_in.shape[:-1]
    parts = [e_in]
    for vec in (as_tensor(e_tid), as_tensor(e_diw)):
        if vec.ndim == 1:
            expanded = vec
        elif vec.ndim == 2 and e_in.ndim == 3 and vec.shape[0] == lead[0]:
            expanded = reshape(vec, (vec.shape[0], 1, vec.shape[1]))
        else:
            raise DimensionError(f"time embedding {vec.shape} does not fit state {e_in.shape}")
        parts.append(broadcast_to(expanded, lead + (vec.shape[-1],)))
    node = as_tensor(e_node_used)
    if node.shape[0] != lead[-1]:
        raise DimensionError(f"node table has {node.shape[0]} rows, state has {lead[-1]} nodes")
    parts.append(broadcast_to(node, lead + (node.shape[-1],)))
    return concat(parts, axis=-1)
