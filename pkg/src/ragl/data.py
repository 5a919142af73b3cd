"""Series I/O, chronological splits, sliding windows, scaling, synthetic data."""
from __future__ import annotations

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .embedding import TimeIndex, steps_per_day, time_indices

log = logging.getLogger(__name__)

MAGIC = b"RAGL"
VERSION = 1
_HEADER = struct.Struct("<4sIIQIIq")  # magic, version, N, steps, C, interval, start


class SeriesFormatError(ValueError):
    pass


class BadMagicError(SeriesFormatError):
    pass


class TruncatedFileError(SeriesFormatError):
    pass


class NonFiniteDataError(SeriesFormatError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass
class TrafficSeries:
    values: np.ndarray  # [steps, N, C]
    start_timestamp: int = 0
    interval_seconds: int = 900
    distances: np.ndarray | None = None  # [N, N]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DataConfigError(f"values must be [steps, N, C], got {self.values.shape}")
        steps_per_day(self.interval_seconds)
        if self.distances is not None:
            self.distances = np.asarray(self.distances, dtype=np.float64)
            n = self.n_nodes
            if self.distances.shape != (n, n):
                raise DataConfigError(f"distances must be {(n, n)}, got {self.distances.shape}")

    @property
    def steps(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def timestamps(self):
        return self.start_timestamp + self.interval_seconds * np.arange(self.steps, dtype=np.int64)


# ---------------------------------------------------------------- binary format

def encode_series(series: TrafficSeries) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, series.n_nodes, series.steps, series.channels,
                          series.interval_seconds, int(series.start_timestamp))
    payload = np.ascontiguousarray(series.values, dtype="<f4").tobytes()
    if series.distances is None:
        tail = struct.pack("<B", 0)
    else:
        tail = struct.pack("<B", 1) + np.ascontiguousarray(series.distances, dtype="<f4").tobytes()
    return header + payload + tail


def decode_series(blob: bytes) -> TrafficSeries:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("missing RAGL magic header")
    if len(blob) < _HEADER.size:
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(blob)}")
    _, version, n, steps, c, interval, start = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise SeriesFormatError(f"unsupported series format version {version}")
    pos = _HEADER.size
    count = steps * n * c
    need = pos + 4 * count + 1
    if len(blob) < need:
        raise TruncatedFileError(f"expected at least {need} bytes for payload, got {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(steps, n, c)
    pos += 4 * count
    flag = blob[pos]
    pos += 1
    distances = None
    if flag == 1:
        need = pos + 4 * n * n
        if len(blob) < need:
            raise TruncatedFileError(f"expected {need} bytes including distance block, got {len(blob)}")
        distances = np.frombuffer(blob, dtype="<f4", count=n * n, offset=pos).reshape(n, n)
        pos += 4 * n * n
    elif flag != 0:
        raise SeriesFormatError(f"bad distance-block flag {flag}")
    if pos != len(blob):
        raise SeriesFormatError(f"{len(blob) - pos} unexpected trailing bytes")
    if not np.all(np.isfinite(values)):
        raise NonFiniteDataError("series contains NaN or Inf values")
    if distances is not None and not np.all(np.isfinite(distances)):
        raise NonFiniteDataError("distance block contains NaN or Inf values")
    return TrafficSeries(values.astype(np.float64), start, interval,
                         None if distances is None else distances.astype(np.float64))


def load_series(path) -> TrafficSeries:
    with open(path, "rb") as fh:
        return decode_series(fh.read())


def save_series(series: TrafficSeries, path):
    blob = encode_series(series)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_text_series(path) -> TrafficSeries:
    """Small-fixture text format: ``N steps C interval start`` then one row per step."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 5:
            raise SeriesFormatError("text header must be 'N steps C interval start'")
        n, steps, c, interval, start = (int(v) for v in head)
        rows = np.loadtxt(fh, ndmin=2)
    if rows.shape != (steps, n * c):
        raise SeriesFormatError(f"expected {steps} rows of {n * c} values, got {rows.shape}")
    if not np.all(np.isfinite(rows)):
        raise NonFiniteDataError("series contains NaN or Inf values")
    return TrafficSeries(rows.reshape(steps, n, c), start, interval)


def save_text_series(series: TrafficSeries, path):
    with open(path, "w") as fh:
        fh.write(f"{series.n_nodes} {series.steps} {series.channels} "
                 f"{series.interval_seconds} {series.start_timestamp}\n")
        np.savetxt(fh, series.values.reshape(series.steps, -1), fmt="%.9g")


def read_series(path) -> TrafficSeries:
    with open(path, "rb") as fh:
        lead = fh.read(4)
    return load_series(path) if lead == MAGIC else load_text_series(path)


# ---------------------------------------------------------------- windows

@dataclass
class WindowSample:
    input: np.ndarray  # [N, T, C]
    target: np.ndarray  # [N, T', C]
    time_index: TimeIndex


@dataclass
class Batch:
    inputs: np.ndarray  # [B, N, T, C]
    targets: np.ndarray  # [B, N, T', C]
    tod: np.ndarray
    dow: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class WindowSet:
    """Stride-1 windows over ``[begin, end)`` of a series, stored as offsets.

    ``source`` feeds model inputs (possibly normalised); ``target_source``
    always holds raw values.
    """

    source: np.ndarray
    target_source: np.ndarray
    starts: np.ndarray  # first input step of each window
    horizon_in: int
    horizon_out: int
    start_timestamp: int
    interval_seconds: int

    def __len__(self):
        return len(self.starts)

    def target_steps(self, k):
        s = self.starts[k] + self.horizon_in
        return np.arange(s, s + self.horizon_out)

    def batch(self, idx) -> Batch:
        starts = self.starts[np.asarray(idx)]
        t_in = starts[:, None] + np.arange(self.horizon_in)
        t_out = starts[:, None] + self.horizon_in + np.arange(self.horizon_out)
        inputs = self.source[t_in].transpose(0, 2, 1, 3)
        targets = self.target_source[t_out].transpose(0, 2, 1, 3)
        last = self.start_timestamp + self.interval_seconds * (starts + self.horizon_in - 1)
        tod, dow = time_indices(last, self.interval_seconds)
        return Batch(np.ascontiguousarray(inputs), np.ascontiguousarray(targets), tod, dow)

    def __getitem__(self, k) -> WindowSample:
        b = self.batch([k])
        return WindowSample(b.inputs[0], b.targets[0], TimeIndex(int(b.tod[0]), int(b.dow[0])))

    def all(self) -> Batch:
        return self.batch(np.arange(len(self)))

    def iter_batches(self, batch_size, order=None):
        order = np.arange(len(self)) if order is None else order
        for lo in range(0, len(order), batch_size):
            yield self.batch(order[lo:lo + batch_size])

    def with_source(self, source):
        return WindowSet(source, self.target_source, self.starts, self.horizon_in,
                         self.horizon_out, self.start_timestamp, self.interval_seconds)


@dataclass
class Splits:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    bounds: tuple = field(default=())  # (train_end, val_end, steps)

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def split_steps(steps, ratios=(0.6, 0.2, 0.2)):
    """Step counts of each chronological split."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataConfigError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    n_train = int(round(ratios[0] * steps))
    n_val = int(round(ratios[1] * steps))
    n_val = min(n_val, steps - n_train)
    return n_train, n_val, steps - n_train - n_val


def window_count(split_len, horizon_in, horizon_out):
    return max(split_len - horizon_in - horizon_out + 1, 0)


def split_and_window(series: TrafficSeries, ratios=(0.6, 0.2, 0.2), horizon_in=12,
                     horizon_out=12) -> Splits:
    """Chronological split on raw steps, then stride-1 windows inside each split.

    Only the training split must hold a window; shorter later splits are left
    empty (with a warning).
    """
    sizes = split_steps(series.steps, ratios)
    sets = []
    begin = 0
    for ratio, size in zip(ratios, sizes):
        count = window_count(size, horizon_in, horizon_out)
        if ratio > 0 and count < 1:
            if not sets:
                raise DataConfigError(
                    f"training split of {size} steps cannot hold one window of "
                    f"{horizon_in}+{horizon_out} steps"
                )
            log.warning("split of %d steps holds no %d+%d window; it stays empty",
                        size, horizon_in, horizon_out)
        starts = begin + np.arange(count)
        sets.append(WindowSet(series.values, series.values, starts, horizon_in, horizon_out,
                              series.start_timestamp, series.interval_seconds))
        begin += size
    return Splits(*sets, bounds=(sizes[0], sizes[0] + sizes[1], series.steps))


# ---------------------------------------------------------------- scaling

@dataclass
class NormStats:
    mean: np.ndarray  # [C]
    std: np.ndarray  # [C]

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, x):
        return x * self.std + self.mean


def fit_norm_stats(train: WindowSet) -> NormStats:
    """Per-channel mean/std over every step seen by a training input window."""
    if len(train) == 0:
        raise DataConfigError("training split has no windows")
    lo = int(train.starts[0])
    hi = int(train.starts[-1]) + train.horizon_in
    block = train.target_source[lo:hi]
    mean = block.mean(axis=(0, 1))
    std = block.std(axis=(0, 1))
    flat = std <= 1e-12
    if np.any(flat):
        log.warning("zero-variance channel(s) %s; using std = 1", np.flatnonzero(flat).tolist())
        std = np.where(flat, 1.0, std)
    return NormStats(mean, std)


def normalize(splits: Splits):
    """Z-score model inputs with training statistics; targets stay raw."""
    stats = fit_norm_stats(splits.train)
    scaled = stats.apply(splits.train.target_source)
    out = Splits(*(ws.with_source(scaled) for ws in splits), bounds=splits.bounds)
    return out, stats


# ---------------------------------------------------------------- geography

def geo_adjacency(distances, sigma=None, eps_threshold=0.1):
    """Thresholded Gaussian kernel ``exp(-r^2 / sigma^2)``, row-normalised, as CSR.

    ``sigma`` defaults to the standard deviation of the finite distances.
    Rows left empty by the threshold get a self-loop.
    """
    r = np.asarray(distances, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise DataConfigError(f"distance matrix must be square, got {r.shape}")
    if np.any(r[np.isfinite(r)] < 0):
        raise DataConfigError("distances must be non-negative")
    if sigma is None:
        sigma = float(np.std(r[np.isfinite(r)]))
    if sigma <= 0:
        raise DataConfigError("sigma must be positive")
    with np.errstate(over="ignore"):
        w = np.exp(-np.square(r) / sigma**2)
    w[~np.isfinite(r)] = 0.0
    w[w < eps_threshold] = 0.0
    empty = w.sum(axis=1) == 0
    w[empty, empty] = 1.0  # diagonal entries of isolated rows
    w /= w.sum(axis=1, keepdims=True)
    return sp.csr_matrix(w)


def gaussian_kernel(distances, sigma=None, eps_threshold=0.1):
    """Raw thresholded kernel (no normalisation), dense."""
    r = np.asarray(distances, dtype=np.float64)
    if sigma is None:
        sigma = float(np.std(r))
    w = np.exp(-np.square(r) / sigma**2)
    w[w < eps_threshold] = 0.0
    return w


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthSpec:
    n_nodes: int = 20
    steps: int = 5000
    interval_seconds: int = 900
    seed: int = 0
    channels: int = 1
    start_timestamp: int = 1546300800  # 2019-01-01 00:00 UTC
    daily: bool = True
    weekly_amplitude: float = 0.2
    noise_std: float = 0.05  # relative to each node's daily amplitude
    noise_ar: float = 0.9
    coupling: float = 0.5
    lag: int = 0  # steps before a neighbour's flow reaches a node
    radius: float = 0.35  # geometric-graph radius in unit-square coordinates
    extent_km: float = 50.0


def synth_generate(spec: SynthSpec | None = None, **overrides) -> TrafficSeries:
    """Deterministic flow-like series with ground-truth road distances.

    Each node carries a two-harmonic daily profile with its own level, amplitude
    and phase, an optional weekly modulation, and AR(1) noise. The sum is mixed
    across neighbours of a random geometric graph with strength ``coupling``;
    with ``lag > 0`` a node sees its neighbours' values from ``lag`` steps back.
    """
    if spec is None:
        spec = SynthSpec(**overrides)
    elif overrides:
        spec = SynthSpec(**{**spec.__dict__, **overrides})
    n, steps, c = spec.n_nodes, spec.steps, spec.channels
    if n < 2:
        raise DataConfigError("synthetic series needs at least two nodes")
    rng = np.random.default_rng(spec.seed)
    per_day = steps_per_day(spec.interval_seconds)

    pos = rng.uniform(0.0, 1.0, size=(n, 2))
    gap = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    distances = gap * spec.extent_km
    link = (gap <= spec.radius) & ~np.eye(n, dtype=bool)
    deg = link.sum(axis=1, keepdims=True)
    mix = np.where(deg > 0, link / np.maximum(deg, 1), 0.0)

    level = rng.uniform(100.0, 300.0, size=(n, c))
    amp = rng.uniform(30.0, 80.0, size=(n, c))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, c))
    ratio = rng.uniform(0.2, 0.6, size=(n, c))

    step_idx = np.arange(steps)
    day_angle = 2 * np.pi * ((step_idx + (spec.start_timestamp // spec.interval_seconds)) % per_day) / per_day
    day_angle = day_angle[:, None, None]
    signal = np.broadcast_to(level, (steps, n, c)).copy()
    if spec.daily:
        signal += amp * (np.sin(day_angle + phase) + ratio * np.sin(2 * day_angle + 2 * phase))
    if spec.weekly_amplitude:
        abs_step = step_idx + spec.start_timestamp // spec.interval_seconds
        week_angle = 2 * np.pi * (abs_step % (7 * per_day)) / (7 * per_day)
        signal *= 1.0 + spec.weekly_amplitude * np.cos(week_angle)[:, None, None]

    if spec.noise_std > 0:
        shocks = rng.standard_normal((steps, n, c)) * (spec.noise_std * amp)
        # stationary AR(1) with marginal std noise_std * amp
        noise = np.empty_like(shocks)
        noise[0] = shocks[0]
        keep = np.sqrt(1.0 - spec.noise_ar**2)
        for t in range(1, steps):
            noise[t] = spec.noise_ar * noise[t - 1] + keep * shocks[t]
        signal += noise

    if spec.lag < 0:
        raise DataConfigError("lag must be non-negative")
    if spec.coupling:
        mixed = np.einsum("ij,tjc->tic", mix, signal)
        if spec.lag:
            mixed[spec.lag:] = mixed[:-spec.lag].copy()
            mixed[:spec.lag] = mixed[spec.lag]
        signal = (1.0 - spec.coupling) * signal + spec.coupling * mixed
    return TrafficSeries(signal, spec.start_timestamp, spec.interval_seconds, distances)
