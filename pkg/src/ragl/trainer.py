"""Training loop, Adam with step decay, forecasting metrics."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import regularization as reg
from .data import NormStats, Splits, WindowSet
from .model import ModelConfig, ParameterSet, denormalize, forward, mae_loss
from .tensor import NonFiniteError

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state: AdamState, lr):
    """One bias-corrected Adam update, in place on ``params`` (name -> Tensor).

    Parameters without an entry in ``grads`` see a zero gradient.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def global_norm(grads):
    """Euclidean norm over all gradients, scaled first so huge entries cannot overflow."""
    arrays = [g for g in grads.values() if g is not None and g.size]
    if not arrays:
        return 0.0
    peak = max(float(np.max(np.abs(g))) for g in arrays)
    if peak == 0.0 or not math.isfinite(peak):
        return peak
    return peak * math.sqrt(sum(float(np.sum(np.square(g / peak))) for g in arrays))


def clip_global_norm(grads, max_norm):
    total = global_norm(grads)
    if not math.isfinite(total):
        raise NonFiniteGradientError("gradient norm is not finite")
    if max_norm and total > max_norm:
        scale = max_norm / total
        return {k: None if g is None else g * scale for k, g in grads.items()}, total
    return grads, total


@dataclass
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 64
    lr0: float = 0.002
    decay: float = 0.5
    decay_every: int = 40
    seed: int = 0
    clip_norm: float | None = 5.0
    memory_budget_bytes: int | None = None
    eval_batch_size: int = 256

    def __post_init__(self):
        for name in ("epochs", "batch_size", "decay_every", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr0 <= 0 or not 0 < self.decay <= 1:
            raise ValueError("lr0 must be positive and decay in (0, 1]")


def lr_at(epoch, sched: TrainSchedule | None = None):
    sched = sched or TrainSchedule()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return sched.lr0 * sched.decay ** (epoch // sched.decay_every)


def bytes_per_sample(cfg: ModelConfig):
    """Rough activation footprint of one window through forward and backward."""
    per_layer = 4 + 2 * (cfg.diffusion_steps + 1)
    return 8 * cfg.n_nodes * cfg.d0 * (cfg.layers * per_layer + 4) * 2


def fit_batch_size(cfg: ModelConfig, sched: TrainSchedule):
    batch = sched.batch_size
    if sched.memory_budget_bytes is None:
        return batch
    need = bytes_per_sample(cfg)
    while batch > 1 and batch * need > sched.memory_budget_bytes:
        batch //= 2
    if batch != sched.batch_size:
        log.info("batch size reduced from %d to %d to fit memory budget", sched.batch_size, batch)
    return batch


# ---------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    horizons: dict  # horizon step (1-based) -> (mae, rmse, mape%)
    average: tuple  # (mae, rmse, mape%)
    samples: int
    masked: int = 0

    COLUMNS = ("MAE", "RMSE", "MAPE")

    def format(self):
        """Two-line pipe-separated table: header row, then values."""
        head = ["samples", "masked"]
        row = [str(self.samples), str(self.masked)]
        for label, values in self._groups():
            head += [f"{label}:{c}" for c in self.COLUMNS]
            row += [repr(float(v)) for v in values]
        return " | ".join(head) + "\n" + " | ".join(row) + "\n"

    def _groups(self):
        for h in sorted(self.horizons):
            yield f"H{h}", self.horizons[h]
        yield "Average", self.average

    def pretty(self):
        lines = [f"{'Horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE':>9}"]
        for label, (mae, rmse, mape) in self._groups():
            lines.append(f"{label:>8} {mae:10.4f} {rmse:10.4f} {mape:8.2f}%")
        return "\n".join(lines)

    @classmethod
    def parse(cls, text):
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        head = [c.strip() for c in lines[-2].split("|")]
        row = [c.strip() for c in lines[-1].split("|")]
        if len(head) != len(row) or head[:2] != ["samples", "masked"]:
            raise ValueError("not a metrics table")
        groups = {}
        for key, value in zip(head[2:], row[2:]):
            label, col = key.split(":")
            groups.setdefault(label, {})[col] = float(value)
        horizons = {}
        average = None
        for label, cols in groups.items():
            values = tuple(cols[c] for c in cls.COLUMNS)
            if label == "Average":
                average = values
            else:
                horizons[int(label[1:])] = values
        return cls(horizons, average, int(row[0]), int(row[1]))


def _mae_rmse_mape(err, truth, floor):
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    keep = np.abs(truth) >= floor
    mape = float(np.mean(np.abs(err[keep]) / np.abs(truth[keep])) * 100) if keep.any() else float("nan")
    return (mae, rmse, mape), int((~keep).sum())


def compute_metrics(pred, truth, horizons=(3, 6, 12), mask_floor=1e-3):
    """MAE / RMSE / MAPE (%) per 1-based horizon step and over all steps.

    ``pred`` and ``truth`` are [B, N, T', C] in raw units. Horizons beyond T'
    are skipped. MAPE ignores entries with ``|truth| < mask_floor``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 4:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} must match as [B,N,T',C]")
    err = pred - truth
    per = {}
    for h in horizons:
        if 1 <= h <= pred.shape[2]:
            per[h], _ = _mae_rmse_mape(err[:, :, h - 1], truth[:, :, h - 1], mask_floor)
    average, masked = _mae_rmse_mape(err, truth, mask_floor)
    return MetricsReport(per, average, pred.shape[0], masked)


# ---------------------------------------------------------------- loops

def predict(cfg, params, stats: NormStats, windows: WindowSet, *, geo_adjacency=None,
            batch_size=256):
    """Evaluation-mode predictions in raw units, [B, N, T', C]."""
    chunks = []
    for b in windows.iter_batches(batch_size):
        out = forward(b.inputs, b.tod, b.dow, cfg, params, mode=reg.EVALUATION,
                      geo_adjacency=geo_adjacency)
        chunks.append(stats.invert(out.data))
    if not chunks:
        return np.empty((0, cfg.n_nodes, cfg.horizon_out, cfg.channels))
    return np.concatenate(chunks, axis=0)


def evaluate(cfg, params, stats, windows: WindowSet, *, horizons=(3, 6, 12), mask_floor=1e-3,
             geo_adjacency=None, batch_size=256) -> MetricsReport:
    pred = predict(cfg, params, stats, windows, geo_adjacency=geo_adjacency, batch_size=batch_size)
    truth = windows.all().targets
    return compute_metrics(pred, truth, horizons, mask_floor)


def evaluate_checkpoint(path, windows: WindowSet, **kwargs) -> MetricsReport:
    from .model import load_checkpoint

    cfg, params, meta = load_checkpoint(path)
    stats = stats_from_metadata(meta)
    return evaluate(cfg, params, stats, windows, **kwargs)


def stats_from_metadata(meta):
    return NormStats(np.asarray(meta["norm_mean"], dtype=np.float64),
                     np.asarray(meta["norm_std"], dtype=np.float64))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_mae: float
    wall_seconds: float


@dataclass
class TrainResult:
    cfg: ModelConfig
    params: ParameterSet  # best-validation parameters
    stats: NormStats
    history: list
    best_epoch: int
    best_val_mae: float
    last_params: ParameterSet | None = None

    def metadata(self, **extra):
        meta = {
            "norm_mean": self.stats.mean.tolist(),
            "norm_std": self.stats.std.tolist(),
            "best_epoch": self.best_epoch,
            "best_val_mae": self.best_val_mae,
        }
        meta.update(extra)
        return meta


def val_mae(cfg, params, stats, windows, geo_adjacency=None, batch_size=256):
    total = 0.0
    count = 0
    for b in windows.iter_batches(batch_size):
        out = forward(b.inputs, b.tod, b.dow, cfg, params, mode=reg.EVALUATION,
                      geo_adjacency=geo_adjacency)
        err = np.abs(stats.invert(out.data) - b.targets)
        total += float(err.sum())
        count += err.size
    return total / count


def train(cfg: ModelConfig, sched: TrainSchedule, splits: Splits, stats: NormStats, *,
          geo_adjacency=None, params=None, callback=None, stop_when=None) -> TrainResult:
    """Minimise MAE on raw-unit targets; keep the best-validation parameters.

    ``splits`` must already be normalised (see ``data.normalize``). Runs are
    reproducible for a fixed ``sched.seed``. ``stop_when(record)`` returning
    true ends the run after that epoch (used by budgeted experiments).
    """
    train_set, val_set = splits.train, splits.val
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(sched.seed)
    if params is None:
        params = ParameterSet.init(cfg, seed=sched.seed)
    named = params.named()
    state = AdamState()
    batch_size = fit_batch_size(cfg, sched)
    history = []
    best = (math.inf, -1, None)
    for epoch in range(sched.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, sched)
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for bi, batch in enumerate(train_set.iter_batches(batch_size, order)):
            try:
                pred = forward(batch.inputs, batch.tod, batch.dow, cfg, params,
                               mode=reg.TRAINING, rng=rng, geo_adjacency=geo_adjacency)
                loss = mae_loss(denormalize(pred, stats.mean, stats.std), batch.targets)
                params.zero_grad()
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {bi}") from exc
            grads = {name: t.grad for name, t in named.items()}
            try:
                if sched.clip_norm:
                    grads, _ = clip_global_norm(grads, sched.clip_norm)
                adam_step(named, grads, state, lr)
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            loss_sum += float(loss.data) * len(batch)
        score = val_mae(cfg, params, stats, val_set, geo_adjacency, sched.eval_batch_size)
        rec = EpochRecord(epoch, lr, loss_sum / len(train_set), score, time.perf_counter() - t0)
        history.append(rec)
        if score < best[0]:
            best = (score, epoch, params.arrays())
        log.debug("epoch %d lr %.2e train %.4f val %.4f", epoch, lr, rec.train_loss, score)
        if callback is not None:
            callback(rec)
        if stop_when is not None and stop_when(rec):
            break
    best_params = ParameterSet.init(cfg, seed=0)
    best_params.load_arrays(best[2])
    return TrainResult(cfg, best_params, stats, history, best[1], best[0], last_params=params)


def write_history(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["epoch", "lr", "train_loss", "val_mae", "wall_seconds"])
        for rec in history:
            writer.writerow([rec.epoch, repr(rec.lr), repr(rec.train_loss), repr(rec.val_mae),
                             f"{rec.wall_seconds:.6f}"])


def read_history(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        return [EpochRecord(int(r["epoch"]), float(r["lr"]), float(r["train_loss"]),
                            float(r["val_mae"]), float(r["wall_seconds"])) for r in reader]
