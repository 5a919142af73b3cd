"""Full forecaster: forward pass, dual regression heads, MAE loss, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import regularization as reg
from .embedding import (
    EmbeddingTables,
    assemble_state,
    embed_inputs,
    steps_per_day,
    time_lookup,
)
from .encoder import EncoderLayerParams, encode
from .graph_conv import gate_embeddings, normalize_gated, softmax_adjacency
from .tensor import (
    DimensionError,
    Tensor,
    absolute,
    add,
    as_tensor,
    matmul,
    mul,
    parameter,
    reshape,
    sum_all,
)

ADJACENCY_KINDS = ("eco", "softmax", "geo")


class ConfigError(ValueError):
    pass


class UndefinedLossError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_nodes: int
    horizon_in: int = 12
    horizon_out: int = 12
    channels: int = 1
    d_in: int = 32
    d_tid: int = 32
    d_diw: int = 32
    d_node: int = 64
    layers: int = 2
    diffusion_steps: int = 2
    sse_p: float = 0.1
    interval_seconds: int = 900
    sse_on: bool = True
    rdm_on: bool = True
    agc_on: bool = True
    adjacency: str = "eco"
    share_diffusion: bool = False
    gate_from_perturbed: bool = False

    def __post_init__(self):
        for name in ("n_nodes", "horizon_in", "horizon_out", "channels", "d_in", "d_tid",
                     "d_diw", "d_node", "layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.diffusion_steps < 0:
            raise ConfigError("diffusion_steps must be >= 0")
        if not 0.0 <= self.sse_p <= 1.0:
            raise ConfigError(f"sse_p must lie in [0, 1], got {self.sse_p}")
        if self.adjacency not in ADJACENCY_KINDS:
            raise ConfigError(f"adjacency must be one of {ADJACENCY_KINDS}, got {self.adjacency!r}")
        steps_per_day(self.interval_seconds)

    @property
    def d0(self):
        return self.d_in + self.d_tid + self.d_diw + self.d_node

    @property
    def steps_per_day(self):
        return steps_per_day(self.interval_seconds)

    @property
    def sse_active(self):
        return self.sse_on and self.sse_p > 0

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    def variant(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class ParameterSet:
    embedding: EmbeddingTables
    gate_w1: Tensor
    gate_w2: Tensor
    layers: list
    head_node_w: Tensor
    head_node_b: Tensor
    head_global_w: Tensor
    head_global_b: Tensor
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed=0):
        rng = np.random.default_rng(seed)
        emb = EmbeddingTables.init(
            rng, n_nodes=cfg.n_nodes, horizon_in=cfg.horizon_in, channels=cfg.channels,
            d_in=cfg.d_in, d_tid=cfg.d_tid, d_diw=cfg.d_diw, d_node=cfg.d_node,
            steps_per_day=cfg.steps_per_day,
        )
        k = cfg.d_node
        gb = 1.0 / np.sqrt(k)
        w1 = parameter(rng.uniform(-gb, gb, size=(k, k)), "gate.w1")
        w2 = parameter(rng.uniform(-gb, gb, size=(k, k)), "gate.w2")
        d0 = cfg.d0
        shared = None
        if cfg.share_diffusion:
            bound = 1.0 / np.sqrt(d0)
            shared = [parameter(rng.uniform(-bound, bound, size=(d0, d0)), f"diffusion.{z}")
                      for z in range(cfg.diffusion_steps + 1)]
        layers = [
            EncoderLayerParams.init(rng, d0, d0, cfg.diffusion_steps, f"layers.{i}", shared)
            for i in range(cfg.layers)
        ]
        out = cfg.horizon_out * cfg.channels
        hb = 1.0 / np.sqrt(d0)
        return cls(
            embedding=emb,
            gate_w1=w1,
            gate_w2=w2,
            layers=layers,
            head_node_w=parameter(rng.uniform(-hb, hb, size=(d0, out)), "head_node.w"),
            head_node_b=parameter(rng.uniform(-hb, hb, size=out), "head_node.b"),
            head_global_w=parameter(rng.uniform(-hb, hb, size=(d0, out)), "head_global.w"),
            head_global_b=parameter(rng.uniform(-hb, hb, size=out), "head_global.b"),
        )

    def named(self):
        """Ordered name -> Tensor map; shared tensors appear once."""
        out = dict(self.embedding.named())
        out["gate.w1"] = self.gate_w1
        out["gate.w2"] = self.gate_w2
        for i, layer in enumerate(self.layers):
            for name, t in layer.named(f"layers.{i}").items():
                out.setdefault(name, t)
        out["head_node.w"] = self.head_node_w
        out["head_node.b"] = self.head_node_b
        out["head_global.w"] = self.head_global_w
        out["head_global.b"] = self.head_global_b
        return out

    def load_arrays(self, arrays):
        """Overwrite values from ``name -> ndarray``, checking every shape."""
        named = self.named()
        missing = set(named) - set(arrays)
        extra = set(arrays) - set(named)
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, t in named.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: checkpoint shape {arr.shape}, model expects {t.shape}")
            t.data[...] = arr

    def arrays(self):
        return {name: t.data.copy() for name, t in self.named().items()}

    def zero_grad(self):
        for t in self.named().values():
            t.zero_grad()


def _as_batch(inputs, tod, dow):
    x = np.asarray(inputs.data if isinstance(inputs, Tensor) else inputs, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    tod = np.atleast_1d(np.asarray(tod, dtype=np.intp))
    dow = np.atleast_1d(np.asarray(dow, dtype=np.intp))
    if tod.shape != (x.shape[0],) or dow.shape != (x.shape[0],):
        raise DimensionError("one time index per batch element is required")
    return x, tod, dow, single


@dataclass
class ForwardTrace:
    """Intermediate values kept for tests and inspection."""

    draw: reg.SseDraw
    e_hat: object = None
    encoder: object = None


def forward(inputs, tod, dow, cfg: ModelConfig, params: ParameterSet, *,
            mode=reg.EVALUATION, rng=None, seed=None, sse_draw=None, geo_adjacency=None,
            trace=None):
    """Run the forecaster; returns normalised predictions [B, N, T', C] (or [N, T', C]).

    In training mode a fresh SSE draw is taken from ``rng`` (or ``seed``)
    unless ``sse_draw`` pins one, which is how gradient checks fix the mask.
    """
    x, tod, dow, single = _as_batch(inputs, tod, dow)
    if x.shape[1:] != (cfg.n_nodes, cfg.horizon_in, cfg.channels):
        raise DimensionError(
            f"window shape {x.shape[1:]} does not match config "
            f"{(cfg.n_nodes, cfg.horizon_in, cfg.channels)}"
        )
    emb = params.embedding
    e_in = embed_inputs(x, emb)
    e_tid, e_diw = time_lookup(tod, dow, emb)

    if sse_draw is not None:
        draw = sse_draw
    elif mode == reg.TRAINING and cfg.sse_active:
        if rng is None:
            rng = np.random.default_rng(seed)
        draw = reg.draw_sse(cfg.n_nodes, cfg.sse_p, rng)
    else:
        draw = reg.SseDraw.identity(cfg.n_nodes)
    e_node_used = reg.apply_draw(emb.node, draw)

    gate_source = e_node_used if cfg.gate_from_perturbed else emb.node
    adjacency = None
    if cfg.agc_on:
        if cfg.adjacency == "eco":
            adjacency = normalize_gated(gate_embeddings(gate_source, params.gate_w1, params.gate_w2))
        elif cfg.adjacency == "softmax":
            adjacency = softmax_adjacency(gate_source)
        else:
            if geo_adjacency is None:
                raise ConfigError("adjacency='geo' needs a geographic adjacency matrix")
            adjacency = geo_adjacency

    h0 = assemble_state(e_in, e_tid, e_diw, e_node_used)
    enc = encode(h0, adjacency, params.layers, rdm=cfg.rdm_on, agc=cfg.agc_on)

    out = add(matmul(enc.h_final, params.head_node_w), params.head_node_b)
    if enc.h_skip is not None:
        out = add(out, matmul(enc.h_skip, params.head_global_w))
    out = add(out, params.head_global_b)
    out = reshape(out, (x.shape[0], cfg.n_nodes, cfg.horizon_out, cfg.channels))
    if trace is not None:
        trace.draw = draw
        trace.e_hat = adjacency
        trace.encoder = enc
    if single:
        out = reshape(out, out.shape[1:])
    return out


def denormalize(pred, mean, std):
    """Map normalised predictions back to raw units (per-channel affine)."""
    return add(mul(pred, np.asarray(std, dtype=np.float64)), np.asarray(mean, dtype=np.float64))


def mae_loss(pred, truth, mask=None):
    """Mean absolute error over unmasked entries."""
    pred = as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
    err = absolute(add(pred, -truth))
    if mask is None:
        count = truth.size
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), truth.shape)
        count = int(mask.sum())
        err = mul(err, mask.astype(np.float64))
    if count == 0:
        raise UndefinedLossError("mask leaves no entries to average")
    return mul(sum_all(err), 1.0 / count)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"RAGLCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, params, metadata=None):
    """Write config, metadata and every named tensor (float64, little-endian).

    Layout: magic, u32 version, u32 json length, UTF-8 JSON
    ``{"config": ..., "metadata": ...}``, u32 tensor count, then per tensor:
    u16 name length, name, u32 rank, u64 extents, raw values.
    """
    arrays = params.arrays() if isinstance(params, ParameterSet) else dict(params)
    header = json.dumps({"config": cfg.to_dict(), "metadata": metadata or {}},
                        sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    _atomic_write(path, b"".join(chunks))


def _atomic_write(path, payload):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(config, params, metadata)``; every shape is validated."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"checkpoint truncated: need {pos + n} bytes, have {len(blob)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(CKPT_MAGIC))) != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(bytes(take(hlen)).decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last tensor")
    params = ParameterSet.init(cfg, seed=0)
    params.load_arrays(arrays)
    return cfg, params, header.get("metadata", {})
