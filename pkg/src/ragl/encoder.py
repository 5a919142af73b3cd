"""Stacked encoder: residual MLP, diffusion graph convolution, residual difference."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph_conv import diffusion_convolve
from .tensor import DimensionError, Tensor, add, as_tensor, matmul, parameter, relu, sub


class EncoderConfigError(ValueError):
    pass


@dataclass
class EncoderLayerParams:
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor
    diffusion: list = field(default_factory=list)  # Z+1 tensors [d0, d0]

    @classmethod
    def init(cls, rng, d0, d_hidden, diffusion_steps, prefix, shared_diffusion=None):
        def dense(fan_in, fan_out, name):
            bound = 1.0 / np.sqrt(fan_in)
            return parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), name)

        def bias(fan_in, width, name):
            bound = 1.0 / np.sqrt(fan_in)
            return parameter(rng.uniform(-bound, bound, size=width), name)

        if shared_diffusion is None:
            diffusion = [dense(d0, d0, f"{prefix}.diffusion.{z}") for z in range(diffusion_steps + 1)]
        else:
            diffusion = shared_diffusion
        return cls(
            fc1_w=dense(d0, d_hidden, f"{prefix}.fc1.w"),
            fc1_b=bias(d0, d_hidden, f"{prefix}.fc1.b"),
            fc2_w=dense(d_hidden, d0, f"{prefix}.fc2.w"),
            fc2_b=bias(d_hidden, d0, f"{prefix}.fc2.b"),
            diffusion=diffusion,
        )

    def named(self, prefix):
        out = {
            f"{prefix}.fc1.w": self.fc1_w,
            f"{prefix}.fc1.b": self.fc1_b,
            f"{prefix}.fc2.w": self.fc2_w,
            f"{prefix}.fc2.b": self.fc2_b,
        }
        for z, w in enumerate(self.diffusion):
            out[w.name or f"{prefix}.diffusion.{z}"] = w
        return out

    def summed_diffusion(self):
        return sum(w.data for w in self.diffusion)


@dataclass
class EncoderOutput:
    h_final: Tensor
    h_skip: Tensor | None  # None when no graph convolution ran (all-zero skip)
    layer_states: list = field(default_factory=list)  # (h_mlp, h_g) per layer


def mlp_residual(h, params: EncoderLayerParams):
    h = as_tensor(h)
    if h.shape[-1] != params.fc1_w.shape[0] or params.fc2_w.shape[1] != h.shape[-1]:
        raise DimensionError(f"state width {h.shape[-1]} does not match MLP weights")
    hidden = relu(add(matmul(h, params.fc1_w), params.fc1_b))
    return add(add(matmul(hidden, params.fc2_w), params.fc2_b), h)


def encoder_layer(h_prev, adjacency, params: EncoderLayerParams, *, rdm=True, agc=True):
    """One encoder block. Returns ``(h_next, h_g, h_mlp)``; ``h_g`` is None without AGC."""
    h_mlp = mlp_residual(h_prev, params)
    if not agc:
        return h_mlp, None, h_mlp
    h_g = diffusion_convolve(adjacency, h_mlp, params.diffusion)
    h_next = sub(h_mlp, h_g) if rdm else h_g
    return h_next, h_g, h_mlp


def encode(h0, adjacency, layers, *, rdm=True, agc=True) -> EncoderOutput:
    if not layers:
        raise EncoderConfigError("encoder needs at least one layer")
    h = as_tensor(h0)
    skip = None
    states = []
    for params in layers:
        h, h_g, h_mlp = encoder_layer(h, adjacency, params, rdm=rdm, agc=agc)
        states.append((h_mlp, h_g))
        if h_g is not None:
            skip = h_g if skip is None else add(skip, h_g)
    return EncoderOutput(h, skip, states)
