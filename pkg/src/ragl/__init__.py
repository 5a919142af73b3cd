"""Spatio-temporal traffic forecaster with a linear-cost cosine graph operator.

Modules map to the pipeline stages: ``tensor`` (reverse-mode core),
``regularization`` (stochastic shared embeddings), ``graph_conv`` (cosine
aggregation and oracles), ``embedding``, ``encoder``, ``model``, ``data``,
``trainer`` and ``bench``. Hot kernels live in ``kernels``.
"""
from .data import TrafficSeries, load_series, save_series, split_and_window, synth_generate
from .model import ModelConfig, ParameterSet, forward, load_checkpoint, mae_loss, save_checkpoint
from .trainer import TrainSchedule, evaluate, lr_at, train

__all__ = [
    "ModelConfig",
    "ParameterSet",
    "TrafficSeries",
    "TrainSchedule",
    "evaluate",
    "forward",
    "load_checkpoint",
    "load_series",
    "lr_at",
    "mae_loss",
    "save_checkpoint",
    "save_series",
    "split_and_window",
    "synth_generate",
    "train",
]

__version__ = "0.1.0"
