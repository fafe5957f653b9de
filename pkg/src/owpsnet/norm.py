"""Normalization variants for NCHW feature maps.

Four variants are supported: plain batch norm ("BN"), instance norm ("IN"),
and the two sequential composites "IN-BN" / "BN-IN" which run both stages in
the order their name reads and apply a single shared affine pair after the
second stage.  "none" disables normalization entirely.

Batch norm keeps exponential running statistics for eval mode; instance norm
normalizes each (sample, channel) plane independently and keeps no state.
Both stages divide by sqrt(var + eps) with biased variance, so a train-mode
output has per-group mean 0 and variance 1 before the affine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, ShapeError, broadcast_mean, channel_affine, square)

NORM_VARIANTS = ("BN", "IN", "IN-BN", "BN-IN", "none")


@dataclass
class NormConfig:
    variant: str = "IN-BN"
    eps: float = 1e-5
    momentum: float = 0.1

    def validate(self):
        if self.variant not in NORM_VARIANTS:
            raise ValueError(f"norm variant must be one of {NORM_VARIANTS}, got {self.variant!r}")
        if self.eps <= 0:
            raise ValueError(f"norm eps must be > 0, got {self.eps}")
        if not 0 < self.momentum < 1:
            raise ValueError(f"norm momentum must be in (0, 1), got {self.momentum}")
        return self


def instance_norm_stats(x: Tensor, eps: float) -> Tensor:
    """Pre-affine instance normalization: whiten each (n, c) plane."""
    if x.data.ndim != 4:
        raise ShapeError("instance_norm: input must be rank-4 NCHW")
    if x.shape[2] * x.shape[3] < 2:
        raise ShapeError("instance_norm: each plane needs at least 2 pixels")
    centered = x - broadcast_mean(x, (2, 3))
    var = broadcast_mean(square(centered), (2, 3))
    return centered * (var + eps).pow(-0.5)


def batch_norm_stats(x: Tensor, layer: "NormLayer", train: bool) -> Tensor:
    """Pre-affine batch normalization against ``layer``'s running state.

    Train mode whitens with the current batch statistics and folds them into
    the running estimates (momentum-weighted); eval mode whitens with the
    stored running statistics and requires at least one prior update.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch_norm: input must be rank-4 NCHW")
    n, c, h, w = x.shape
    if train:
        if n * h * w < 2:
            raise ShapeError("batch_norm: train mode needs >= 2 values per channel")
        centered = x - broadcast_mean(x, (0, 2, 3))
        var = broadcast_mean(square(centered), (0, 2, 3))
        m = layer.cfg.momentum
        batch_mean = x.data.mean(axis=(0, 2, 3))
        batch_var = x.data.var(axis=(0, 2, 3))
        layer.running_mean *= (1.0 - m)
        layer.running_mean += m * batch_mean
        layer.running_var *= (1.0 - m)
        layer.running_var += m * batch_var
        layer.num_batches[0] += 1
        return centered * (var + layer.cfg.eps).pow(-0.5)
    if int(layer.num_batches[0]) == 0:
        raise RuntimeError("batch_norm: eval mode before any train-mode statistics update")
    scale = (1.0 / np.sqrt(layer.running_var + layer.cfg.eps)).astype(x.data.dtype)
    shift = (-layer.running_mean * scale).astype(x.data.dtype)
    return channel_affine(x, Tensor(scale), Tensor(shift))


class NormLayer:
    """One normalization site: variant dispatch plus the per-channel affine.

    Composite variants run their two stages sequentially and apply the single
    affine pair only after the second stage.
    """

    def __init__(self, channels: int, cfg: NormConfig):
        cfg.validate()
        self.cfg = cfg
        self.channels = channels
        self.gamma: Tensor | None = None
        self.beta: Tensor | None = None
        self.running_mean: np.ndarray | None = None
        self.running_var: np.ndarray | None = None
        self.num_batches: np.ndarray | None = None
        if cfg.variant != "none":
            self.gamma = Tensor(np.ones(channels, dtype=np.float32), requires_grad=True)
            self.beta = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        if self._has_batch_stage():
            self.running_mean = np.zeros(channels, dtype=np.float32)
            self.running_var = np.ones(channels, dtype=np.float32)
            self.num_batches = np.zeros(1, dtype=np.float32)

    def _has_batch_stage(self) -> bool:
        return self.cfg.variant in ("BN", "IN-BN", "BN-IN")

    def parameters(self) -> dict[str, Tensor]:
        if self.gamma is None:
            return {}
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        if self.running_mean is None:
            return {}
        return {"running_mean": self.running_mean,
                "running_var": self.running_var,
                "num_batches": self.num_batches}

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        variant = self.cfg.variant
        if variant == "none":
            return x
        if x.shape[1] != self.channels:
            raise ShapeError(f"norm: expected {self.channels} channels, got {x.shape[1]}")
        if variant == "BN":
            y = batch_norm_stats(x, self, train)
        elif variant == "IN":
            y = instance_norm_stats(x, self.cfg.eps)
        elif variant == "IN-BN":
            y = batch_norm_stats(instance_norm_stats(x, self.cfg.eps), self, train)
        else:  # BN-IN
            y = instance_norm_stats(batch_norm_stats(x, self, train), self.cfg.eps)
        return channel_affine(y, self.gamma, self.beta)
