"""Dual-branch encoder-decoder for overlapping-particle segmentation.

A shared convolutional encoder feeds two mirrored decoders: one predicts the
particle region map, the other the particle edge map.  Each level is a pair of
3x3 conv + norm + relu blocks; downsampling is 2x2 max pooling and upsampling
is a stride-2 transposed convolution, with skip connections concatenated at
every level.  An optional refinement block concatenates the full-resolution
first-level encoder features with the decoders' final features, mixes them
with a 3x3 conv, and passes the result through spatial and channel attention
in parallel.  Both attention gates start at zero, so at initialization the
block is exactly the mixing convolution.  Both sigmoid heads read the refined
features when refinement is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .norm import NormConfig, NormLayer
from .tensor import (Tensor, ShapeError, concat_channels, conv2d, matmul,
                     maxpool2d, reshape, scale_by_scalar, sigmoid,
                     softmax_lastaxis, transpose, transposed_conv2d)


@dataclass
class ModelConfig:
    depth: int = 4
    base_channels: int = 16
    input_channels: int = 3
    norm: NormConfig = field(default_factory=NormConfig)
    refine_enabled: bool = True
    edge_branch: bool = True

    def validate(self):
        if self.depth < 2:
            raise ValueError(f"model depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.input_channels < 1:
            raise ValueError(f"input_channels must be >= 1, got {self.input_channels}")
        self.norm.validate()
        return self


class ParamStore:
    """Ordered name -> tensor registry plus non-learnable buffers.

    Registration order is the canonical parameter order for the optimizer and
    the checkpoint format, so building the same config twice yields the same
    names in the same order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t
        return t

    def add_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self._buffers[name] = arr
        return arr

    def named_parameters(self):
        return self._params.items()

    def named_buffers(self):
        return self._buffers.items()

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def parameter_count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype):
        """In-place dtype switch for every parameter; used by numerical
        cross-checks that rerun the graph in float64."""
        for t in self._params.values():
            t.data = t.data.astype(dtype)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class ConvLayer:
    def __init__(self, store: ParamStore, prefix: str, rng, c_in: int, c_out: int,
                 kernel: int, bias: bool = True):
        shape = (c_out, c_in, kernel, kernel)
        self.weight = store.add_param(
            f"{prefix}.weight", Tensor(_he_uniform(rng, shape, c_in * kernel * kernel)))
        self.bias = None
        if bias:
            self.bias = store.add_param(
                f"{prefix}.bias", Tensor(np.zeros(c_out, dtype=np.float32)))
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class UpLayer:
    def __init__(self, store: ParamStore, prefix: str, rng, c_in: int, c_out: int):
        self.weight = store.add_param(
            f"{prefix}.weight", Tensor(_he_uniform(rng, (c_in, c_out, 2, 2), c_in)))

    def __call__(self, x: Tensor) -> Tensor:
        return transposed_conv2d(x, self.weight, stride=2)


def _register_norm(store: ParamStore, prefix: str, layer: NormLayer) -> NormLayer:
    for name, t in layer.parameters().items():
        store.add_param(f"{prefix}.{name}", t)
    for name, arr in layer.buffers().items():
        store.add_buffer(f"{prefix}.{name}", arr)
    return layer


class DoubleConv:
    """3x3 conv + norm + relu, twice."""

    def __init__(self, store, prefix, rng, c_in, c_out, norm_cfg):
        self.conv1 = ConvLayer(store, f"{prefix}.conv1", rng, c_in, c_out, 3)
        self.norm1 = _register_norm(store, f"{prefix}.norm1", NormLayer(c_out, norm_cfg))
        self.conv2 = ConvLayer(store, f"{prefix}.conv2", rng, c_out, c_out, 3)
        self.norm2 = _register_norm(store, f"{prefix}.norm2", NormLayer(c_out, norm_cfg))

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        x = self.norm1(self.conv1(x), train).relu()
        return self.norm2(self.conv2(x), train).relu()


class SpatialAttention:
    """Position attention: every pixel re-aggregates values from all pixels.

    1x1 convs project the input to query/key (channels/8, floored at 1) and
    value (full channels); the (H*W x H*W) affinity is softmax-normalized per
    query row.  Output is gate * aggregate + input with the gate starting at 0.
    """

    def __init__(self, store, prefix, rng, channels: int):
        if channels < 8:
            raise ValueError(f"spatial attention needs >= 8 channels, got {channels}")
        reduced = channels // 8
        self.query = ConvLayer(store, f"{prefix}.query", rng, channels, reduced, 1)
        self.key = ConvLayer(store, f"{prefix}.key", rng, channels, reduced, 1)
        self.value = ConvLayer(store, f"{prefix}.value", rng, channels, channels, 1)
        self.gate = store.add_param(f"{prefix}.gate",
                                    Tensor(np.zeros(1, dtype=np.float32)))
        self.reduced = reduced

    def affinity(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        q = transpose(reshape(self.query(f), (n, self.reduced, h * w)), (0, 2, 1))
        k = reshape(self.key(f), (n, self.reduced, h * w))
        return softmax_lastaxis(matmul(q, k))           # (N, HW, HW), rows sum to 1

    def __call__(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        attn = self.affinity(f)
        v = reshape(self.value(f), (n, c, h * w))
        out = matmul(v, transpose(attn, (0, 2, 1)))      # out[:, :, i] = sum_j A[i,j] v[:, j]
        return scale_by_scalar(reshape(out, (n, c, h, w)), self.gate) + f


class ChannelAttention:
    """Channel attention over the C x C Gram matrix of the flattened feature
    map; no projections, gate starts at 0."""

    def __init__(self, store, prefix):
        self.gate = store.add_param(f"{prefix}.gate",
                                    Tensor(np.zeros(1, dtype=np.float32)))

    def __call__(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        flat = reshape(f, (n, c, h * w))
        affinity = softmax_lastaxis(matmul(flat, transpose(flat, (0, 2, 1))))  # (N, C, C)
        out = matmul(affinity, flat)
        return scale_by_scalar(reshape(out, (n, c, h, w)), self.gate) + f


class FeatureRefine:
    """Fuse first-level encoder features with the decoders' final features.

    concat -> 3x3 conv + norm + relu -> spatial and channel attention in
    parallel.  The two attention outputs are averaged (each already carries
    the residual), so with both gates at their zero initialization the block
    returns exactly the mixed convolution features.
    """

    def __init__(self, store, prefix, rng, c_enc: int, c_dec: int, norm_cfg):
        self.c_out = max(c_enc, 8)
        self.mix = ConvLayer(store, f"{prefix}.mix", rng, c_enc + c_dec, self.c_out, 3)
        self.norm = _register_norm(store, f"{prefix}.norm", NormLayer(self.c_out, norm_cfg))
        self.spatial = SpatialAttention(store, f"{prefix}.spatial", rng, self.c_out)
        self.channel = ChannelAttention(store, f"{prefix}.channel")

    def __call__(self, enc_first: Tensor, dec_last: Tensor, train: bool) -> Tensor:
        if enc_first.shape[2:] != dec_last.shape[2:]:
            raise ShapeError("feature_refine: encoder and decoder maps must share "
                             f"spatial extents, got {enc_first.shape} vs {dec_last.shape}")
        mixed = self.norm(self.mix(concat_channels(enc_first, dec_last)), train).relu()
        return (self.spatial(mixed) + self.channel(mixed)) * 0.5


class Decoder:
    def __init__(self, store, prefix, rng, depth, base, norm_cfg):
        self.ups = []
        self.blocks = []
        for i in range(depth, 0, -1):
            c_skip = base * 2 ** (i - 1)
            self.ups.append(UpLayer(store, f"{prefix}.up{i}", rng, c_skip * 2, c_skip))
            self.blocks.append(DoubleConv(store, f"{prefix}.block{i}", rng,
                                          c_skip * 2, c_skip, norm_cfg))

    def __call__(self, h: Tensor, skips: list[Tensor], train: bool) -> Tensor:
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            h = block(concat_channels(skip, up(h)), train)
        return h


class OWPSNet:
    """The full segmentation network; ``forward`` returns (region, edge)
    probability maps, or (region, None) without the edge branch."""

    def __init__(self, cfg: ModelConfig, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        store, norm_cfg = self.params, cfg.norm
        base, depth = cfg.base_channels, cfg.depth

        self.enc_levels = []
        c_in = cfg.input_channels
        for i in range(1, depth + 1):
            c_out = base * 2 ** (i - 1)
            self.enc_levels.append(DoubleConv(store, f"enc{i}", rng, c_in, c_out, norm_cfg))
            c_in = c_out
        self.bottleneck = DoubleConv(store, "bottleneck", rng, c_in, c_in * 2, norm_cfg)

        self.region_dec = Decoder(store, "region_dec", rng, depth, base, norm_cfg)
        self.edge_dec = Decoder(store, "edge_dec", rng, depth, base, norm_cfg) \
            if cfg.edge_branch else None

        self.refine = None
        if cfg.refine_enabled:
            c_dec = base * 2 if cfg.edge_branch else base
            self.refine = FeatureRefine(store, "refine", rng, base, c_dec, norm_cfg)

        head_in = self.refine.c_out if self.refine is not None else base
        self.region_head = ConvLayer(store, "region_head", rng, head_in, 1, 1)
        self.edge_head = ConvLayer(store, "edge_head", rng, head_in, 1, 1) \
            if cfg.edge_branch else None

    def forward(self, x: Tensor, train: bool) -> tuple[Tensor, Tensor | None]:
        if x.data.ndim != 4 or x.shape[1] != self.cfg.input_channels:
            raise ShapeError(f"forward: expected (N,{self.cfg.input_channels},H,W), "
                             f"got {x.shape}")
        factor = 2 ** self.cfg.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(f"forward: H and W must be multiples of {factor}, "
                             f"got {x.shape[2:]}")

        skips = []
        h = x
        for level in self.enc_levels:
            h = level(h, train)
            skips.append(h)
            h = maxpool2d(h)
        h = self.bottleneck(h, train)

        region_feat = self.region_dec(h, skips, train)
        edge_feat = self.edge_dec(h, skips, train) if self.edge_dec is not None else None

        if self.refine is not None:
            dec_last = concat_channels(region_feat, edge_feat) \
                if edge_feat is not None else region_feat
            refined = self.refine(skips[0], dec_last, train)
            region_in = edge_in = refined
        else:
            region_in, edge_in = region_feat, edge_feat

        region_prob = sigmoid(self.region_head(region_in))
        edge_prob = sigmoid(self.edge_head(edge_in)) if self.edge_head is not None else None
        return region_prob, edge_prob


def build_model(cfg: ModelConfig, seed: int) -> OWPSNet:
    """Construct a network with seed-deterministic He-uniform initialization."""
    return OWPSNet(cfg, seed)
