"""Full inpainting network: encoding layers, the recurrent reasoning module,
and decoding layers with image-skip concatenation.

Default wiring (depth 1): a k7 s2 partial conv and a k7 s1 partial conv encode
the masked image to half resolution and 64 channels, the reasoning module
recurs there, a k4 s2 transposed conv returns to full resolution, and a
partial conv over the concatenated (masked image, features) plus two k3 convs
and an output conv produce the 3-channel reconstruction. A depth knob moves
the module further down by inserting extra stride-2 encode/decode layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import DimensionError, ParamStore, Tensor
from .layers import Conv2dLayer, TransposedConv2dLayer
from .partial_conv import PartialConvLayer, check_mask
from .reasoning import ReasoningConfig, RfrModule


class ConfigError(ValueError):
    """Rejected run configuration."""


@dataclass
class LayerDesc:
    """One row of the architecture table, for reporting and shape tracing."""

    name: str
    kind: str
    kernel: int | None
    stride: int | None
    out_channels: int
    norm: bool
    activation: str | None


@dataclass
class NetConfig:
    resolution: int = 256
    downsample_depth: int = 1
    channel_scale: int = 1
    iter_num: int = 6
    merge_mode: str = "adaptive"
    attention_enabled: bool = True
    kca_window: int = 3

    def validate(self):
        if self.downsample_depth not in (1, 2, 3):
            raise ConfigError(f"downsample_depth must be 1, 2 or 3, got {self.downsample_depth}")
        divisor = 16 * 2 ** (self.downsample_depth - 1)
        if self.resolution % divisor:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by {divisor} "
                f"(required at depth {self.downsample_depth})"
            )
        if self.channel_scale < 1 or 32 % self.channel_scale:
            raise ConfigError(f"channel_scale must divide 32, got {self.channel_scale}")
        if self.iter_num < 1:
            raise ConfigError(f"iter_num must be >= 1, got {self.iter_num}")

    def reasoning(self) -> ReasoningConfig:
        return ReasoningConfig(
            iter_num=self.iter_num,
            merge_mode=self.merge_mode,
            attention_enabled=self.attention_enabled,
            channel_scale=self.channel_scale,
            kca_window=self.kca_window,
        )


class NetworkGraph:
    """Built network: layer objects plus their shared parameter store."""

    def __init__(self, cfg: NetConfig, store: ParamStore, rng):
        c64 = 64 // cfg.channel_scale
        c32 = 32 // cfg.channel_scale
        self.cfg = cfg
        self.store = store
        self.pconv0 = PartialConvLayer(store, "pconv0", 3, c64, 7, 2, 3, rng,
                                       norm=True, activation="relu")
        self.pconv1 = PartialConvLayer(store, "pconv1", c64, c64, 7, 1, 3, rng,
                                       norm=True, activation="relu")
        self.extra_enc = [
            Conv2dLayer(store, f"enc_extra{i}", c64, c64, 3, 2, 1, rng,
                        norm=True, activation="relu")
            for i in range(cfg.downsample_depth - 1)
        ]
        self.rfr = RfrModule(store, "rfr", rng, cfg.reasoning())
        self.extra_dec = [
            TransposedConv2dLayer(store, f"dec_extra{i}", c64, c64, 4, 2, 1, rng,
                                  norm=True, activation="leaky_relu")
            for i in range(cfg.downsample_depth - 1)
        ]
        self.up = TransposedConv2dLayer(store, "up", c64, c64, 4, 2, 1, rng,
                                        norm=True, activation="leaky_relu")
        self.pconv2 = PartialConvLayer(store, "pconv2", 3 + c64, c32, 3, 1, 1, rng,
                                       norm=False, activation="leaky_relu")
        self.refine1 = Conv2dLayer(store, "refine1", c32, c32, 3, 1, 1, rng,
                                   norm=True, activation="leaky_relu")
        self.refine2 = Conv2dLayer(store, "refine2", c32, c32, 3, 1, 1, rng,
                                   norm=True, activation="leaky_relu")
        self.out_conv = Conv2dLayer(store, "out_conv", 2 * c32, 3, 3, 1, 1, rng,
                                    norm=False, activation=None)
        self.descriptors = self._build_descriptors()

    def _build_descriptors(self):
        c64 = 64 // self.cfg.channel_scale
        c32 = 32 // self.cfg.channel_scale
        rows = [
            LayerDesc("pconv0", "partial_conv", 7, 2, c64, True, "relu"),
            LayerDesc("pconv1", "partial_conv", 7, 1, c64, True, "relu"),
        ]
        for i in range(self.cfg.downsample_depth - 1):
            rows.append(LayerDesc(f"enc_extra{i}", "conv", 3, 2, c64, True, "relu"))
        rows.append(LayerDesc("rfr", "rfr", None, None, c64, False, None))
        for i in range(self.cfg.downsample_depth - 1):
            rows.append(LayerDesc(f"dec_extra{i}", "deconv", 4, 2, c64, True, "leaky_relu"))
        rows += [
            LayerDesc("up", "deconv", 4, 2, c64, True, "leaky_relu"),
            LayerDesc("pconv2", "partial_conv", 3, 1, c32, False, "leaky_relu"),
            LayerDesc("refine1", "conv", 3, 1, c32, True, "leaky_relu"),
            LayerDesc("refine2", "conv", 3, 1, c32, True, "leaky_relu"),
            LayerDesc("out_conv", "conv", 3, 1, 3, False, None),
        ]
        return rows

    def norm_layers(self):
        layers = [self.pconv0, self.pconv1, *self.extra_enc, *self.extra_dec,
                  self.up, self.pconv2, self.refine1, self.refine2, self.out_conv,
                  *self.rfr.conv_layers()]
        return [l.bn for l in layers if getattr(l, "bn", None) is not None]

    def set_mode(self, mode):
        """'train' or 'eval' for every normalization layer."""
        for bn in self.norm_layers():
            bn.set_mode(mode)

    def freeze_norm(self):
        """Fine-tune mode: all normalization layers use running stats and stop updating."""
        for bn in self.norm_layers():
            bn.set_mode("frozen")

    def forward(self, img_masked, mask: np.ndarray, collect=False):
        """Reconstruct. Returns (raw prediction, composite); with collect=True
        also the per-recurrence (mask, region) diagnostics at module resolution.
        """
        img_masked = ops.as_tensor(img_masked)
        if img_masked.data.ndim != 4 or img_masked.data.shape[1] != 3:
            raise DimensionError(f"expected (n,3,h,w) image, got {img_masked.data.shape}")
        check_mask(mask, img_masked.data.shape)
        h, w = img_masked.data.shape[2:]
        divisor = 16 * 2 ** (self.cfg.downsample_depth - 1)
        if h % divisor or w % divisor:
            raise ConfigError(f"input resolution ({h},{w}) not divisible by {divisor}")

        x, m = self.pconv0(img_masked, mask)
        x, m = self.pconv1(x, m)
        for enc in self.extra_enc:
            x = enc(x)
        # module mask: nearest-neighbor to module resolution
        m = ops.nearest_downsample(m, 2 ** (self.cfg.downsample_depth - 1))
        merged, rstate, diagnostics = self.rfr.forward(x, m, collect=True)
        x = merged
        for dec in self.extra_dec:
            x = dec(x)
        x = self.up(x)
        feats, _ = self.pconv2(ops.concat([img_masked, x], axis=1), mask)
        r1 = self.refine1(feats)
        r2 = self.refine2(r1)
        out = self.out_conv(ops.concat([feats, r2], axis=1))
        composite = ops.add(ops.mul(img_masked, mask), ops.mul(out, 1.0 - mask))
        if collect:
            return out, composite, diagnostics
        return out, composite


def build(cfg: NetConfig, seed: int) -> NetworkGraph:
    """Seeded construction; identical seed and config give bit-identical parameters."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    return NetworkGraph(cfg, ParamStore(), rng)


def param_count(graph: NetworkGraph):
    """(total, per-layer breakdown). Counts trainable parameters only."""
    groups: dict[str, int] = {}
    total = 0
    for name, p in graph.store.params():
        group = name.rsplit(".", 1)[0]
        groups[group] = groups.get(group, 0) + p.data.size
        total += p.data.size
    return total, sorted(groups.items())
