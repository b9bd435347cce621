"""Recurrent feature reasoning: area identification, shared encoder-decoder
reasoning with attention, and per-recurrence feature merging.

Each recurrence first grows the valid region with two k=7 partial convolutions
(area identification), then re-estimates the feature map with a skip-connected
encoder-decoder whose bottleneck hosts the attention layer. One parameter set
is shared by every recurrence. The per-recurrence outputs and masks are merged
at the end: adaptively (averaging each location over the recurrences in which
it was valid), as a plain average, or by taking the last map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import ContractError, DimensionError, ParamStore, Tensor
from .attention import KcaLayer
from .layers import Conv2dLayer, TransposedConv2dLayer
from .partial_conv import PartialConvLayer

MERGE_MODES = ("adaptive", "average", "last_only")

# Each reasoning pass downsamples three times; attention runs at this fraction
# of the module's input resolution.
ATTENTION_FACTOR = 8


@dataclass
class ReasoningConfig:
    iter_num: int = 6
    merge_mode: str = "adaptive"
    attention_enabled: bool = True
    channel_scale: int = 1
    kca_window: int = 3

    def validate(self):
        if self.iter_num < 1:
            raise ContractError(f"iter_num must be >= 1, got {self.iter_num}")
        if self.merge_mode not in MERGE_MODES:
            raise ContractError(f"merge_mode must be one of {MERGE_MODES}, got {self.merge_mode!r}")


class RecurrenceState:
    """Ordered per-recurrence feature maps and their masks (equal shapes,
    monotone masks)."""

    def __init__(self):
        self.features: list[Tensor] = []
        self.masks: list[np.ndarray] = []

    def append(self, feats: Tensor, mask: np.ndarray):
        if self.features and feats.data.shape != self.features[0].data.shape:
            raise DimensionError(
                f"recurrence feature shape {feats.data.shape} differs from first "
                f"{self.features[0].data.shape}"
            )
        self.features.append(feats)
        self.masks.append(mask)

    def __len__(self):
        return len(self.features)


def merge_features(state: RecurrenceState, mode="adaptive") -> Tensor:
    """Combine per-recurrence feature maps into one."""
    if len(state) == 0:
        raise ContractError("cannot merge an empty recurrence state")
    if mode == "last_only":
        return state.features[-1]
    if mode == "average":
        acc = state.features[0]
        for f in state.features[1:]:
            acc = ops.add(acc, f)
        return ops.mul(acc, 1.0 / len(state))
    if mode != "adaptive":
        raise ContractError(f"unknown merge mode {mode!r}")
    num = ops.mul(state.features[0], state.masks[0])
    den = state.masks[0].astype(np.float64).copy()
    for f, m in zip(state.features[1:], state.masks[1:]):
        num = ops.add(num, ops.mul(f, m))
        den += m
    with np.errstate(divide="ignore"):
        inv = np.where(den > 0, 1.0 / den, 0.0).astype(state.features[0].data.dtype)
    return ops.mul(num, inv)


class RfrModule:
    """Plug-in recurrent reasoning block operating at 64/channel_scale channels."""

    def __init__(self, store: ParamStore, name, rng, cfg: ReasoningConfig):
        cfg.validate()
        if 64 % cfg.channel_scale or 32 % cfg.channel_scale:
            raise ContractError(f"channel_scale must divide 32, got {cfg.channel_scale}")
        self.cfg = cfg
        c = 64 // cfg.channel_scale
        self.channels = c

        def pconv(tag, cin, cout, norm, act):
            return PartialConvLayer(store, f"{name}.{tag}", cin, cout, 7, 1, 3, rng,
                                    norm=norm, activation=act)

        def conv(tag, cin, cout, stride, act):
            return Conv2dLayer(store, f"{name}.{tag}", cin, cout, 3, stride, 1, rng,
                               norm=True, activation=act)

        def deconv(tag, cin, cout):
            return TransposedConv2dLayer(store, f"{name}.{tag}", cin, cout, 4, 2, 1, rng,
                                         norm=True, activation="leaky_relu")

        self.pconv_a = pconv("pconv_a", c, c, norm=False, act=None)
        self.pconv_b = pconv("pconv_b", c, c, norm=True, act="relu")
        self.enc1 = conv("enc1", c, 2 * c, 2, "relu")
        self.enc2 = conv("enc2", 2 * c, 4 * c, 2, "relu")
        self.enc3 = conv("enc3", 4 * c, 8 * c, 2, "relu")
        self.mid1 = conv("mid1", 8 * c, 8 * c, 1, "relu")
        self.mid2 = conv("mid2", 8 * c, 8 * c, 1, "relu")
        self.mid3 = conv("mid3", 8 * c, 8 * c, 1, "relu")
        self.skip1 = conv("skip1", 16 * c, 8 * c, 1, "leaky_relu")
        self.skip2 = conv("skip2", 16 * c, 8 * c, 1, "leaky_relu")
        self.kca = (
            KcaLayer(store, f"{name}.kca", 8 * c, rng, window=cfg.kca_window)
            if cfg.attention_enabled
            else None
        )
        self.dec1 = deconv("dec1", 16 * c, 4 * c)
        self.dec2 = deconv("dec2", 8 * c, 2 * c)
        self.dec3 = deconv("dec3", 4 * c, c)

    def conv_layers(self):
        layers = [self.pconv_a, self.pconv_b, self.enc1, self.enc2, self.enc3,
                  self.mid1, self.mid2, self.mid3, self.skip1, self.skip2,
                  self.dec1, self.dec2, self.dec3]
        if self.kca is not None:
            layers.append(self.kca.fusion)
        return layers

    def area_identify(self, feats: Tensor, mask: np.ndarray):
        """Grow the valid region by two cascaded k=7 partial convolutions.

        Returns (features, updated mask, region) where region marks the
        locations to be inferred this recurrence (new minus old validity).
        """
        x, m = self.pconv_a(feats, mask)
        x, m = self.pconv_b(x, m)
        region = m - mask.astype(m.dtype)
        return x, m, region

    def feature_reason(self, feats: Tensor, attn_state, attn_valid):
        """Skip-connected encoder-decoder pass; attention at the bottleneck."""
        e1 = self.enc1(feats)
        e2 = self.enc2(e1)
        e3 = self.enc3(e2)
        m1 = self.mid1(e3)
        m2 = self.mid2(m1)
        m3 = self.mid3(m2)
        s1 = self.skip1(ops.concat([m3, m2], axis=1))
        s2 = self.skip2(ops.concat([s1, m1], axis=1))
        if self.kca is not None:
            attended, attn_state = self.kca.forward(s2, attn_state, attn_valid)
        else:
            attended = s2
        d1 = self.dec1(ops.concat([attended, e3], axis=1))
        d2 = self.dec2(ops.concat([d1, e2], axis=1))
        d3 = self.dec3(ops.concat([d2, e1], axis=1))
        return d3, attn_state

    def forward(self, feats: Tensor, mask: np.ndarray, collect=False):
        """Run iter_num recurrences and merge.

        With collect=True also returns the per-recurrence (mask, region) pairs
        for visualization.
        """
        n, c, h, w = feats.data.shape
        if c != self.channels:
            raise DimensionError(f"module expects {self.channels} channels, got {c}")
        if h % ATTENTION_FACTOR or w % ATTENTION_FACTOR:
            raise DimensionError(
                f"module resolution ({h},{w}) must be divisible by {ATTENTION_FACTOR}"
            )
        state = RecurrenceState()
        attn_state = None
        diagnostics = []
        cur_f, cur_m = feats, mask
        for _ in range(self.cfg.iter_num):
            x, m, region = self.area_identify(cur_f, cur_m)
            attn_valid = ops.nearest_downsample(m, ATTENTION_FACTOR)
            x, attn_state = self.feature_reason(x, attn_state, attn_valid)
            state.append(x, m)
            diagnostics.append((m, region))
            cur_f, cur_m = x, m
        merged = merge_features(state, self.cfg.merge_mode)
        if collect:
            return merged, state, diagnostics
        return merged, state
