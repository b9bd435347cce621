"""Partial convolution: renormalized masked convolution with a binary mask update.

Each output window is renormalized by (kernel support)/(valid count); windows
with no valid input produce a literal 0 (no bias) and stay masked. The mask is
a constant: no gradient flows through the mask path, and masked-out inputs
cannot leak into the output.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import ContractError, DimensionError, ParamStore, Tensor, kaiming_uniform
from .layers import BatchNorm2dLayer, apply_activation


def check_mask(mask: np.ndarray, feature_shape=None):
    """MaskMap contract: (n,1,h,w), exactly 0/1, spatially matching its feature map."""
    if mask.ndim != 4 or mask.shape[1] != 1:
        raise DimensionError(f"mask must have shape (n,1,h,w), got {mask.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError("mask must be binary (elements exactly 0 or 1)")
    if feature_shape is not None:
        n, _, h, w = feature_shape
        if mask.shape[0] != n or mask.shape[2:] != (h, w):
            raise DimensionError(
                f"mask shape {mask.shape} does not match feature batch/spatial axes of {feature_shape}"
            )


def mask_update_only(mask: np.ndarray, k, stride, padding) -> np.ndarray:
    """New validity map: 1 wherever the k*k window contains any valid element."""
    check_mask(mask)
    counts = ops.window_valid_count(mask, k, stride, padding)
    return (counts > 0).astype(mask.dtype)


class PartialConvLayer:
    """Masked convolution layer with optional normalization and activation."""

    def __init__(self, store: ParamStore, name, cin, cout, k, stride, padding, rng,
                 norm=False, activation=None):
        self.name = name
        self.cin = cin
        self.k = k
        self.stride = stride
        self.padding = padding
        self.weight = store.add_param(
            f"{name}.weight", kaiming_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k)
        )
        self.bias = store.add_param(f"{name}.bias", np.zeros(cout))
        self.bn = BatchNorm2dLayer(store, f"{name}.bn", cout) if norm else None
        self.activation = activation

    @property
    def support(self):
        """Kernel support count over the full (k, k, cin) window."""
        return self.k * self.k * self.cin

    def __call__(self, feats: Tensor, mask: np.ndarray):
        out, mask_out = partial_conv_forward(feats, mask, self)
        if self.bn is not None:
            out = self.bn(out)
        return apply_activation(out, self.activation), mask_out


def partial_conv_forward(feats: Tensor, mask: np.ndarray, layer: PartialConvLayer):
    """Renormalized masked convolution plus mask update.

    Where the window holds any valid pixel: W^T(f*m) * support/valid + b.
    Elsewhere literal 0. Returns (features, updated mask).
    """
    feats = ops.as_tensor(feats)
    if feats.data.ndim != 4:
        raise DimensionError(f"partial conv input must be rank 4, got {feats.data.shape}")
    check_mask(mask, feats.data.shape)
    if feats.data.shape[1] != layer.cin:
        raise DimensionError(
            f"partial conv channel axis mismatch: input has {feats.data.shape[1]}, layer expects {layer.cin}"
        )
    mask = mask.astype(feats.data.dtype, copy=False)
    counts = ops.window_valid_count(mask, layer.k, layer.stride, layer.padding)
    mask_out = (counts > 0).astype(feats.data.dtype)
    # support/valid over the full k*k*cin window; single-channel mask broadcast
    # across channels, so the cin factor cancels
    with np.errstate(divide="ignore"):
        ratio = np.where(counts > 0, layer.support / (counts * layer.cin), 0.0)
    ratio = ratio.astype(feats.data.dtype)

    masked = ops.mul(feats, mask)
    raw = ops.conv2d(masked, layer.weight, None, layer.stride, layer.padding)
    scaled = ops.mul(raw, ratio)
    cout = layer.weight.data.shape[0]
    biased = ops.add(scaled, ops.reshape(layer.bias, (1, cout, 1, 1)))
    out = ops.mul(biased, mask_out)
    return out, mask_out
