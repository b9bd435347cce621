"""Parameterized layer wrappers registering their tensors in a ParamStore."""

from __future__ import annotations

import numpy as np

from . import ops
from .autodiff import ContractError, ParamStore, Tensor, kaiming_uniform


def apply_activation(x: Tensor, kind):
    if kind is None or kind == "none":
        return x
    if kind == "relu":
        return ops.relu(x)
    if kind == "leaky_relu":
        return ops.leaky_relu(x, 0.2)
    raise ContractError(f"unknown activation {kind!r}")


class BatchNorm2dLayer:
    """Channel normalization with train/eval/frozen switching.

    Frozen mode normalizes by running statistics and blocks gamma/beta
    updates entirely (no gradient accumulation, optimizer skips them).
    """

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.name = name
        self.gamma = store.add_param(f"{name}.gamma", np.ones(channels))
        self.beta = store.add_param(f"{name}.beta", np.zeros(channels))
        self.running_mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = store.add_buffer(f"{name}.running_var", np.ones(channels))
        self.mode = "train"

    def set_mode(self, mode):
        if mode not in ("train", "eval", "frozen"):
            raise ContractError(f"unknown batch norm mode {mode!r}")
        self.mode = mode
        frozen = mode == "frozen"
        self.gamma.frozen = frozen
        self.beta.frozen = frozen

    def __call__(self, x):
        return ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, mode=self.mode
        )


class Conv2dLayer:
    def __init__(self, store, name, cin, cout, k, stride, padding, rng, norm=False, activation=None):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = store.add_param(
            f"{name}.weight", kaiming_uniform(rng, (cout, cin, k, k), fan_in=cin * k * k)
        )
        self.bias = store.add_param(f"{name}.bias", np.zeros(cout))
        self.bn = BatchNorm2dLayer(store, f"{name}.bn", cout) if norm else None
        self.activation = activation

    def __call__(self, x):
        y = ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.bn is not None:
            y = self.bn(y)
        return apply_activation(y, self.activation)


class TransposedConv2dLayer:
    def __init__(self, store, name, cin, cout, k, stride, padding, rng, norm=False, activation=None):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.weight = store.add_param(
            f"{name}.weight", kaiming_uniform(rng, (cin, cout, k, k), fan_in=cin * k * k)
        )
        self.bias = store.add_param(f"{name}.bias", np.zeros(cout))
        self.bn = BatchNorm2dLayer(store, f"{name}.bn", cout) if norm else None
        self.activation = activation

    def __call__(self, x):
        y = ops.transposed_conv2d(x, self.weight, self.bias, self.stride, self.padding)
        if self.bn is not None:
            y = self.bn(y)
        return apply_activation(y, self.activation)


def norm_layer_of(layer):
    """The BatchNorm2dLayer attached to a conv-style layer, or None."""
    return getattr(layer, "bn", None)
