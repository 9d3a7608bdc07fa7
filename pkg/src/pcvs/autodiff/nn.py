"""Layer constructors: linear layers, MLPs, convolutions, residual stacks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype


def glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def _param(values, name=None):
    return Tensor(np.asarray(values, dtype=get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Container that discovers parameters from its attributes, in definition order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {', '.join(missing)}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype)

    def to_dtype(self, dtype):
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        self.weight = _param(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self.bias = _param(np.zeros(n_out))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. ``(5, 32, 32, 32, 1)``."""

    layer_widths: tuple
    activation: str = "leaky_relu"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(int(w) <= 0 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")


class MLP(Module):
    """Dense stack; no activation after the last layer."""

    def __init__(self, spec, rng):
        self.spec = spec
        widths = spec.layer_widths
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x):
        act = ops.relu if self.spec.activation == "relu" else ops.leaky_relu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class Conv2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=3, stride=1, padding="zeros", zero_init=False):
        shape = (kernel, kernel, c_in, c_out)
        if zero_init:
            w = np.zeros(shape)
        else:
            w = glorot_uniform(rng, shape, kernel * kernel * c_in, kernel * kernel * c_out)
        self.weight = _param(w)
        self.bias = _param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ResBlock(Module):
    """x + conv(relu(conv(x))); the second conv starts at zero."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, rng)
        self.conv2 = Conv2d(channels, channels, rng, zero_init=True)

    def forward(self, x):
        return x + self.conv2(ops.relu(self.conv1(x)))


class ResBlockStack(Module):
    def __init__(self, block_count, channels, rng):
        if block_count < 1:
            raise ValueError("block_count must be >= 1")
        self.blocks = [ResBlock(channels, rng) for _ in range(block_count)]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x
