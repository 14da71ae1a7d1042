"""Layer objects holding parameters and batch-norm state."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from shakedrop import ops
from shakedrop.autograd import Parameter, Tensor


class Module:
    """Base class: parameters and sub-modules are discovered in attribute order."""

    training: bool = True

    def children(self) -> Iterator["Module"]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield item

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children():
            yield from child.modules()

    def parameters(self) -> Iterator[Parameter]:
        for value in vars(self).values():
            if isinstance(value, Parameter):
                yield value
        for child in self.children():
            yield from child.parameters()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Convert every parameter and buffer to ``dtype``."""
        for m in self.modules():
            for value in vars(m).values():
                if isinstance(value, Parameter):
                    value.astype(dtype)
            if isinstance(m, BatchNorm2d):
                m.state.running_mean = m.state.running_mean.astype(dtype)
                m.state.running_var = m.state.running_var.astype(dtype)
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Conv2d(Module):
    """3×3 (or k×k) convolution, same padding.

    With ``downsample=True`` the output keeps every second row and column,
    which equals a stride-2 convolution on even-sized inputs.
    """

    unit = "Conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 downsample: bool = False, groups: int = 1):
        if in_channels % groups or out_channels % groups:
            raise ValueError("channels must be divisible by groups")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.downsample = downsample
        self.groups = groups
        self.weight = Parameter(np.zeros((out_channels, in_channels // groups, kernel_size, kernel_size)))

    def forward(self, x: Tensor) -> Tensor:
        out = ops.conv2d(x, self.weight, stride=1, padding=self.kernel_size // 2, groups=self.groups)
        return ops.subsample2d(out) if self.downsample else out

    def __repr__(self) -> str:
        ds = ", downsample" if self.downsample else ""
        g = f", groups={self.groups}" if self.groups > 1 else ""
        return f"Conv2d({self.in_channels}, {self.out_channels}, k={self.kernel_size}{ds}{g})"


class BatchNorm2d(Module):
    unit = "BN"

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.channels = channels
        self.gamma = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))
        self.state = ops.BatchNormState.fresh(channels, momentum, eps)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.shift, self.state, self.training)

    def reset_running_stats(self) -> None:
        self.state.running_mean = np.zeros(self.channels)
        self.state.running_var = np.ones(self.channels)

    def __repr__(self) -> str:
        return f"BatchNorm2d({self.channels})"


class ReLU(Module):
    unit = "ReLU"

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(x)

    def __repr__(self) -> str:
        return "ReLU()"


class Linear(Module):
    def __init__(self, in_features: int, out_features: int):
        self.weight = Parameter(np.zeros((in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def caption(self) -> str:
        return "-".join(layer.unit for layer in self.layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]
