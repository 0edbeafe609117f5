"""Parameters, a minimal module registry and the basic layers."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor, relu


class Parameter(Tensor):
    """A learnable tensor. ``name`` is filled in by the owning module tree."""

    def __init__(self, data, init_spec: str = "given", name: str = ""):
        arr = np.array(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        super().__init__(arr, requires_grad=True)
        self.name = name
        self.init_spec = init_spec

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.shape}, init={self.init_spec})"


def init_array(rng: np.random.Generator, shape, spec: str, fan_in: int | None = None,
               dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Draw an initial value. ``spec`` is one of zeros, ones, uniform, lecun, kaiming, normal:<std>."""
    if spec == "zeros":
        return np.zeros(shape, dtype=dtype)
    if spec == "ones":
        return np.ones(shape, dtype=dtype)
    if spec == "uniform":
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if spec == "lecun":
        bound = np.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if spec == "kaiming":
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if spec.startswith("normal:"):
        std = float(spec.split(":", 1)[1])
        return (rng.standard_normal(size=shape) * std).astype(dtype)
    raise ValueError(f"unknown initializer {spec!r}")


class Module:
    """Base class; parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Dotted paths to every parameter; a tensor reachable twice is listed once."""
        seen: set[int] = set()
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            for name, p in _walk(value, f"{prefix}{key}"):
                if id(p) not in seen:
                    seen.add(id(p))
                    yield name, p

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> "Module":
        seen = set()
        for name, p in self.named_parameters(prefix):
            if name in seen:
                raise ValueError(f"duplicate parameter path {name}")
            seen.add(name)
            p.name = name
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            if p.shape != tuple(state[name].shape):
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{path}.{k}")


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, padding: int | None = None,
                 bias: bool = True, init: str = "uniform", rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = cin * kernel * kernel
        self.weight = Parameter(init_array(rng, (cout, cin, kernel, kernel), init, fan_in, dtype), init)
        self.bias = Parameter(np.zeros(cout, dtype=dtype), "zeros") if bias else None

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, init: str = "uniform",
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(init_array(rng, (fout, fin), init, fin, dtype), init)
        self.bias = Parameter(np.zeros(fout, dtype=dtype), "zeros") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class FrozenAffine(Module):
    """Per-channel scale and shift; stands in for batch norm without running statistics."""

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.scale = Parameter(np.ones(channels, dtype=dtype), "ones")
        self.shift = Parameter(np.zeros(channels, dtype=dtype), "zeros")

    def forward(self, x: Tensor) -> Tensor:
        c = self.scale.shape[0]
        return x * self.scale.reshape(1, c, 1, 1) + self.shift.reshape(1, c, 1, 1)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return relu(x)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x
