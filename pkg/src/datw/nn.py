"""Parameter containers for convolutional layers built on :mod:`datw.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Node


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], dtype) -> np.ndarray:
    """He (fan-in, normal) initialization for a conv weight."""
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Module:
    """Minimal named-parameter container."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Node]]:
        for key, value in vars(self).items():
            if isinstance(value, Node) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for key, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Node]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and running statistic, keyed by stable names."""
        state = {name: p.value.copy() for name, p in self.named_parameters()}
        for name, bn in self.named_buffers():
            state[name + ".running_mean"] = bn.running_mean.copy()
            state[name + ".running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self.state_dict())
        missing = expected - set(state)
        unknown = set(state) - expected
        if missing or unknown:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, "
                           f"unexpected {sorted(unknown)}")
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"parameter {name!r}: stored shape "
                                 f"{state[name].shape} != model shape {p.shape}")
            p.value = np.array(state[name], dtype=p.dtype)
        for name, bn in self.named_buffers():
            bn.running_mean = np.array(state[name + ".running_mean"],
                                       dtype=bn.running_mean.dtype)
            bn.running_var = np.array(state[name + ".running_var"],
                                      dtype=bn.running_var.dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: tuple[int, int],
                 rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        kh, kw = kernel
        w = np.zeros((cout, cin, kh, kw), dtype) if zero else he_normal(
            rng, (cout, cin, kh, kw), dtype)
        self.weight = ad.parameter(w, dtype=dtype)
        self.bias = ad.parameter(np.zeros(cout), dtype=dtype)
        self.padding = (kh // 2, kw // 2)

    def __call__(self, x: Node) -> Node:
        return ad.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        self.gamma = ad.parameter(np.ones(channels), dtype=dtype)
        self.beta = ad.parameter(np.zeros(channels), dtype=dtype)
        self.stats = BatchNormState.create(channels, momentum, eps, dtype)

    def __call__(self, x: Node, training: bool) -> Node:
        return ad.batch_norm(x, self.gamma, self.beta, self.stats, training)


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 momentum: float, eps: float, dtype):
        self.conv = Conv2d(cin, cout, (kernel, kernel), rng, dtype)
        self.bn = BatchNorm2d(cout, momentum, eps, dtype)

    def __call__(self, x: Node, training: bool) -> Node:
        return ad.relu(self.bn(self.conv(x), training))
