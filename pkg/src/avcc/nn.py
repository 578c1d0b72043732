"""Minimal layer system on top of the tensor ops.

A Module discovers its parameters (Tensor attributes) and buffers (ndarray
attributes, e.g. batchnorm running statistics) by walking its attribute dict,
so checkpointing and optimizers see a stable, construction-ordered naming.

Initialization is Kaiming fan-in scaling for conv/linear weights with zero
bias; every layer draws from its own generator spawned off a SeedSequence so
models are reproducible and per-layer streams are independent.
"""

from __future__ import annotations

import math
import threading

import numpy as np

from . import ops
from .tensor import Tensor

_BN_LOCK = threading.Lock()


def seed_stream(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


class Module:
    """Base class giving named parameter/buffer traversal and train/eval mode."""

    def __init__(self):
        self.training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def set_training(self, flag: bool) -> None:
        for m in self.modules():
            m.training = flag

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()


class Conv2d(Module):
    def __init__(self, c_in, c_out, ksize, seed, stride=(1, 1), padding=(0, 0),
                 bias=True, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        fan_in = c_in * ksize * ksize
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(c_out, c_in, ksize, ksize))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, d_in, d_out, seed, dtype=np.float64):
        super().__init__()
        rng = np.random.default_rng(seed)
        std = math.sqrt(2.0 / d_in)
        w = rng.normal(0.0, std, size=(d_out, d_in))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    """Spatial batchnorm with running statistics (momentum 0.9, eps 1e-5).

    Each forward pass normalizes one (c, h, w) sample over its spatial axes;
    running buffers are shared state, so their update is serialized when
    samples run on multiple threads.
    """

    MOMENTUM = 0.9
    EPS = 1e-5

    def __init__(self, channels, dtype=np.float64):
        super().__init__()
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x):
        if self.training:
            flat = x.data.reshape(x.shape[0], -1)
            inv_n = 1.0 / flat.shape[1]
            mu = np.einsum("ci->c", flat) * inv_n
            var = np.einsum("ci,ci->c", flat, flat) * inv_n - mu * mu
            np.maximum(var, 0.0, out=var)
            with _BN_LOCK:
                self.running_mean *= self.MOMENTUM
                self.running_mean += (1.0 - self.MOMENTUM) * mu
                self.running_var *= self.MOMENTUM
                self.running_var += (1.0 - self.MOMENTUM) * var
            return ops.batchnorm2d(x, self.gamma, self.beta, mu, var,
                                   True, self.EPS)
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean,
                               self.running_var, False, self.EPS)


class Dropout(Module):
    """Inverted dropout whose stream can be rekeyed per sample.

    The generator lives in thread-local storage so concurrent per-sample
    forward passes draw independent, deterministic masks.
    """

    def __init__(self, rate, seed):
        super().__init__()
        self.rate = rate
        self._entropy = seed_stream(seed).entropy
        self._local = threading.local()

    def rekey(self, *key) -> None:
        self._local.rng = np.random.default_rng(
            np.random.SeedSequence((self._entropy,) + tuple(int(k) for k in key))
        )

    def _rng(self) -> np.random.Generator:
        rng = getattr(self._local, "rng", None)
        if rng is None:
            rng = np.random.default_rng(np.random.SeedSequence(self._entropy))
            self._local.rng = rng
        return rng

    def __call__(self, x):
        if not self.training or self.rate == 0.0:
            return ops.dropout(x, self.rate, None, False)
        return ops.dropout(x, self.rate, self._rng(), self.training)


class ConvBnRelu(Module):
    def __init__(self, c_in, c_out, ksize, seed, stride=(1, 1), padding=(0, 0),
                 dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, ksize, seed, stride, padding,
                           bias=False, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x):
        return ops.relu(self.bn(self.conv(x)))


def rekey_dropout(module: Module, *key) -> None:
    """Give every dropout layer a stream derived from (its seed, key...)."""
    ordinal = 0
    for m in module.modules():
        if isinstance(m, Dropout):
            m.rekey(*key, ordinal)
            ordinal += 1
