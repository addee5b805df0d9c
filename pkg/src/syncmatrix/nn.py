"""Layers and the Adam optimiser built on :mod:`syncmatrix.autodiff`."""

from __future__ import annotations

from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal container: attributes that are Tensors with ``requires_grad``
    are parameters, numpy arrays registered in ``_buffers`` are state."""

    training = True

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = OrderedDict()

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        state: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                state[prefix + name] = value.data
            elif isinstance(value, Module):
                state.update(value.state_dict(f"{prefix}{name}."))
        for name, buf in self._buffers.items():
            state[prefix + name] = buf
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        own = self.state_dict(prefix)
        missing = [k for k in own if k not in state]
        if missing:
            raise KeyError(f"missing tensors: {missing}")
        for name, target in own.items():
            src = np.asarray(state[name])
            if src.shape != target.shape:
                raise ValueError(f"{name}: expected shape {target.shape}, got {src.shape}")
            target[...] = src

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, Tensor) and value.requires_grad:
                    value.data = value.data.astype(dtype)
            for name in list(m._buffers):
                m._buffers[name] = m._buffers[name].astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_out, n_in)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight.T) + self.bias


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, padding: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        fan_in = c_in * kernel * kernel
        shape = (c_out, c_in, kernel, kernel)
        self.padding = padding
        self.weight = Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.padding, bias=self.bias)


class BatchNorm(Module):
    """Per-channel batch norm; eps 1e-5, running-stat momentum 0.1."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self._buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self._buffers["running_var"] = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ad.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


ADAM_CHUNK = 1 << 15


class Adam:
    def __init__(self, params: List[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self._scratch: Dict[np.dtype, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params)

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        scale = self.lr * np.sqrt(c2) / c1
        eps = self.eps * np.sqrt(c2)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            g = p.grad.astype(p.data.dtype, copy=False).reshape(-1)
            w, m, v = p.data.reshape(-1), m.reshape(-1), v.reshape(-1)
            # cache-sized chunks: the ten passes below stay in L2
            for lo in range(0, w.size, ADAM_CHUNK):
                sl = slice(lo, lo + ADAM_CHUNK)
                self._update(w[sl], g[sl], m[sl], v[sl], scale, eps)

    def _update(self, w, g, m, v, scale, eps) -> None:
        if w.dtype not in self._scratch:
            self._scratch[w.dtype] = np.empty(ADAM_CHUNK, w.dtype)
        buf = self._scratch[w.dtype][: w.size]
        np.multiply(g, 1 - self.beta1, out=buf)
        m *= self.beta1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1 - self.beta2
        v *= self.beta2
        v += buf
        # lr/c1 * m / (sqrt(v/c2) + eps), with the corrections folded in
        np.sqrt(v, out=buf)
        buf += eps
        np.divide(m, buf, out=buf)
        buf *= scale
        w -= buf
