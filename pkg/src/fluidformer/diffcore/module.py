"""Parameter registry and the few dense layers the network needs."""

from __future__ import annotations

import zlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter path) so init is independent of build order."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Module:
    """Tree of named parameters, buffers and submodules.

    Parameters declare their initializer at creation; :meth:`initialize` fills
    them from a seed.  Buffers are non-learnable arrays (e.g. running statistics)
    that are still checkpointed.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._init: dict[str, tuple] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def __setattr__(self, key, value):
        if isinstance(value, Module) and "_children" in self.__dict__:
            self._children[key] = value
        object.__setattr__(self, key, value)

    def add_param(self, name: str, shape, init="uniform", fan_in: int | None = None) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self._params[name] = t
        self._init[name] = (init, fan_in)
        object.__setattr__(self, name, t)
        return t

    def add_buffer(self, name: str, value) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        object.__setattr__(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def _named_inits(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p, self._init[name]
        for cname, child in self._children.items():
            yield from child._named_inits(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by path, parameters first."""
        out = {k: p.data for k, p in self.named_parameters()}
        out.update({"buffer:" + k: b for k, b in self.named_buffers()})
        return out

    def set_buffer(self, path: str, value) -> None:
        *parts, leaf = path.split(".")
        mod = self
        for p in parts:
            mod = mod._children[p]
        mod._buffers[leaf][...] = value

    def initialize(self, seed: int) -> "Module":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, constant fills elsewhere."""
        for path, p, (kind, fan_in) in self._named_inits():
            if kind == "uniform":
                bound = 1.0 / np.sqrt(fan_in)
                p.data[...] = named_rng(seed, path).uniform(-bound, bound, p.shape)
            elif kind == "zeros":
                p.data[...] = 0.0
            elif kind == "ones":
                p.data[...] = 1.0
            else:
                raise ValueError(f"unknown initializer {kind!r} for {path}")
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.size for _, p in self.named_parameters()))


class Linear(Module):
    """``x @ W`` without bias; W has shape (in, out)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.add_param("weight", (c_in, c_out), fan_in=c_in)

    def __call__(self, x):
        return T.matmul(x, self.weight)


class BatchStatNorm(Module):
    """Batch norm over the particle axis with affine scale/shift.

    In training mode the batch statistics are used and the running estimates are
    updated as ``running = momentum * running + (1 - momentum) * batch`` unless
    ``update_stats`` is off.  In eval mode the running estimates are used.
    """

    def __init__(self, channels: int, momentum: float = 0.9):
        super().__init__()
        self.momentum = momentum
        self.update_stats = True
        self.add_param("scale", (channels,), init="ones")
        self.add_param("shift", (channels,), init="zeros")
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x):
        x = T.as_tensor(x)
        if self.training:
            xhat, mu, var = T.batch_stat_norm(x)
            if self.update_stats and x.shape[0] > 0:
                rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
                rm *= self.momentum
                rm += (1.0 - self.momentum) * mu
                rv *= self.momentum
                rv += (1.0 - self.momentum) * var
        else:
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            denom = np.where(rv < 1e-12, np.sqrt(rv + 1e-5), np.sqrt(rv))
            xhat = (x - rm) / denom
        return xhat * self.scale + self.shift


def set_update_stats(module: Module, flag: bool) -> None:
    if isinstance(module, BatchStatNorm):
        module.update_stats = flag
    for c in module._children.values():
        set_update_stats(c, flag)
