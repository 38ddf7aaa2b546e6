"""Parameter containers and the Adam optimizer."""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Owns named tensors; child modules and dicts of them are walked recursively."""

    def named_tensors(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            self._collect(out, f"{prefix}{key}", val)
        return out

    @staticmethod
    def _collect(out, name, val) -> None:
        if isinstance(val, Tensor):
            out[name] = val
        elif isinstance(val, Module):
            out.update(val.named_tensors(name + "."))
        elif isinstance(val, dict):
            for k, v in val.items():
                Module._collect(out, f"{name}.{k}", v)
        elif isinstance(val, (list, tuple)):
            for i, v in enumerate(val):
                Module._collect(out, f"{name}.{i}", v)

    def parameters(self) -> list:
        return [t for t in self.named_tensors().values() if t.requires_grad]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_tensors().items())

    def load_state_dict(self, state: dict) -> None:
        tensors = self.named_tensors()
        missing = set(tensors) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)}")
        for k, t in tensors.items():
            arr = np.asarray(state[k], dtype=t.data.dtype)
            if arr.shape != t.shape:
                raise ad.ShapeError("load_state_dict", t.shape, arr.shape, detail=k)
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self.named_tensors().values():
            t.grad = None

    def freeze(self) -> None:
        for t in self.named_tensors().values():
            t.requires_grad = False

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.named_tensors().values()))

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.named_tensors().values():
            if t.grad is not None:
                total += float(np.sum(np.square(t.grad, dtype=np.float64)))
        return total ** 0.5

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.named_tensors().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()


def param(arr, name=None) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float32), requires_grad=True, name=name)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, scale: float = 1.0):
        self.weight = param(he_normal(rng, (n_in, n_out), n_in) * scale)
        self.bias = param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3,
                 stride: int = 1, padding: int | None = None):
        self.weight = param(he_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        self.bias = param(np.zeros(c_out))
        self._stride = stride
        self._padding = k // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class Adam:
    """Adam with bias correction; weight decay 0 (coincides with AdamW at zero decay)."""

    def __init__(self, params, lr: float = 4e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float32, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(np.float32)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out
