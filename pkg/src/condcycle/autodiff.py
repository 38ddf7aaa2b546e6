"""Tape-based reverse-mode automatic differentiation on top of numpy.

Every differentiable op records a node on the active :class:`Tape` holding
the input node ids, a backward rule and exactly the arrays that rule needs.
Besides the usual single sweep (:func:`backward`) the tape supports a split
sweep: :func:`backward_to_cut` runs the reverse pass only down to a set of
intermediate tensors, caches their gradients and releases everything
recorded after them; :func:`resume_backward` injects the cached gradients
and finishes the sweep.  Both routes execute the same arithmetic in the same
order, so leaf gradients agree bitwise.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = [np.float32]
_TAPE_STACK: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when an op receives incompatible shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class GradientError(RuntimeError):
    pass


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype new tensors are created with."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


def default_dtype():
    return _DEFAULT_DTYPE[-1]


def current_tape() -> Optional["Tape"]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-d array of reals with an optional handle onto a tape node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[int] = None
        self.tape: Optional[Tape] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const_like(x, ref: np.ndarray) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=ref.dtype))


def _nbytes(saved) -> int:
    n = 0
    for a in saved:
        if isinstance(a, np.ndarray):
            n += a.nbytes
        elif isinstance(a, tuple):
            n += _nbytes(a)
    return n


@dataclass
class Node:
    op: str
    inputs: tuple  # node id per input or None
    backward: Optional[Callable]
    saved: Optional[tuple]
    shape: tuple
    saved_bytes: int = 0
    leaf: Optional[Tensor] = None


class Tape:
    """Append-only record of differentiable ops.

    ``live_bytes`` counts saved activations plus gradient buffers still held;
    ``peak_bytes`` is its high-water mark.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._leaf_ids: dict[int, int] = {}
        self.pending: dict[int, np.ndarray] = {}
        self.live_bytes = 0
        self.peak_bytes = 0
        self.released_after: Optional[int] = None

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def _bump(self, delta: int) -> None:
        self.live_bytes += delta
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes

    def leaf_id(self, t: Tensor) -> int:
        nid = self._leaf_ids.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(Node("leaf", (), None, None, t.shape, 0, t))
            self._leaf_ids[id(t)] = nid
        return nid

    def record(self, op, inputs, backward, saved, shape) -> int:
        nbytes = _nbytes(saved)
        nid = len(self.nodes)
        self.nodes.append(Node(op, inputs, backward, saved, shape, nbytes))
        self._bump(nbytes)
        return nid

    def _add_grad(self, grads: dict, nid: int, g: np.ndarray) -> None:
        prev = grads.get(nid)
        if prev is None:
            grads[nid] = g
            self._bump(g.nbytes)
        else:
            grads[nid] = prev + g

    def _sweep(self, grads: dict, hi: int, lo: int, touched: dict) -> None:
        """Process node ids hi, hi-1, ..., lo (inclusive) in reverse order."""
        for nid in range(hi, lo - 1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.leaf is not None:
                leaf = node.leaf
                gl = g.astype(leaf.data.dtype, copy=False) if g.dtype != leaf.data.dtype else g
                leaf.grad = gl.copy() if leaf.grad is None else leaf.grad + gl
                touched[id(leaf)] = leaf
                continue
            if node.saved is None and node.backward is None:
                raise GradientError(f"node {nid} ({node.op}) was released before its gradient arrived")
            in_grads = node.backward(g, node.saved)
            for src, ig in zip(node.inputs, in_grads):
                if src is None or ig is None:
                    continue
                self._add_grad(grads, src, ig)

    def _release_node(self, nid: int) -> None:
        node = self.nodes[nid]
        if node.saved is not None:
            self._bump(-node.saved_bytes)
            node.saved = None
            node.backward = None

    def release(self) -> None:
        """Drop every saved activation and gradient buffer."""
        for nid in range(len(self.nodes)):
            self._release_node(nid)
        for g in self.pending.values():
            self._bump(-g.nbytes)
        self.pending = {}


def _root_check(loss: Tensor) -> Tape:
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None or loss.node is None:
        raise GradientError("loss is not recorded on a tape")
    return loss.tape


def backward(loss: Tensor, release: bool = True) -> dict:
    """Single reverse sweep from ``loss``; accumulates into ``leaf.grad``.

    Returns a mapping leaf tensor -> accumulated gradient.
    """
    tape = _root_check(loss)
    grads: dict[int, np.ndarray] = {}
    tape._add_grad(grads, loss.node, np.ones(loss.shape, dtype=loss.dtype))
    touched: dict = {}
    tape._sweep(grads, loss.node, 0, touched)
    tape.pending = grads
    if release:
        tape.release()
    return {t: t.grad for t in touched.values()}


@dataclass
class CutSet:
    """Intermediate tensors at which the reverse sweep is paused."""

    tensors: list
    cached_grads: Optional[list] = None
    _tape: Optional[Tape] = field(default=None, repr=False)
    _touched: dict = field(default_factory=dict, repr=False)

    @property
    def node_ids(self) -> list:
        return [t.node for t in self.tensors]


def backward_to_cut(loss: Tensor, cut: CutSet) -> CutSet:
    """Round one: sweep from ``loss`` down to the cut and cache its gradients.

    Every node recorded after the last cut node is released once the sweep
    passes it; gradients that already reached earlier nodes stay pending.
    """
    tape = _root_check(loss)
    ids = []
    for t in cut.tensors:
        if t.tape is not tape or t.node is None:
            raise GradientError("cut tensor is not on the loss tape")
        ids.append(t.node)
    hi_cut = max(ids)
    if loss.node <= hi_cut:
        raise GradientError("loss must be recorded after every cut node")
    grads: dict[int, np.ndarray] = {}
    tape._add_grad(grads, loss.node, np.ones(loss.shape, dtype=loss.dtype))
    touched: dict = {}
    tape._sweep(grads, loss.node, hi_cut + 1, touched)
    cached = []
    for nid in ids:
        g = grads.get(nid)
        if g is None:
            raise GradientError(f"cut node {nid} is unreachable from the loss")
        cached.append(np.array(g, copy=True))
    # release the segment above the cut
    for nid in range(hi_cut + 1, len(tape.nodes)):
        tape._release_node(nid)
        g = grads.pop(nid, None)
        if g is not None:
            tape._bump(-g.nbytes)
    for nid in ids:
        g = grads.pop(nid)
        tape._bump(-g.nbytes)
    for g in cached:
        tape._bump(g.nbytes)
    tape.pending = grads
    tape.released_after = hi_cut
    cut.cached_grads = cached
    cut._tape = tape
    cut._touched = touched
    return cut


def resume_backward(cut: CutSet, release: bool = True) -> dict:
    """Round two: inject the cached cut gradients and finish the sweep."""
    if cut.cached_grads is None or cut._tape is None:
        raise GradientError("resume_backward called before backward_to_cut")
    tape = cut._tape
    grads = tape.pending
    for t, g in zip(cut.tensors, cut.cached_grads):
        tape._add_grad(grads, t.node, np.array(g, copy=True))
        tape._bump(-g.nbytes)
    touched = dict(cut._touched)
    tape._sweep(grads, max(cut.node_ids), 0, touched)
    tape.pending = grads
    if release:
        tape.release()
    return {t: t.grad for t in touched.values()}


# ---------------------------------------------------------------- recording


def _make(op: str, out: np.ndarray, inputs: Sequence[Tensor], bw, saved=()) -> Tensor:
    res = Tensor._wrap(out)
    tape = current_tape()
    if tape is None:
        return res
    ids = []
    any_grad = False
    for t in inputs:
        if t.requires_grad:
            if t.node is not None and t.tape is tape:
                ids.append(t.node)
            elif t.node is None:
                ids.append(tape.leaf_id(t))
            else:
                raise GradientError(f"{op}: input belongs to a different tape")
            any_grad = True
        else:
            ids.append(None)
    if not any_grad:
        return res
    res.node = tape.record(op, tuple(ids), bw, tuple(saved), out.shape)
    res.tape = tape
    res.requires_grad = True
    return res


def _needs(t: Tensor) -> bool:
    return t.requires_grad and current_tape() is not None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op, a: np.ndarray, b: np.ndarray) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    _bshape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g, s: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    _bshape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g, s: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    _bshape("mul", a.data, b.data)
    sa, sb = a.shape, b.shape
    ga, gb = _needs(a), _needs(b)
    saved = (b.data if ga else None, a.data if gb else None)

    def bw(g, s):
        return (_unbroadcast(g * s[0], sa) if s[0] is not None else None,
                _unbroadcast(g * s[1], sb) if s[1] is not None else None)

    return _make("mul", a.data * b.data, (a, b), bw, saved)


def div(a, b) -> Tensor:
    a = as_tensor(a) if not isinstance(b, Tensor) else _const_like(a, b.data)
    b = _const_like(b, a.data)
    _bshape("div", a.data, b.data)
    sa, sb = a.shape, b.shape
    out = a.data / b.data
    gb = _needs(b)

    def bw(g, s):
        bd, o = s
        return (_unbroadcast(g / bd, sa),
                _unbroadcast(-g * o / bd, sb) if o is not None else None)

    return _make("div", out, (a, b), bw, (b.data, out if gb else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g, s: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make("pow", a.data ** p, (a,),
                 lambda g, s: (g * p * s[0] ** (p - 1.0),), (a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g, s: (g * s[0],), (out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g, s: (g / s[0],), (a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g, s: (g * 0.5 / s[0],), (out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0)
    return _make("relu", out, (a,), lambda g, s: (g * (s[0] > 0),), (out,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g, s: (g * s[0] * (1 - s[0]),), (out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    return _make("softplus", out, (a,), lambda g, s: (g * _sigmoid(s[0]),), (a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g, s: (g * (1 - s[0] * s[0]),), (out,))


# ---------------------------------------------------------------- reductions and shape


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g, s):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([shape[i] for i in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bw(g, s):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bw)


def amax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; ties share the gradient evenly."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.max(a.data, axis=axes, keepdims=True)
    hit = (a.data == out)
    weight = hit / hit.sum(axis=axes, keepdims=True)
    res = out if keepdims else np.squeeze(out, axis=axes)

    def bw(g, s):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * s[0],)

    return _make("amax", np.asarray(res), (a,), bw, (weight.astype(a.dtype),))


def amin(a, axis=None, keepdims=False) -> Tensor:
    return neg(amax(neg(a), axis, keepdims))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _make("reshape", out, (a,), lambda g, s: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g, s: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", old, tuple(shape)) from None
    return _make("broadcast", out, (a,), lambda g, s: (_unbroadcast(g, old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g, s):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, ts, bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return concat([expand_dims(t, axis) for t in ts], axis=axis)


def expand_dims(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shape = list(a.shape)
    ax = axis % (a.ndim + 1)
    shape.insert(ax, 1)
    return reshape(a, tuple(shape))


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]
    basic = _is_basic(index)

    def bw(g, s):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", out, (a,), bw)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def take(a, idx: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    shape = a.shape
    axis = axis % a.ndim
    idx = np.asarray(idx)
    out = np.take(a.data, idx, axis=axis)

    def bw(g, s):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make("take", out, (a,), bw, (idx,))


def pad(a, widths, mode: str = "constant") -> Tensor:
    """Pad with zeros (``constant``) or by repeating the border (``edge``)."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    if len(widths) != a.ndim:
        raise ShapeError("pad", a.shape, detail=f"{len(widths)} pad widths")
    if mode == "constant":
        out = np.pad(a.data, widths)
        sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
        return _make("pad", out, (a,), lambda g, s: (g[sl],))
    if mode == "edge":
        res = a
        for ax, (lo, hi) in enumerate(widths):
            if lo == 0 and hi == 0:
                continue
            n = a.shape[ax]
            idx = np.clip(np.arange(-lo, n + hi), 0, n - 1)
            res = take(res, idx, ax)
        return res
    raise ValueError(f"unknown pad mode {mode!r}")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    ga, gb = _needs(a), _needs(b)
    saved = (b.data if ga else None, a.data if gb else None)

    def bw(g, s):
        bd, ad = s
        da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), sa) if bd is not None else None
        db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb) if ad is not None else None
        return da, db

    return _make("matmul", a.data @ b.data, (a, b), bw, saved)


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True) + eps)
    out = a.data / n

    def bw(g, s):
        x, nn = s
        dot = np.sum(g * x, axis=axis, keepdims=True)
        return (g / nn - x * dot / (nn ** 3),)

    return _make("l2_normalize", out, (a,), bw, (a.data, n))


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    # (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input, OIHW weights, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    p = padding
    ho = (h + 2 * p - kh) // stride + 1
    wo = (wd + 2 * p - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError("conv2d", w.shape, b.shape, detail="bias")
        out = out + b.data.reshape(1, o, 1, 1)
        inputs.append(b)
    out = np.ascontiguousarray(out)
    gx, gw = _needs(x), _needs(w)

    def bw(g, s):
        xp_, wmat_ = s
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = None
        if xp_ is not None:
            dw = (gmat.T @ _im2col(xp_, kh, kw, stride, ho, wo)).reshape(w.shape)
        dx = None
        if wmat_ is not None:
            dcols = (gmat @ wmat_).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    saved = (xp if gw else None, wmat if gx else None)
    return _make("conv2d", out, inputs, bw, saved)


# ---------------------------------------------------------------- bilinear sampling


def grid_sample_bilinear(plane, uv) -> Tensor:
    """Sample a ``(C, H, W)`` plane at ``(N, 2)`` coordinates in [-1, 1]^2.

    ``uv[:, 0]`` runs along the width and ``uv[:, 1]`` along the height;
    -1 and 1 land exactly on the first and last texel centers.  Coordinates
    outside the square are clamped to the border.  Returns ``(N, C)``.
    """
    plane, uv = as_tensor(plane), as_tensor(uv)
    if plane.ndim != 3 or uv.ndim != 2 or uv.shape[1] != 2:
        raise ShapeError("grid_sample_bilinear", plane.shape, uv.shape)
    c, h, w = plane.shape
    if h < 2 or w < 2:
        raise ShapeError("grid_sample_bilinear", plane.shape, uv.shape, detail="plane must be at least 2x2")
    u = np.clip(uv.data[:, 0], -1, 1)
    v = np.clip(uv.data[:, 1], -1, 1)
    px = (u + 1) * 0.5 * (w - 1)
    py = (v + 1) * 0.5 * (h - 1)
    x0 = np.minimum(np.floor(px).astype(np.int64), w - 2)
    y0 = np.minimum(np.floor(py).astype(np.int64), h - 2)
    fx = (px - x0).astype(plane.dtype)
    fy = (py - y0).astype(plane.dtype)
    i00 = y0 * w + x0
    flat = plane.data.reshape(c, h * w).T  # (HW, C)
    f00, f01 = flat[i00], flat[i00 + 1]
    f10, f11 = flat[i00 + w], flat[i00 + w + 1]
    wx1, wy1 = fx[:, None], fy[:, None]
    wx0, wy0 = 1 - wx1, 1 - wy1
    out = wy0 * (wx0 * f00 + wx1 * f01) + wy1 * (wx0 * f10 + wx1 * f11)
    gp, guv = _needs(plane), _needs(uv)
    inside_u = (np.abs(uv.data[:, 0]) < 1).astype(plane.dtype)
    inside_v = (np.abs(uv.data[:, 1]) < 1).astype(plane.dtype)

    def bw(g, s):
        i00_, fx_, fy_, corners = s
        dplane = duv = None
        if gp:
            hw = h * w
            idx = np.concatenate([i00_, i00_ + 1, i00_ + w, i00_ + w + 1])
            wts = np.concatenate([(1 - fx_) * (1 - fy_), fx_ * (1 - fy_), (1 - fx_) * fy_, fx_ * fy_])
            gt = np.empty((c, hw), dtype=g.dtype)
            for ch in range(c):
                gt[ch] = np.bincount(idx, weights=np.tile(g[:, ch], 4) * wts, minlength=hw)
            dplane = gt.reshape(c, h, w)
        if guv:
            a00, a01, a10, a11 = corners
            wx, wy = fx_[:, None], fy_[:, None]
            dpx = (1 - wy) * (a01 - a00) + wy * (a11 - a10)
            dpy = (1 - wx) * (a10 - a00) + wx * (a11 - a01)
            du = np.sum(g * dpx, axis=1) * 0.5 * (w - 1) * s_in[0]
            dv = np.sum(g * dpy, axis=1) * 0.5 * (h - 1) * s_in[1]
            duv = np.stack([du, dv], axis=1)
        return dplane, duv

    s_in = (inside_u, inside_v)
    corners = (f00, f01, f10, f11) if guv else None
    saved = (i00, fx, fy, corners)
    return _make("grid_sample", out, (plane, uv), bw, saved)


# ---------------------------------------------------------------- gradient checking


def finite_difference_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3,
                            n_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    Evaluated in float64.  ``n_coords`` restricts the comparison to a random
    subset of coordinates.  A non-finite value anywhere counts as failure
    (returns ``inf``).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        xt = Tensor(x0.copy(), requires_grad=True)
        with Tape():
            out = f(xt)
            if out.size != 1:
                raise GradientError("finite_difference_check needs a scalar function")
            if not np.all(np.isfinite(out.data)):
                return math.inf
            backward(out)
        analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
        flat = x0.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if n_coords is not None and n_coords < flat.size:
            coords = np.random.default_rng(seed).choice(flat.size, n_coords, replace=False)
        worst = 0.0
        ga = analytic.reshape(-1)
        for i in coords:
            xp_, xm_ = flat.copy(), flat.copy()
            xp_[i] += eps
            xm_[i] -= eps
            fp = float(f(Tensor(xp_.reshape(x0.shape))).data.reshape(-1)[0])
            fm = float(f(Tensor(xm_.reshape(x0.shape))).data.reshape(-1)[0])
            num = (fp - fm) / (2 * eps)
            if not (math.isfinite(num) and math.isfinite(ga[i])):
                return math.inf
            err = abs(ga[i] - num) / max(abs(ga[i]), 1e-6)
            worst = max(worst, err)
    return worst
