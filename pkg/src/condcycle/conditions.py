"""Differentiable condition extractors: edge, sketch, depth and normal maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose

KINDS = ("edge", "sketch", "depth", "normal")

EDGE_SHARPNESS = 20.0
EDGE_THRESHOLD = 0.2
SKETCH_SEED = 0xC1C3D
_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass
class ConditionMap:
    kind: str
    data: Tensor  # (H, W) or (H, W, 3) for normals
    mask: Optional[np.ndarray] = None  # valid pixels, when meaningful

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown condition kind {self.kind!r}")

    @property
    def resolution(self) -> tuple:
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return 3 if self.kind == "normal" else 1


def _check_kind(kind: str) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown condition kind {kind!r}; expected one of {KINDS}")


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
SOBEL_Y = SOBEL_X.T.copy()


def filter2d(img: Tensor, kernel: np.ndarray) -> Tensor:
    """Correlate an ``(H, W)`` map with a fixed odd kernel, replicating borders."""
    k = kernel.shape[0]
    p = k // 2
    x = ad.reshape(img, (1, 1) + img.shape)
    x = ad.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), mode="edge")
    w = Tensor._wrap(kernel.astype(img.dtype).reshape(1, 1, k, k))
    y = ad.conv2d(x, w)
    return ad.reshape(y, img.shape)


def grayscale(image: Tensor) -> Tensor:
    return ad.sum_(image * _GRAY.astype(image.dtype), axis=-1)


def sobel_magnitude(gray: Tensor, eps: float = 1e-6) -> Tensor:
    """Gradient magnitude with Sobel kernels scaled so a unit step reads 1.0."""
    gx = filter2d(gray, SOBEL_X)
    gy = filter2d(gray, SOBEL_Y)
    return ad.sqrt(gx * gx + gy * gy + eps)


def f_canny(image: Tensor) -> ConditionMap:
    """Soft edge map: blur, Sobel magnitude, sigmoid threshold.

    Hysteresis and non-maximum suppression are left out so the map stays
    differentiable everywhere.
    """
    image = ad.as_tensor(image)
    g = filter2d(grayscale(image), gaussian_kernel(5, 1.0))
    m = sobel_magnitude(g)
    return ConditionMap("edge", ad.sigmoid(EDGE_SHARPNESS * (m - EDGE_THRESHOLD)))


class _SketchNet:
    """Frozen 3-layer CNN, weights drawn once from a fixed seed."""

    def __init__(self, seed: int = SKETCH_SEED, width: int = 8):
        rng = np.random.default_rng(seed)
        w1 = rng.standard_normal((width, 3, 3, 3))
        w1 -= w1.mean(axis=(1, 2, 3), keepdims=True)  # respond to contrast, not flat color
        self.w1 = w1 * np.sqrt(2.0 / 27) * 4.0
        self.b1 = np.zeros(width)
        self.w2 = rng.standard_normal((width, width, 3, 3)) * np.sqrt(1.0 / (width * 9))
        self.b2 = rng.standard_normal(width) * 0.1
        self.w3 = rng.standard_normal((1, width, 3, 3)) * np.sqrt(1.0 / (width * 9)) * 2.0
        self.b3 = np.array([-1.0])

    def __call__(self, image: Tensor) -> Tensor:
        dt = image.dtype
        x = ad.reshape(ad.transpose(image, (2, 0, 1)), (1, 3) + image.shape[:2])
        for w, b, act in ((self.w1, self.b1, ad.tanh), (self.w2, self.b2, ad.tanh), (self.w3, self.b3, None)):
            x = ad.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
            x = ad.conv2d(x, Tensor._wrap(w.astype(dt)), Tensor._wrap(b.astype(dt)))
            if act is not None:
                x = act(x)
        return ad.reshape(ad.sigmoid(x), image.shape[:2])

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in (self.w1, self.b1, self.w2, self.b2, self.w3, self.b3):
            h.update(a.tobytes())
        return h.hexdigest()


SKETCH_NET = _SketchNet()


def f_sketch(image: Tensor) -> ConditionMap:
    return ConditionMap("sketch", SKETCH_NET(ad.as_tensor(image)))


_BIG = 1e30


def f_norm(depth: Tensor, mask: np.ndarray) -> ConditionMap:
    """Min-max normalize depth over valid pixels; invalid pixels read 1 (far).

    A constant valid region maps to zeros.
    """
    depth = ad.as_tensor(depth)
    m = np.asarray(mask, dtype=bool)
    if m.shape != depth.shape:
        raise ad.ShapeError("f_norm", depth.shape, m.shape)
    if not m.any():
        raise ValueError("f_norm: validity mask is empty")
    mf = m.astype(depth.dtype)
    inv = 1 - mf
    lo = ad.amin(depth * mf + inv * _BIG)
    hi = ad.amax(depth * mf - inv * _BIG)
    span = hi - lo
    if float(span.data) <= 0:
        out = Tensor._wrap(inv.copy())
        if depth.requires_grad:
            out = depth * 0.0 + inv
        return ConditionMap("depth", out, m)
    out = (depth - lo) / span * mf + inv
    return ConditionMap("depth", out, m)


def _diff(x: Tensor, axis: int) -> Tensor:
    """Central differences along ``axis`` with one-sided ends."""
    n = x.shape[axis]

    def sl(a, b):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(a, b)
        return x[tuple(idx)]

    first = sl(1, 2) - sl(0, 1)
    last = sl(n - 1, n) - sl(n - 2, n - 1)
    mid = (sl(2, n) - sl(0, n - 2)) * 0.5
    return ad.concat([first, mid, last], axis=axis)


def backproject(depth: Tensor, pose: CameraPose) -> Tensor:
    """Camera-space points ``(H, W, 3)`` from a z-depth map, scaled by focal length.

    The constant scale keeps tangent vectors O(depth) without changing normals.
    """
    h, w = depth.shape
    f = pose.focal
    xn = ((np.arange(w) + 0.5 - 0.5 * w) / f).astype(depth.dtype)
    yn = (-(np.arange(h) + 0.5 - 0.5 * h) / f).astype(depth.dtype)
    dx = depth * xn[None, :] * f
    dy = depth * yn[:, None] * f
    dz = depth * (-f)
    return ad.stack([dx, dy, dz], axis=-1)


def f_d2n(depth: Tensor, pose: CameraPose) -> ConditionMap:
    """Camera-space unit normals from a z-depth map, facing the camera."""
    depth = ad.as_tensor(depth)
    if depth.shape != (pose.height, pose.width):
        pose = pose.with_resolution(depth.shape[1], depth.shape[0])
    pts = backproject(depth, pose)
    tu = _diff(pts, 1)
    tv = _diff(pts, 0)
    ax, ay, az = tv[..., 0], tv[..., 1], tv[..., 2]
    bx, by, bz = tu[..., 0], tu[..., 1], tu[..., 2]
    n = ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=-1)
    return ConditionMap("normal", ad.l2_normalize(n, axis=-1))


def f_cond(kind: str, image: Tensor) -> ConditionMap:
    """Image-based extractor for the 2D kinds."""
    if kind == "edge":
        return f_canny(image)
    if kind == "sketch":
        return f_sketch(image)
    raise ValueError(f"{kind!r} is not an image-based condition")


def extract(kind: str, rendered, pose: Optional[CameraPose] = None) -> ConditionMap:
    """Condition map of a :class:`~condcycle.render.RenderOutput`.

    Depth and normal come from the rendered depth; the depth mask is
    ``alpha > 0.5`` and an empty mask yields the all-background map.
    """
    _check_kind(kind)
    if kind in ("edge", "sketch"):
        return f_cond(kind, rendered.image)
    if kind == "depth":
        mask = rendered.alpha.data > 0.5
        if not mask.any():
            d = rendered.depth
            return ConditionMap("depth", d * 0.0 + 1.0, mask)
        return f_norm(rendered.depth, mask)
    if pose is None:
        raise ValueError("normal extraction needs the camera intrinsics")
    return f_d2n(rendered.depth, pose)


def resize(cmap: ConditionMap, res: int) -> ConditionMap:
    """Nearest upsample / area downsample by an integer factor."""
    h = cmap.data.shape[0]
    if h == res:
        return cmap
    x = cmap.data
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, x.shape + (1,))
    hh, ww, c = x.shape
    if res > hh:
        f = res // hh
        if f * hh != res:
            raise ValueError(f"cannot resize {hh} -> {res}")
        x = ad.reshape(x, (hh, 1, ww, 1, c))
        x = ad.broadcast_to(x, (hh, f, ww, f, c))
        x = ad.reshape(x, (res, res, c))
    else:
        f = hh // res
        if f * res != hh:
            raise ValueError(f"cannot resize {hh} -> {res}")
        x = ad.mean(ad.reshape(x, (res, f, res, f, c)), axis=(1, 3))
        if cmap.kind == "normal":
            x = ad.l2_normalize(x, axis=-1)
    if squeeze:
        x = ad.reshape(x, (res, res))
    mask = None
    if cmap.mask is not None:
        m = cmap.mask
        if res > hh:
            mask = np.repeat(np.repeat(m, res // hh, 0), res // hh, 1)
        else:
            mask = m.reshape(res, hh // res, res, hh // res).mean(axis=(1, 3)) > 0.5
    return ConditionMap(cmap.kind, x, mask)
