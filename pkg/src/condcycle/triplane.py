"""Triplane feature field and the point decoder producing color and density."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, Module

# (first axis, second axis) sampled by each plane
PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ


@dataclass
class Triplane:
    planes: Tensor  # (3, C, H, W)
    bound: float = 1.0

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ad.ShapeError("Triplane", self.planes.shape, detail="expected (3, C, H, W)")

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    @property
    def resolution(self) -> tuple:
        return self.planes.shape[2:]

    def detach(self) -> "Triplane":
        return Triplane(self.planes.detach(), self.bound)


def sample_features(P: Triplane, x) -> Tensor:
    """Concatenated bilinear features ``(N, 3C)`` at world points ``(N, 3)``."""
    pts = x.data if isinstance(x, Tensor) else np.asarray(x)
    pts = pts.reshape(-1, 3) / P.bound
    feats = []
    for k, (a, b) in enumerate(PLANE_AXES):
        uv = np.stack([pts[:, a], pts[:, b]], axis=1).astype(P.planes.dtype)
        feats.append(ad.grid_sample_bilinear(P.planes[k], Tensor._wrap(uv)))
    return ad.concat(feats, axis=1)


class RadianceDecoder(Module):
    """Two hidden ReLU layers on triplane features; sigmoid color, softplus density."""

    def __init__(self, rng: np.random.Generator, channels: int = 8, width: int = 32):
        self.l1 = Linear(rng, 3 * channels, width)
        self.l2 = Linear(rng, width, width)
        self.l3 = Linear(rng, width, 4)

    def __call__(self, P: Triplane, x) -> tuple[Tensor, Tensor]:
        h = ad.relu(self.l1(sample_features(P, x)))
        h = ad.relu(self.l2(h))
        out = self.l3(h)
        rgb = ad.sigmoid(out[:, 0:3])
        sigma = ad.softplus(out[:, 3])
        return rgb, sigma


def f_mlp(P: Triplane, x, decoder: RadianceDecoder) -> tuple[Tensor, Tensor]:
    """Color ``(N, 3)`` in [0, 1] and density ``(N,)`` >= 0 at points ``x``."""
    return decoder(P, x)
