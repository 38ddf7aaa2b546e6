"""Differentiable emission-absorption volume rendering of image, depth and alpha.

Depth is measured along the camera axis (z-depth): samples are placed on
planes ``z_k`` in front of the camera and the optical path between planes is
stretched by ``1 / cos`` of the ray's angle to the axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, rays
from .triplane import RadianceDecoder, Triplane


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 48
    near: float = 1.2
    far: float = 4.8
    background: tuple = (1.0, 1.0, 1.0)
    jitter: bool = False

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")


@dataclass
class RenderOutput:
    image: Tensor  # (H, W, 3)
    depth: Tensor  # (H, W)
    alpha: Tensor  # (H, W)


_TRI_CACHE: dict = {}


def _upper_tri(n: int, dtype) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    m = _TRI_CACHE.get(key)
    if m is None:
        m = np.triu(np.ones((n, n), dtype=dtype))
        _TRI_CACHE[key] = m
    return m


def sample_depths(cfg: RenderConfig, n_rays: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Stratified z-depths ``(R, S)``: bin midpoints, or jittered within bins."""
    delta = (cfg.far - cfg.near) / cfg.n_samples
    k = np.arange(cfg.n_samples, dtype=np.float64)
    if cfg.jitter and rng is not None:
        off = rng.random((n_rays, cfg.n_samples))
    else:
        off = np.full((n_rays, cfg.n_samples), 0.5)
    return cfg.near + (k + off) * delta


def composite(rgb: Tensor, sigma: Tensor, z: np.ndarray, path_scale: np.ndarray,
              cfg: RenderConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Alpha-composite per-sample color ``(R, S, 3)`` and density ``(R, S)``.

    Each sample stands for its bin of width ``(far - near) / S`` in z; the
    optical depth of a bin is ``sigma * width * path_scale``.
    Returns color ``(R, 3)``, depth ``(R,)`` and accumulated alpha ``(R,)``.
    """
    dt = sigma.dtype
    delta = (cfg.far - cfg.near) / cfg.n_samples
    step = (delta * path_scale).astype(dt)[:, None]  # (R, 1)
    tau = sigma * step
    cum = ad.matmul(tau, _upper_tri(cfg.n_samples, dt))  # inclusive prefix sums
    trans_in = ad.exp(-(cum - tau))
    trans_out = ad.exp(-cum)
    w = trans_in - trans_out  # T_k * alpha_k
    acc = ad.sum_(w, axis=1)
    bg = np.asarray(cfg.background, dtype=dt)
    color = ad.sum_(ad.reshape(w, w.shape + (1,)) * rgb, axis=1) + ad.reshape(1.0 - acc, (-1, 1)) * bg
    zt = z.astype(dt)
    depth = ad.sum_(w * zt, axis=1) + (1.0 - acc) * dt.type(cfg.far)
    return color, depth, acc


def render_rays(field: Callable, origins: np.ndarray, dirs: np.ndarray, forward: np.ndarray,
                cfg: RenderConfig, rng: Optional[np.random.Generator] = None) -> tuple[Tensor, Tensor, Tensor]:
    """Render a flat batch of rays ``(R, 3)``; returns color, z-depth and alpha per ray."""
    cos = dirs @ forward
    z = sample_depths(cfg, origins.shape[0], rng)
    dist = z / cos[:, None]
    pts = origins[:, None, :] + dist[..., None] * dirs[:, None, :]
    rgb, sigma = field(pts.reshape(-1, 3))
    r, s = z.shape
    return composite(ad.reshape(rgb, (r, s, 3)), ad.reshape(sigma, (r, s)), z, 1.0 / cos, cfg)


def render_field(field: Callable, pose: CameraPose, cfg: RenderConfig,
                 rng: Optional[np.random.Generator] = None) -> RenderOutput:
    """Render any ``field(points (M, 3)) -> (rgb (M, 3), sigma (M,))``."""
    origins, dirs = rays(pose)
    h, w = pose.height, pose.width
    color, depth, acc = render_rays(field, origins.reshape(-1, 3), dirs.reshape(-1, 3), pose.forward, cfg, rng)
    return RenderOutput(ad.reshape(color, (h, w, 3)), ad.reshape(depth, (h, w)), ad.reshape(acc, (h, w)))


def f_render(P: Triplane, T: CameraPose, cfg: RenderConfig, decoder: RadianceDecoder,
             rng: Optional[np.random.Generator] = None) -> RenderOutput:
    """Render triplane ``P`` from camera ``T``; differentiable w.r.t. the planes."""
    return render_field(lambda x: decoder(P, x), T, cfg, rng)


def render_both_stages(P_i: Triplane, P_r: Triplane, T_i: CameraPose, T_r: CameraPose,
                       cfg: RenderConfig, decoder: RadianceDecoder,
                       rng: Optional[np.random.Generator] = None) -> tuple[RenderOutput, RenderOutput]:
    """First-stage render of ``P_i`` at the novel view and second-stage render of ``P_r`` back at the reference view."""
    return f_render(P_i, T_r, cfg, decoder, rng), f_render(P_r, T_i, cfg, decoder, rng)
