"""Fit a free triplane and decoder to a single posed image by random ray batches.

Used to check the renderer against the analytic oracle: after fitting, the
rendered silhouette should match the oracle mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, rays
from .nn import Adam, param
from .render import RenderConfig, render_rays
from .triplane import RadianceDecoder, Triplane


@dataclass
class FitResult:
    planes: Tensor
    decoder: RadianceDecoder
    steps: int
    history: list = field(default_factory=list)  # (step, loss, iou)


def silhouette_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


def render_alpha(planes: Tensor, decoder: RadianceDecoder, pose: CameraPose, cfg: RenderConfig,
                 chunk: int = 1024) -> np.ndarray:
    """Full-frame alpha without recording a tape."""
    o, d = rays(pose)
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    P = Triplane(planes)
    out = []
    for i in range(0, len(o), chunk):
        _, _, acc = render_rays(lambda x: decoder(P, x), o[i:i + chunk], d[i:i + chunk], pose.forward, cfg)
        out.append(acc.data)
    return np.concatenate(out).reshape(pose.height, pose.width)


def fit_view(image: np.ndarray, mask: np.ndarray, pose: CameraPose, max_steps: int = 2000,
             rays_per_step: int = 1024, plane_res: int = 32, channels: int = 8, lr: float = 1e-2,
             cfg: RenderConfig = RenderConfig(n_samples=48), seed: int = 0,
             eval_every: int = 100, target_iou: float | None = None) -> FitResult:
    """Adam on photometric plus alpha-vs-mask error over random pixel batches.

    Stops early once the full-frame silhouette IoU reaches ``target_iou``.
    """
    rng = np.random.default_rng(seed)
    planes = param(rng.normal(scale=0.1, size=(3, channels, plane_res, plane_res)))
    decoder = RadianceDecoder(rng, channels)
    opt = Adam([planes] + decoder.parameters(), lr=lr)
    o, d = rays(pose)
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    rgb_t = np.asarray(image, np.float32).reshape(-1, 3)
    mask_t = np.asarray(mask, np.float32).reshape(-1)
    res = FitResult(planes, decoder, 0)
    for step in range(1, max_steps + 1):
        idx = rng.choice(len(o), size=min(rays_per_step, len(o)), replace=False)
        opt.zero_grad()
        with ad.Tape():
            P = Triplane(planes)
            color, _, acc = render_rays(lambda x: decoder(P, x), o[idx], d[idx], pose.forward, cfg)
            dc = color - rgb_t[idx]
            da = acc - mask_t[idx]
            loss = ad.mean(dc * dc) + ad.mean(da * da)
            ad.backward(loss)
        opt.step()
        res.steps = step
        if step % eval_every == 0 or step == max_steps:
            iou = silhouette_iou(render_alpha(planes, decoder, pose, cfg) > 0.5, mask)
            res.history.append((step, float(loss.data), iou))
            if target_iou is not None and iou >= target_iou:
                break
    return res
