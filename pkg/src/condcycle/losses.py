"""Condition-cycle, rendering, semantic and combined training losses.

Every squared L2 norm is averaged over pixels (and channels), so loss weights
do not depend on resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose
from .conditions import KINDS, ConditionMap, f_d2n, f_norm
from .render import RenderOutput
from .semantic import SemanticEncoders, cosine
from .triplane import Triplane


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 5.0  # semantic
    lam: float = 1.0  # condition cycle
    beta: float = 0.1  # 3D condition terms

    def __post_init__(self):
        if min(self.alpha, self.lam, self.beta) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class CycleBatch:
    """Tensors produced by one cycle.

    Exactly one of the two-stage fields (``P_r``, ``I_bar``, ``C_bar``) or the
    identity fields (``I_hat_i``, ``C_hat_i``) is populated.
    """

    kind: str
    pose_i: CameraPose
    P_i: Triplane
    identity: bool
    render_r: Optional[RenderOutput] = None  # stage 1 at T_r
    C_hat_r: Optional[ConditionMap] = None
    pose_r: Optional[CameraPose] = None
    P_r: Optional[Triplane] = None
    render_bar: Optional[RenderOutput] = None  # stage 2 back at T_i
    C_bar: Optional[ConditionMap] = None
    render_hat_i: Optional[RenderOutput] = None  # identity branch at T_i
    C_hat_i: Optional[ConditionMap] = None
    gt_renders: list = field(default_factory=list)  # stage-1 renders at T_l
    gt_images: list = field(default_factory=list)  # matching ground truth (H, W, 3)

    def __post_init__(self):
        two = self.C_bar is not None
        one = self.C_hat_i is not None
        if two == one:
            raise ValueError("a cycle batch carries either two-stage or identity outputs")

    @property
    def returned(self) -> ConditionMap:
        """Condition map extracted after closing the cycle at the reference view."""
        return self.C_hat_i if self.identity else self.C_bar

    @property
    def returned_render(self) -> RenderOutput:
        return self.render_hat_i if self.identity else self.render_bar


def mse(a, b) -> Tensor:
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError("mse", a.shape, b.shape)
    d = a - b
    return ad.mean(d * d)


def masked_mse(a, b, mask: np.ndarray) -> Tensor:
    """Squared error averaged over valid pixels (and channels, if any)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError("masked_mse", a.shape, b.shape)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("masked_mse: validity mask is empty")
    ch = a.shape[2] if a.ndim == 3 else 1
    w = m.astype(a.dtype)
    if a.ndim == 3:
        w = w[..., None]
    d = a - b
    return ad.sum_(d * d * w) / float(m.sum() * ch)


def _data(c):
    return c.data if isinstance(c, ConditionMap) else c


def l_cond(batch: CycleBatch, C_v) -> Tensor:
    """Map-space cycle term against the input condition."""
    return mse(_data(batch.returned), _data(C_v))


def l_cond_d(batch: CycleBatch, C_d: ConditionMap) -> Tensor:
    """Normalized rendered depth against the depth condition over its valid pixels."""
    if C_d.mask is None:
        raise ValueError("depth condition needs a validity mask")
    depth = batch.returned_render.depth
    return masked_mse(f_norm(depth, C_d.mask).data, C_d.data, C_d.mask)


def l_cond_n(batch: CycleBatch, C_n: ConditionMap) -> Tensor:
    """Depth-derived normals against the normal condition over its valid pixels."""
    n = f_d2n(batch.returned_render.depth, batch.pose_i).data
    mask = C_n.mask if C_n.mask is not None else np.ones(n.shape[:2], dtype=bool)
    return masked_mse(n, C_n.data, mask)


def l_render(gt_renders, gt_images) -> Tensor:
    """Sum over supervised views of the per-view image MSE."""
    if not gt_renders or len(gt_renders) != len(gt_images):
        raise ValueError("l_render needs matching, nonempty render and image lists")
    total = None
    for r, img in zip(gt_renders, gt_images):
        term = mse(r.image, img)
        total = term if total is None else total + term
    return total


def l_clip(batch: CycleBatch, caption, encoders: Optional[SemanticEncoders]) -> Tensor:
    """``1 - cos`` between caption and render embeddings, summed over the novel-view
    render and the returned render.

    The identity branch has neither render, so it contributes zero here and is
    steered through its condition terms alone.
    """
    if encoders is None:
        raise ValueError("l_clip needs the semantic encoders")
    if batch.identity:
        return Tensor._wrap(np.zeros((), dtype=batch.render_hat_i.image.dtype))
    t = encoders.f_clip_t(caption).detach()
    a = 1.0 - cosine(t, encoders.f_clip_i(batch.render_r.image))
    b = 1.0 - cosine(t, encoders.f_clip_i(batch.render_bar.image))
    return a + b


def l_view(render_term: Tensor, clip_term: Tensor, alpha: float) -> Tensor:
    return render_term + alpha * clip_term


@dataclass
class LossTerms:
    l_render: Tensor
    l_clip: Tensor
    l_cond: Tensor
    l_cond3d: Optional[Tensor]
    l_total: Tensor

    def values(self) -> dict:
        f = lambda t: 0.0 if t is None else float(t.data)  # noqa: E731
        return {"l_render": f(self.l_render), "l_clip": f(self.l_clip), "l_cond": f(self.l_cond),
                "l_cond3d": f(self.l_cond3d), "l_total": f(self.l_total)}


def combine(kind: str, render_term: Tensor, clip_term: Tensor, cond_term: Tensor,
            cond3d_term: Optional[Tensor], w: LossWeights) -> Tensor:
    """``l_view + lam * l_cond`` plus ``beta`` times the 3D term for depth and normal."""
    if kind not in KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    total = l_view(render_term, clip_term, w.alpha) + w.lam * cond_term
    if kind in ("depth", "normal"):
        if cond3d_term is None:
            raise ValueError(f"kind {kind!r} needs its 3D condition term")
        total = total + w.beta * cond3d_term
    return total


def l_total(batch: CycleBatch, kind: str, weights: LossWeights, C_v: ConditionMap,
            caption, encoders: SemanticEncoders, C_3d: Optional[ConditionMap] = None) -> LossTerms:
    """All terms for one cycle; ``C_3d`` is the depth or normal target for the 3D term."""
    if kind not in KINDS:
        raise ValueError(f"unknown condition kind {kind!r}")
    r = l_render(batch.gt_renders, batch.gt_images)
    c = l_clip(batch, caption, encoders)
    lc = l_cond(batch, C_v)
    l3 = None
    if kind == "depth":
        l3 = l_cond_d(batch, C_3d if C_3d is not None else C_v)
    elif kind == "normal":
        l3 = l_cond_n(batch, C_3d if C_3d is not None else C_v)
    return LossTerms(r, c, lc, l3, combine(kind, r, c, lc, l3, weights))
