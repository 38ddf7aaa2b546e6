"""Controllability and semantic metrics, plus the held-out evaluation report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor
from .camera import CameraPose, ViewGrid, front_k
from .conditions import KINDS, extract, f_d2n, f_norm
from .render import RenderConfig, RenderOutput, f_render
from .semantic import SemanticEncoders
from .triplane import Triplane

METRICS = ("psnr", "ssim", "mse", "r_mse", "dn_con", "clip_i", "clip_t")
APPLICABLE = {"edge": ("psnr", "ssim", "mse"), "sketch": ("psnr", "ssim", "mse"),
              "depth": ("r_mse",), "normal": ("dn_con",)}
SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2, SSIM_L = 0.01, 0.03, 1.0


def _np(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    if hasattr(x, "data") and isinstance(getattr(x, "data"), Tensor):
        return x.data.data
    return np.asarray(x)


def mse(a, b) -> float:
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mse: shapes {a.shape} and {b.shape} differ")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(m: float, data_range: float = 1.0) -> float:
    if m == 0:
        return math.inf
    return float(10.0 * math.log10(data_range * data_range / m))


def psnr(a, b) -> float:
    return psnr_from_mse(mse(a, b))


def _gauss_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    win = sliding_window_view(x, w.shape)
    return np.einsum("ijkl,kl->ij", win, w)


def ssim(a, b) -> float:
    """Mean SSIM of two single-channel maps in [0, 1] over valid windows."""
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim expects two 2D maps of equal shape")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs maps of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = _gauss_window()
    c1 = (SSIM_K1 * SSIM_L) ** 2
    c2 = (SSIM_K2 * SSIM_L) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a ** 2
    sbb = _filter_valid(b * b, w) - mu_b ** 2
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def masked_mse(a, b, mask) -> float:
    a, b = _np(a).astype(np.float64), _np(b).astype(np.float64)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("validity mask is empty")
    d = (a - b) ** 2
    if d.ndim == 3:
        d = d.mean(axis=-1)
    return float(d[m].mean())


def r_mse_depth(depth, C_d, mask) -> float:
    """MSE between the normalized depth and a depth condition over its valid pixels."""
    return masked_mse(f_norm(_np(depth), mask).data.data, C_d, mask)


def dn_con_depth(depth, pose: CameraPose, C_n, mask) -> float:
    return masked_mse(f_d2n(_np(depth), pose).data.data, C_n, mask)


def cond_metrics(P: Triplane, pose: CameraPose, gt_image, kind: str, decoder,
                 cfg: RenderConfig = RenderConfig()) -> dict:
    """PSNR, SSIM and MSE between conditions of the render of ``P`` and of ``gt_image``."""
    if kind not in ("edge", "sketch"):
        raise ValueError("image-space condition metrics apply to edge and sketch")
    out = f_render(P, pose, cfg, decoder)
    c_gen = extract(kind, out).data.data
    c_gt = extract(kind, RenderOutput(Tensor(gt_image), None, None)).data.data
    m = mse(c_gen, c_gt)
    return {"psnr": psnr_from_mse(m), "ssim": ssim(c_gen, c_gt), "mse": m}


def r_mse(P: Triplane, pose: CameraPose, C_d, mask, decoder, cfg: RenderConfig = RenderConfig()) -> float:
    return r_mse_depth(f_render(P, pose, cfg, decoder).depth, C_d, mask)


def dn_con(P: Triplane, pose: CameraPose, C_n, mask, decoder, cfg: RenderConfig = RenderConfig()) -> float:
    return dn_con_depth(f_render(P, pose, cfg, decoder).depth, pose, C_n, mask)


def _cos(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sum(a * b, axis=-1)


def clip_i(enc: SemanticEncoders, renders, gt_images) -> float:
    """Mean cosine between embeddings of renders and of the matching ground truth."""
    if enc is None:
        raise ValueError("clip_i needs the semantic encoders")
    zr = enc.image(np.stack([_np(r) for r in renders])).data
    zg = enc.image(np.stack([_np(g) for g in gt_images])).data
    return float(np.mean(_cos(zr, zg)))


def clip_t(enc: SemanticEncoders, renders, caption: str) -> float:
    if enc is None:
        raise ValueError("clip_t needs the semantic encoders")
    zr = enc.image(np.stack([_np(r) for r in renders])).data
    zt = enc.f_clip_t(caption).data
    return float(np.mean(zr @ zt))


# --- evaluation --------------------------------------------------------------------

def view_set(grid: ViewGrid, setting: str, k: int = 4) -> list:
    if setting == "all":
        return list(range(len(grid)))
    if setting == "front4":
        return front_k(grid, grid.reference_index, k)
    raise ValueError(f"unknown view setting {setting!r}; use 'all' or 'front4'")


@dataclass
class MetricReport:
    view_setting: str
    per_scene: dict = field(default_factory=dict)  # kind -> scene -> metric -> value
    errors: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)  # kind -> {"scenes": n, "views_per_scene": v}
    config: dict = field(default_factory=dict)

    def summary(self) -> dict:
        """kind -> metric -> {"mean", "std"} over scenes."""
        out = {}
        for kind, scenes in self.per_scene.items():
            rows = {}
            for metric in APPLICABLE[kind] + ("clip_i", "clip_t"):
                vals = np.array([s[metric] for s in scenes.values()], dtype=np.float64)
                if len(vals) == 0:
                    continue
                rows[metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
            out[kind] = rows
        return out

    def to_json(self) -> dict:
        return {"view_setting": self.view_setting, "summary": self.summary(), "per_scene": self.per_scene,
                "counts": self.counts, "errors": self.errors, "config": self.config,
                "notes": "clip_i and clip_t use the toy contrastive encoders (stand-in scores)"}

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "metric", "mean", "std", "n_scenes", "view_setting"])
        for kind, rows in self.summary().items():
            for metric, v in rows.items():
                w.writerow([kind, metric, repr(v["mean"]), repr(v["std"]),
                            self.counts[kind]["scenes"], self.view_setting])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"view setting: {self.view_setting}  (clip_* are stand-in scores)"]
        header = f"{'kind':<8}{'metric':<9}{'mean':>12}{'std':>12}{'scenes':>8}"
        lines += [header, "-" * len(header)]
        for kind, rows in self.summary().items():
            for metric, v in rows.items():
                lines.append(f"{kind:<8}{metric:<9}{v['mean']:>12.6g}{v['std']:>12.6g}"
                             f"{self.counts[kind]['scenes']:>8d}")
        return "\n".join(lines)

    def write(self, path) -> list:
        """Write ``path`` (JSON) plus sibling ``.csv`` and ``.txt``; returns the paths."""
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        c = p.with_suffix(".csv")
        c.write_text(self.csv_text())
        t = p.with_suffix(".txt")
        t.write_text(self.table() + "\n")
        return [p, c, t]


def evaluate_scene(gen, enc: SemanticEncoders, sample, kind: str, setting: str,
                   render_res: int = 32, n_samples: int = 48) -> dict:
    """Generate from the reference condition and score every view in the set."""
    from .trainer import condition_from_view, prepare_scene

    scene = prepare_scene(sample, kind, gen.cfg.cond_res, render_res)
    cfg = RenderConfig(n_samples=n_samples)
    P = gen(scene.cond_in, scene.caption, scene.pose_i)
    views = view_set(scene.grid, setting)
    acc: dict = {m: [] for m in APPLICABLE[kind]}
    renders = []
    for v in views:
        pose = scene.grid[v]
        out = f_render(P, pose, cfg, gen.decoder)
        renders.append(out.image.data)
        gt_view = sample.view(v, render_res)
        target = condition_from_view(kind, gt_view)
        if kind in ("edge", "sketch"):
            c_gen = extract(kind, out).data.data
            m = mse(c_gen, target.data)
            acc["mse"].append(m)
            acc["psnr"].append(psnr_from_mse(m))
            acc["ssim"].append(ssim(c_gen, target.data))
        elif kind == "depth":
            acc["r_mse"].append(r_mse_depth(out.depth, target.data, target.mask))
        else:
            acc["dn_con"].append(dn_con_depth(out.depth, pose, target.data, target.mask))
    res = {m: float(np.mean(v)) for m, v in acc.items()}
    gts = [scene.gt_images[v] for v in views]
    res["clip_i"] = clip_i(enc, renders, gts)
    res["clip_t"] = clip_t(enc, renders, scene.caption)
    res["n_views"] = len(views)
    return res


def evaluate(gen, enc: SemanticEncoders, dataset, split: str = "held_out", kinds=("edge",),
             setting: str = "front4", render_res: int = 32, config: Optional[dict] = None) -> MetricReport:
    """Score a generator on every scene of a split; unreadable scenes are logged and skipped."""
    names = dataset.split(split)
    if not names:
        raise ValueError(f"split {split!r} is empty")
    if enc is None:
        raise ValueError("evaluation needs the semantic encoders")
    report = MetricReport(setting, config=dict(config or {}))
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown condition kind {kind!r}")
        rows = {}
        n_views = 0
        for name in names:
            try:
                sample = dataset.scene(name)
            except (OSError, ValueError, KeyError) as e:
                report.errors.append({"scene": name, "kind": kind, "error": str(e)})
                continue
            rows[name] = evaluate_scene(gen, enc, sample, kind, setting, render_res)
            n_views = rows[name]["n_views"]
        report.per_scene[kind] = rows
        report.counts[kind] = {"scenes": len(rows), "views_per_scene": n_views}
    return report
