"""The two-stage generate-render-extract cycle, its backward pass and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import CameraPose, ViewGrid, sample_novel_view
from .conditions import ConditionMap, extract, f_canny, f_norm, f_sketch, resize
from .dataset import MultiViewSample, load_state, save_state
from .generator import GeneratorConfig, TriplaneGenerator
from .losses import CycleBatch, LossTerms, LossWeights, l_total
from .nn import Adam
from .render import RenderConfig, f_render
from .semantic import SemanticEncoders

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "l_render", "l_clip", "l_cond", "l_cond3d", "l_total")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, terms: dict):
        super().__init__(f"non-finite loss at step {step}: " +
                         ", ".join(f"{k}={v}" for k, v in terms.items()))
        self.step = step
        self.terms = terms


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 4e-4
    weights: LossWeights = LossWeights()
    p_identity: float = 0.25
    kind: str = "edge"
    seed: int = 0
    checkpoint_interval: int = 500
    two_phase: bool = True
    detach_cycle: bool = False
    n_gt_views: int = 2
    render_res: int = 32
    n_samples: int = 48
    jitter: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.p_identity <= 1:
            raise ValueError("p_identity must lie in [0, 1]")
        if self.n_gt_views < 1:
            raise ValueError("n_gt_views must be >= 1")

    def render_config(self, train: bool = True) -> RenderConfig:
        return RenderConfig(n_samples=self.n_samples, jitter=self.jitter and train)

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


# --- per-scene inputs and targets --------------------------------------------------

def condition_from_view(kind: str, view: dict) -> ConditionMap:
    """Ground-truth condition map of one view (a dict from ``MultiViewSample.view``)."""
    if kind == "edge":
        return ConditionMap("edge", f_canny(view["rgb"]).data.detach())
    if kind == "sketch":
        return ConditionMap("sketch", f_sketch(view["rgb"]).data.detach())
    if kind == "depth":
        return ConditionMap("depth", f_norm(view["depth"], view["mask"]).data.detach(), view["mask"])
    if kind == "normal":
        return ConditionMap("normal", Tensor(view["normal"]), view["mask"])
    raise ValueError(f"unknown condition kind {kind!r}")


@dataclass
class PreparedScene:
    name: str
    caption: str
    kind: str
    grid: ViewGrid  # poses at render resolution
    cond_in: ConditionMap  # generator input at the reference view
    target: ConditionMap  # same condition at render resolution
    gt_images: np.ndarray  # (V, r, r, 3)

    @property
    def reference_index(self) -> int:
        return self.grid.reference_index

    @property
    def pose_i(self) -> CameraPose:
        return self.grid[self.grid.reference_index]


def prepare_scene(sample: MultiViewSample, kind: str, cond_res: int = 64, render_res: int = 32) -> PreparedScene:
    ref = sample.reference_index
    poses = [p.with_resolution(render_res, render_res) for p in sample.poses]
    grid = ViewGrid(poses, [{} for _ in poses], ref)
    gt = np.stack([sample.view(v, render_res)["rgb"] for v in range(sample.n_views)])
    return PreparedScene(sample.name, sample.caption, kind, grid,
                         condition_from_view(kind, sample.view(ref, cond_res)),
                         condition_from_view(kind, sample.view(ref, render_res)), gt)


# --- the cycle ---------------------------------------------------------------------

@dataclass
class CycleResult:
    batch: CycleBatch
    terms: LossTerms
    novel_index: int


def cycle_forward(gen: TriplaneGenerator, enc: SemanticEncoders, scene: PreparedScene,
                  cfg: TrainConfig, rng: np.random.Generator, force_identity: Optional[bool] = None,
                  novel_index: Optional[int] = None) -> CycleResult:
    """Run stage 1, the novel-view extraction, stage 2 and all losses.

    Random draws happen in a fixed order: novel view, supervised views, then
    the ray jitter of each render in recording order.  ``novel_index`` pins
    the novel view without a draw; with ``force_identity=False`` and the
    reference index it runs the full two-stage path at the reference pose.
    """
    kind = scene.kind
    rcfg = cfg.render_config(train=True)
    pose_i = scene.pose_i
    if novel_index is not None:
        r_idx = int(novel_index)
        pose_r = scene.grid[r_idx]
        identity = r_idx == scene.reference_index if force_identity is None else bool(force_identity)
        if identity and r_idx != scene.reference_index:
            raise ValueError("the identity branch needs the reference view")
    else:
        p_id = cfg.p_identity if force_identity is None else float(force_identity)
        pose_r, identity, r_idx = sample_novel_view(rng, scene.grid, p_id, scene.reference_index)
    gt_idx = rng.choice(len(scene.grid), size=min(cfg.n_gt_views, len(scene.grid)), replace=False)

    P_i = gen(scene.cond_in, scene.caption, pose_i)
    gt_renders = [f_render(P_i, scene.grid[int(k)], rcfg, gen.decoder, rng) for k in gt_idx]
    gt_images = [scene.gt_images[int(k)] for k in gt_idx]
    common = dict(kind=kind, pose_i=pose_i, P_i=P_i, gt_renders=gt_renders, gt_images=gt_images)
    if identity:
        out = f_render(P_i, pose_i, rcfg, gen.decoder, rng)
        batch = CycleBatch(identity=True, render_hat_i=out, C_hat_i=extract(kind, out, pose_i), **common)
    else:
        out_r = f_render(P_i, pose_r, rcfg, gen.decoder, rng)
        C_hat_r = extract(kind, out_r, pose_r)
        if cfg.detach_cycle:
            C_hat_r = ConditionMap(kind, C_hat_r.data.detach(), C_hat_r.mask)
        C_in2 = resize(C_hat_r, gen.cfg.cond_res)
        P_r = gen(C_in2, scene.caption, pose_r)
        out_bar = f_render(P_r, pose_i, rcfg, gen.decoder, rng)
        batch = CycleBatch(identity=False, render_r=out_r, C_hat_r=C_hat_r, pose_r=pose_r, P_r=P_r,
                           render_bar=out_bar, C_bar=extract(kind, out_bar, pose_i), **common)
    c3d = scene.target if kind in ("depth", "normal") else None
    terms = l_total(batch, kind, cfg.weights, scene.target, scene.caption, enc, c3d)
    return CycleResult(batch, terms, r_idx)


def cycle_backward(res: CycleResult, two_phase: bool) -> Optional[ad.Tape]:
    """Accumulate parameter gradients; returns the tape for inspection."""
    total = res.terms.l_total
    tape = total.tape
    cut_t = res.batch.C_hat_r.data if res.batch.C_hat_r is not None else None
    if two_phase and cut_t is not None and cut_t.node is not None:
        cut = ad.backward_to_cut(total, ad.CutSet([cut_t]))
        ad.resume_backward(cut)
    else:
        ad.backward(total)
    return tape


def _check_finite(step: int, terms: LossTerms) -> None:
    vals = terms.values()
    if not all(math.isfinite(v) for v in vals.values()):
        raise TrainingDiverged(step, vals)


def cycle_step(gen: TriplaneGenerator, enc: SemanticEncoders, opt: Adam, scene: PreparedScene,
               cfg: TrainConfig, rng: np.random.Generator, step: int = 0) -> dict:
    """One optimization step on one scene; returns the loss terms and branch info."""
    opt.zero_grad()
    with ad.Tape() as tape:
        res = cycle_forward(gen, enc, scene, cfg, rng)
        _check_finite(step, res.terms)
        cycle_backward(res, cfg.two_phase)
    opt.step()
    out = res.terms.values()
    out["identity"] = res.batch.identity
    out["novel_index"] = res.novel_index
    out["peak_bytes"] = tape.peak_bytes
    return out


# --- model bundle and checkpoints ----------------------------------------------------

def build_generator(gcfg: GeneratorConfig, enc: SemanticEncoders) -> TriplaneGenerator:
    return TriplaneGenerator(gcfg, enc)


def save_checkpoint(path, gen: TriplaneGenerator, meta: dict) -> None:
    save_state(path, gen.state_dict())
    doc = {"generator": asdict(gen.cfg), **meta}
    Path(path, "config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path, enc: Optional[SemanticEncoders] = None) -> tuple:
    """Generator and metadata from a checkpoint directory."""
    try:
        meta = json.loads(Path(path, "config.json").read_text())
    except OSError as e:
        raise OSError(f"cannot read checkpoint config in {path}: {e.strerror}") from e
    gen = TriplaneGenerator(GeneratorConfig(**meta["generator"]), enc)
    gen.load_state_dict(load_state(path))
    return gen, meta


def save_encoders(path, enc: SemanticEncoders, meta: Optional[dict] = None) -> None:
    save_state(path, enc.state_dict())
    Path(path, "config.json").write_text(json.dumps(meta or {}, indent=1, sort_keys=True) + "\n")


def load_encoders(path) -> SemanticEncoders:
    enc = SemanticEncoders()
    enc.load_state_dict(load_state(path))
    enc.freeze()
    return enc


# --- the loop ----------------------------------------------------------------------

@dataclass
class TrainResult:
    generator: TriplaneGenerator
    history: list = field(default_factory=list)


def train(scenes: list, enc: SemanticEncoders, cfg: TrainConfig, out_dir=None,
          gcfg: GeneratorConfig = GeneratorConfig(), meta: Optional[dict] = None,
          progress=None) -> TrainResult:
    """Train a fresh generator on ``scenes`` (list of ``MultiViewSample``).

    Step ``s`` draws its scene and every random choice from a generator
    seeded with ``(seed, s)``, so runs are reproducible bit for bit.
    """
    if not scenes:
        raise ValueError("training needs at least one scene")
    enc_sum = enc.checksum()
    gen = build_generator(replace(gcfg, seed=cfg.seed), enc)
    opt = Adam(gen.parameters(), lr=cfg.lr)
    prepared = [prepare_scene(s, cfg.kind, gen.cfg.cond_res, cfg.render_res) for s in scenes]
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    meta = dict(meta or {})
    meta["train"] = cfg.to_json()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_FIELDS)
    history = []
    try:
        for step in range(cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            scene = prepared[int(rng.integers(len(prepared)))]
            rec = cycle_step(gen, enc, opt, scene, cfg, rng, step)
            rec["step"] = step
            history.append(rec)
            if writer is not None:
                writer.writerow([step] + [repr(rec[k]) for k in LOG_FIELDS[1:]])
            if progress is not None:
                progress(rec)
            if out is not None and (step + 1) % cfg.checkpoint_interval == 0 and step + 1 < cfg.steps:
                save_checkpoint(out / "checkpoints" / f"step_{step + 1:06d}", gen, meta)
    finally:
        if fh is not None:
            fh.close()
    if enc.checksum() != enc_sum:
        raise RuntimeError("semantic encoders changed during training")
    if out is not None:
        save_checkpoint(out, gen, meta)
        tail = history[-min(50, len(history)):]
        summary = {k: float(np.mean([r[k] for r in tail])) for k in LOG_FIELDS[1:]}
        summary["steps"] = cfg.steps
        (out / "summary.json").write_text(json.dumps({"final_mean_last_50": summary, **meta},
                                                     indent=1, sort_keys=True) + "\n")
    return TrainResult(gen, history)
