"""Paired training runs that differ in a single loss weight, scored on held-out scenes."""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import SceneDataset, build_dataset
from .losses import LossWeights
from .metrics import evaluate
from .semantic import pretrain_contrastive
from .trainer import TrainConfig, load_encoders, save_encoders, train

HEADLINE = {"edge": "mse", "sketch": "mse", "depth": "r_mse", "normal": "dn_con"}


def prepare(root, n_scenes: int = 64, seed: int = 0, semantic_epochs: int = 200):
    """Build (or reuse) the dataset and frozen encoders under ``root``."""
    root = Path(root)
    if not (root / "data" / "manifest.json").exists():
        build_dataset(n_scenes, root / "data", seed=seed)
    ds = SceneDataset(root / "data")
    if (root / "semantic" / "index.json").exists():
        enc = load_encoders(root / "semantic")
    else:
        scenes = ds.scenes("train")
        enc, _ = pretrain_contrastive(np.stack([s.rgb for s in scenes]), [s.caption for s in scenes],
                                      epochs=semantic_epochs, seed=seed)
        save_encoders(root / "semantic", enc, {"epochs": semantic_epochs})
    return ds, enc


def run_arm(ds, enc, cfg: TrainConfig, settings=("front4", "all"), log=None) -> dict:
    t0 = time.time()
    res = train(ds.scenes("train"), enc, cfg, progress=log)
    train_s = time.time() - t0
    metric = HEADLINE[cfg.kind]
    out = {"weights": cfg.weights.__dict__, "train_seconds": train_s}
    for setting in settings:
        rep = evaluate(res.generator, enc, ds, "held_out", (cfg.kind,), setting, cfg.render_res)
        out[setting] = rep.summary()[cfg.kind]
    out["headline"] = out[settings[0]][metric]["mean"]
    return out


def run_ablation(root, kind: str, off: LossWeights, on: LossWeights, steps: int = 2000,
                 seed: int = 0, out_json: Optional[str] = None, log=None, n_scenes: int = 64,
                 semantic_epochs: int = 200, **train_overrides) -> dict:
    """Train the ``off`` and ``on`` arms and report the relative drop of the headline metric.

    ``train_overrides`` are extra :class:`TrainConfig` fields shared by both arms.
    """
    ds, enc = prepare(root, n_scenes=n_scenes, seed=seed, semantic_epochs=semantic_epochs)
    base = TrainConfig(steps=steps, kind=kind, seed=seed, **train_overrides)
    arms = {}
    for name, w in (("on", on), ("off", off)):
        arms[name] = run_arm(ds, enc, replace(base, weights=w), log=log)
    drop = 1.0 - arms["on"]["headline"] / arms["off"]["headline"]
    doc = {"kind": kind, "steps": steps, "metric": HEADLINE[kind], "view_setting": "front4",
           "n_train": len(ds.split("train")), "n_held_out": len(ds.split("held_out")),
           "arms": arms, "relative_drop": drop}
    if out_json is not None:
        Path(out_json).parent.mkdir(parents=True, exist_ok=True)
        Path(out_json).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return doc
