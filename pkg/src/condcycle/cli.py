"""Command-line entry point: gen-data, pretrain-semantic, train, eval, render, extract.

Every command takes ``--config FILE`` (a JSON run configuration); explicit
flags override file values, and the merged configuration is written into
each artifact the command produces.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Precondition failure detected before any work starts (exit code 2)."""


# --- run configuration -------------------------------------------------------------

@dataclass
class DatasetSection:
    n_scenes: int = 64
    views: list = field(default_factory=lambda: [8, 4])  # ring sizes; +1 top +1 bottom
    res: int = 64
    seed: int = 0


@dataclass
class ModelSection:
    C_p: int = 8
    H_p: int = 16
    W_p: int = 16
    mlp_width: int = 32
    cond_res: int = 64


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 4e-4
    alpha: float = 5.0
    # "lambda" in JSON
    lam: float = 1.0
    beta: float = 0.1
    p_identity: float = 0.25
    kind: str = "edge"
    two_phase: bool = True
    seed: int = 0
    checkpoint_interval: int = 500
    n_gt_views: int = 2
    render_res: int = 32
    n_samples: int = 48


@dataclass
class EvalSection:
    view_setting: str = "front4"
    kinds: list = field(default_factory=lambda: ["edge"])


@dataclass
class SemanticSection:
    epochs: int = 200
    seed: int = 0


SECTIONS = {"dataset": DatasetSection, "model": ModelSection, "train": TrainSection,
            "eval": EvalSection, "semantic": SemanticSection}
_JSON_ALIASES = {"lambda": "lam"}


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    semantic: SemanticSection = field(default_factory=SemanticSection)

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("config root must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls()
        for name, section in doc.items():
            if not isinstance(section, dict):
                raise UsageError(f"config section {name!r} must be an object")
            target = getattr(cfg, name)
            known = {f.name for f in fields(target)}
            for key, val in section.items():
                attr = _JSON_ALIASES.get(key, key)
                if attr not in known or key in _JSON_ALIASES.values():
                    raise UsageError(f"unknown config key {name}.{key}")
                setattr(target, attr, val)
        return cfg

    def to_json(self) -> dict:
        out = {}
        for name in SECTIONS:
            d = asdict(getattr(self, name))
            for alias, attr in _JSON_ALIASES.items():
                if attr in d:
                    d[alias] = d.pop(attr)
            out[name] = d
        return out


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e.msg} at line {e.lineno}") from e
    return RunConfig.from_json(doc)


def _seed_default() -> int:
    env = os.environ.get("CYC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as e:
        raise UsageError(f"CYC_SEED must be an integer, got {env!r}") from e


def _apply(cfg: RunConfig, args, mapping: dict) -> None:
    """Copy flags that were given explicitly onto the config."""
    for dest, (section, attr) in mapping.items():
        val = getattr(args, dest, None)
        if val is not None:
            setattr(getattr(cfg, section), attr, val)


def _resolve_seed(cfg: RunConfig, args, section: str, file_doc_has_seed: bool) -> None:
    if getattr(args, "seed", None) is not None:
        getattr(cfg, section).seed = args.seed
    elif not file_doc_has_seed and "CYC_SEED" in os.environ:
        getattr(cfg, section).seed = _seed_default()


def _config_has(path: Optional[str], section: str, key: str) -> bool:
    if path is None:
        return False
    doc = json.loads(Path(path).read_text())
    return key in doc.get(section, {})


# --- helpers -----------------------------------------------------------------------

def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _grid_from(ds: DatasetSection, res: int):
    from .camera import make_view_grid

    if not (isinstance(ds.views, (list, tuple)) and len(ds.views) == 2):
        raise UsageError("dataset.views must be [n_ring1, n_ring2]")
    n1, n2 = (int(v) for v in ds.views)
    if n1 < 1 or n2 < 1:
        raise UsageError("view ring sizes must be >= 1")
    return make_view_grid(n1, n2, res=res)


def _parse_views(text: str) -> list:
    try:
        parts = [int(t) for t in text.split(",")]
    except ValueError as e:
        raise argparse.ArgumentTypeError("expected two integers like 8,4") from e
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError("expected two positive integers like 8,4")
    return parts


def _echo(obj: dict, cfg: RunConfig, command: str) -> dict:
    out = dict(obj)
    out["effective_config"] = cfg.to_json()
    out["command"] = command
    return out


def _read_image(path) -> np.ndarray:
    from .dataset import read_ppm, read_t32

    p = Path(path)
    if p.suffix.lower() == ".ppm":
        return read_ppm(p)
    return read_t32(p)


def _write_map(path, arr: np.ndarray, cfg: RunConfig, command: str, extra: dict) -> None:
    from .dataset import write_ppm, write_t32

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    if p.suffix.lower() == ".ppm":
        img = arr
        if img.ndim == 3 and img.shape[2] == 3 and img.min() < 0:
            img = 0.5 * (img + 1.0)  # normals to [0, 1] for viewing
        write_ppm(p, img)
    else:
        write_t32(p, arr)
    side = p.with_name(p.name + ".json")
    side.write_text(json.dumps(_echo(extra, cfg, command), indent=1, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> int:
    from .dataset import build_dataset

    ds = cfg.dataset
    if ds.n_scenes < 1:
        raise UsageError("--scenes must be >= 1")
    grid = _grid_from(ds, ds.res)
    man = build_dataset(ds.n_scenes, args.out, grid, ds.res, ds.seed, config=cfg.to_json())
    print(json.dumps({"out": str(args.out), "scenes": len(man["scenes"]), "train": len(man["train"]),
                      "held_out": len(man["held_out"])}))
    return 0


def cmd_pretrain_semantic(args, cfg: RunConfig) -> int:
    from .dataset import SceneDataset
    from .semantic import pretrain_contrastive
    from .trainer import save_encoders

    if cfg.semantic.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    ds = SceneDataset(args.data)
    scenes = ds.scenes("train")
    if len(scenes) < 2:
        raise UsageError("contrastive pretraining needs at least 2 training scenes")
    imgs = np.stack([s.rgb for s in scenes])
    enc, hist = pretrain_contrastive(imgs, [s.caption for s in scenes], epochs=cfg.semantic.epochs,
                                     seed=cfg.semantic.seed)
    save_encoders(args.out, enc, _echo({"loss_history": hist}, cfg, "pretrain-semantic"))
    print(json.dumps({"out": str(args.out), "final_loss": hist[-1]}))
    return 0


def _train_config(cfg: RunConfig):
    from .losses import LossWeights
    from .trainer import TrainConfig

    t = cfg.train
    try:
        return TrainConfig(steps=int(t.steps), lr=float(t.lr),
                           weights=LossWeights(float(t.alpha), float(t.lam), float(t.beta)),
                           p_identity=float(t.p_identity), kind=t.kind, seed=int(t.seed),
                           checkpoint_interval=int(t.checkpoint_interval), two_phase=bool(t.two_phase),
                           n_gt_views=int(t.n_gt_views), render_res=int(t.render_res),
                           n_samples=int(t.n_samples))
    except ValueError as e:
        raise UsageError(str(e)) from e


def _generator_config(cfg: RunConfig, seed: int):
    from .generator import GeneratorConfig

    m = cfg.model
    if m.H_p != m.W_p:
        raise UsageError("model.H_p and model.W_p must be equal")
    try:
        return GeneratorConfig(cond_res=int(m.cond_res), channels=int(m.C_p), plane_res=int(m.H_p),
                               mlp_width=int(m.mlp_width), seed=seed)
    except ValueError as e:
        raise UsageError(str(e)) from e


def cmd_train(args, cfg: RunConfig) -> int:
    from .conditions import KINDS
    from .dataset import SceneDataset
    from .trainer import load_encoders, save_encoders, train

    if cfg.train.kind not in KINDS:
        raise UsageError(f"--kind must be one of {KINDS}")
    tcfg = _train_config(cfg)
    gcfg = _generator_config(cfg, tcfg.seed)
    _require_file(Path(args.data) / "manifest.json", "dataset manifest")
    _require_file(Path(args.semantic) / "index.json", "semantic checkpoint")
    enc = load_encoders(args.semantic)
    scenes = SceneDataset(args.data).scenes("train")
    meta = {"effective_config": cfg.to_json(), "command": "train"}
    res = train(scenes, enc, tcfg, args.out, gcfg, meta=meta)
    save_encoders(Path(args.out) / "semantic", enc, meta)
    last = res.history[-1]
    print(json.dumps({"out": str(args.out), "steps": tcfg.steps, "final_l_total": last["l_total"]}))
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    from .conditions import KINDS
    from .dataset import SceneDataset
    from .metrics import evaluate
    from .trainer import load_checkpoint, load_encoders

    if cfg.eval.view_setting not in ("all", "front4"):
        raise UsageError("--views must be 'all' or 'front4'")
    bad = [k for k in cfg.eval.kinds if k not in KINDS]
    if bad:
        raise UsageError(f"unknown kinds {bad}")
    _require_file(Path(args.data) / "manifest.json", "dataset manifest")
    _require_file(Path(args.ckpt) / "config.json", "checkpoint")
    _require_file(Path(args.semantic) / "index.json", "semantic checkpoint")
    enc = load_encoders(args.semantic)
    gen, meta = load_checkpoint(args.ckpt, enc)
    render_res = meta.get("train", {}).get("render_res", 32)
    report = evaluate(gen, enc, SceneDataset(args.data), args.split, tuple(cfg.eval.kinds),
                      cfg.eval.view_setting, render_res,
                      config=_echo({"checkpoint": str(args.ckpt), "checkpoint_config": meta}, cfg, "eval"))
    paths = report.write(args.report)
    print(json.dumps({"report": [str(p) for p in paths], "summary": report.summary()}))
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    from .camera import make_view_grid
    from .conditions import ConditionMap, resize
    from .autodiff import Tensor
    from .render import RenderConfig, f_render
    from .trainer import load_checkpoint, load_encoders

    _require_file(Path(args.ckpt) / "config.json", "checkpoint")
    _require_file(args.cond, "condition file")
    enc = load_encoders(Path(args.ckpt) / "semantic")
    gen, meta = load_checkpoint(args.ckpt, enc)
    run = meta.get("effective_config", {})
    kind = args.kind or run.get("train", {}).get("kind", "edge")
    views = run.get("dataset", {}).get("views", [8, 4])
    grid = make_view_grid(int(views[0]), int(views[1]), res=int(args.res))
    if not 0 <= args.view_index < len(grid):
        raise UsageError(f"--view-index must lie in [0, {len(grid) - 1}]")
    if not args.prompt.strip():
        raise UsageError("--prompt must be nonempty")
    data = _read_image(args.cond)
    expect_nd = 3 if kind == "normal" else 2
    if data.ndim != expect_nd:
        raise UsageError(f"{kind} condition must have {expect_nd} dimensions, got shape {data.shape}")
    mask = None
    if kind in ("depth", "normal"):
        mask = np.ones(data.shape[:2], dtype=bool)
    cmap = resize(ConditionMap(kind, Tensor(data), mask), gen.cfg.cond_res)
    P = gen(cmap, args.prompt, grid[grid.reference_index])
    out = f_render(P, grid[args.view_index], RenderConfig(), gen.decoder)
    _write_map(args.out, out.image.data, cfg, "render",
               {"kind": kind, "prompt": args.prompt, "view_index": args.view_index, "checkpoint": str(args.ckpt)})
    print(json.dumps({"out": str(args.out)}))
    return 0


def cmd_extract(args, cfg: RunConfig) -> int:
    from .autodiff import Tensor
    from .camera import make_view_grid
    from .conditions import extract, f_d2n, f_norm
    from .render import RenderOutput

    _require_file(args.image, "input image")
    data = _read_image(args.image)
    if args.kind in ("edge", "sketch"):
        if data.ndim != 3 or data.shape[2] != 3:
            raise UsageError(f"{args.kind} extraction needs an (H, W, 3) image, got {data.shape}")
        out = extract(args.kind, RenderOutput(Tensor(data), None, None)).data.data
    else:
        if data.ndim != 2:
            raise UsageError(f"{args.kind} extraction needs an (H, W) depth map, got {data.shape}")
        mask = data < data.max() if data.max() > data.min() else np.ones(data.shape, dtype=bool)
        if args.kind == "depth":
            out = f_norm(data, mask).data.data
        else:
            pose = make_view_grid(res=data.shape[0]).poses[0].with_resolution(data.shape[1], data.shape[0])
            out = f_d2n(data, pose).data.data
    _write_map(args.out, out, cfg, "extract", {"kind": args.kind, "input": str(args.image)})
    print(json.dumps({"out": str(args.out), "shape": list(out.shape)}))
    return 0


# --- parser ------------------------------------------------------------------------

def _d(value) -> str:
    return f"(default: {value})"


def build_parser() -> argparse.ArgumentParser:
    dflt = RunConfig()
    p = argparse.ArgumentParser(prog="condcycle", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_section: Optional[str] = None):
        sp.add_argument("--config", metavar="FILE", default=None, help="JSON run configuration " + _d(None))
        if seed_section:
            sp.add_argument("--seed", type=int, default=None,
                            help=f"random seed; falls back to $CYC_SEED "
                                 f"{_d(getattr(dflt, seed_section).seed)}")

    g = sub.add_parser("gen-data", help="render the synthetic multi-view dataset")
    g.add_argument("--out", required=True, metavar="DIR", help="output directory (required)")
    g.add_argument("--scenes", type=int, default=None, help="number of scenes " + _d(dflt.dataset.n_scenes))
    g.add_argument("--views", type=_parse_views, default=None,
                   help="ring sizes n1,n2 (plus top and bottom) " + _d("8,4"))
    g.add_argument("--res", type=int, default=None, help="ground-truth resolution " + _d(dflt.dataset.res))
    common(g, "dataset")
    g.set_defaults(func=cmd_gen_data, seed_section="dataset",
                   mapping={"scenes": ("dataset", "n_scenes"), "views": ("dataset", "views"),
                            "res": ("dataset", "res")})

    s = sub.add_parser("pretrain-semantic", help="train and freeze the toy text/image encoders")
    s.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    s.add_argument("--out", required=True, metavar="CKPT", help="encoder checkpoint directory (required)")
    s.add_argument("--epochs", type=int, default=None, help="training epochs " + _d(dflt.semantic.epochs))
    common(s, "semantic")
    s.set_defaults(func=cmd_pretrain_semantic, seed_section="semantic", mapping={"epochs": ("semantic", "epochs")})

    t = sub.add_parser("train", help="cycle-consistent training of the generator")
    t.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    t.add_argument("--semantic", required=True, metavar="CKPT", help="semantic encoder checkpoint (required)")
    t.add_argument("--kind", choices=("edge", "sketch", "depth", "normal"), default=None,
                   help="condition kind " + _d(dflt.train.kind))
    t.add_argument("--out", required=True, metavar="CKPT", help="output checkpoint directory (required)")
    t.add_argument("--steps", type=int, default=None, help="optimization steps " + _d(dflt.train.steps))
    t.add_argument("--lr", type=float, default=None, help="Adam learning rate " + _d(dflt.train.lr))
    t.add_argument("--alpha", type=float, default=None, help="semantic loss weight " + _d(dflt.train.alpha))
    t.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="condition-cycle weight " + _d(dflt.train.lam))
    t.add_argument("--beta", type=float, default=None, help="3D condition weight " + _d(dflt.train.beta))
    t.add_argument("--p-identity", type=float, default=None,
                   help="probability of the identity branch " + _d(dflt.train.p_identity))
    t.add_argument("--two-phase", dest="two_phase", action=argparse.BooleanOptionalAction, default=None,
                   help="two-round backward with a cut at the novel-view condition " + _d(dflt.train.two_phase))
    t.add_argument("--checkpoint-interval", type=int, default=None,
                   help="steps between checkpoints " + _d(dflt.train.checkpoint_interval))
    common(t, "train")
    t.set_defaults(func=cmd_train, seed_section="train",
                   mapping={"kind": ("train", "kind"), "steps": ("train", "steps"), "lr": ("train", "lr"),
                            "alpha": ("train", "alpha"), "lam": ("train", "lam"), "beta": ("train", "beta"),
                            "p_identity": ("train", "p_identity"), "two_phase": ("train", "two_phase"),
                            "checkpoint_interval": ("train", "checkpoint_interval")})

    e = sub.add_parser("eval", help="controllability metrics on a dataset split")
    e.add_argument("--data", required=True, metavar="DIR", help="dataset directory (required)")
    e.add_argument("--ckpt", required=True, metavar="CKPT", help="generator checkpoint (required)")
    e.add_argument("--semantic", required=True, metavar="CKPT", help="semantic encoder checkpoint (required)")
    e.add_argument("--views", dest="view_setting", choices=("all", "front4"), default=None,
                   help="view set " + _d(dflt.eval.view_setting))
    e.add_argument("--kinds", type=lambda s: s.split(","), default=None,
                   help="comma-separated condition kinds " + _d(",".join(dflt.eval.kinds)))
    e.add_argument("--split", choices=("train", "held_out", "all"), default="held_out",
                   help="dataset split " + _d("held_out"))
    e.add_argument("--report", required=True, metavar="FILE", help="report JSON path; .csv/.txt written alongside (required)")
    common(e)
    e.set_defaults(func=cmd_eval, seed_section=None,
                   mapping={"view_setting": ("eval", "view_setting"), "kinds": ("eval", "kinds")})

    r = sub.add_parser("render", help="generate from a condition and render one grid view")
    r.add_argument("--ckpt", required=True, metavar="CKPT", help="generator checkpoint (required)")
    r.add_argument("--cond", required=True, metavar="FILE", help="condition map (.t32 or .ppm) (required)")
    r.add_argument("--prompt", required=True, metavar="STR", help="caption (required)")
    r.add_argument("--view-index", type=int, required=True, metavar="K", help="grid view index (required)")
    r.add_argument("--out", required=True, metavar="IMG", help="output image (.ppm or .t32) (required)")
    r.add_argument("--kind", choices=("edge", "sketch", "depth", "normal"), default=None,
                   help="condition kind " + _d("the checkpoint's training kind"))
    r.add_argument("--res", type=int, default=32, help="render resolution " + _d(32))
    common(r)
    r.set_defaults(func=cmd_render, seed_section=None, mapping={})

    x = sub.add_parser("extract", help="extract a condition map from an image or depth map")
    x.add_argument("--kind", required=True, choices=("edge", "sketch", "depth", "normal"),
                   help="condition kind (required)")
    x.add_argument("--image", required=True, metavar="FILE",
                   help="input .ppm/.t32 image, or a .t32 depth map for depth and normal (required)")
    x.add_argument("--out", required=True, metavar="FILE", help="output map (.t32 or .ppm) (required)")
    common(x)
    x.set_defaults(func=cmd_extract, seed_section=None, mapping={})
    return p


def _fail(code: int, kind: str, msg: str) -> int:
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with code 2 on bad flags
    try:
        cfg = load_run_config(args.config)
        _apply(cfg, args, args.mapping)
        if args.seed_section:
            has = _config_has(args.config, args.seed_section, "seed")
            _resolve_seed(cfg, args, args.seed_section, has)
        return args.func(args, cfg)
    except UsageError as e:
        return _fail(EXIT_USAGE, "usage", str(e))
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        return _fail(EXIT_RUNTIME, type(e).__name__, str(e))


if __name__ == "__main__":
    sys.exit(main())
