"""Procedural primitive scenes, an analytic ray-trace oracle, and the on-disk dataset.

Scenes hold one to three colored spheres, axis-aligned boxes or z-axis
cylinders placed well inside the unit cube.  The oracle intersects rays with
them in closed form and returns shaded color, z-depth, world normals and a
coverage mask.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .camera import CameraPose, ViewGrid, make_view_grid, rays

PALETTE = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.3, 0.85),
    "yellow": (0.9, 0.8, 0.1),
    "cyan": (0.1, 0.75, 0.8),
    "magenta": (0.8, 0.2, 0.7),
    "orange": (0.95, 0.5, 0.1),
    "purple": (0.45, 0.2, 0.6),
}
SHAPES = ("sphere", "box", "cylinder")
LIGHT_DIR = np.array([0.4, 0.3, 0.866]) / np.linalg.norm([0.4, 0.3, 0.866])
AMBIENT = 0.35
PLACEMENT_BOUND = 0.7  # every primitive's bounding box stays in [-0.7, 0.7]^3
FAR = 4.8


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple
    size: tuple  # sphere (r,), box (hx, hy, hz), cylinder (r, half_height)
    color: str

    @property
    def rgb(self) -> np.ndarray:
        return np.asarray(PALETTE[self.color])

    def half_extent(self) -> np.ndarray:
        s = self.size
        if self.shape == "sphere":
            return np.full(3, s[0])
        if self.shape == "box":
            return np.asarray(s)
        return np.array([s[0], s[0], s[1]])


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    caption: str
    seed: int

    def to_json(self) -> dict:
        return {"seed": self.seed, "caption": self.caption,
                "primitives": [asdict(p) for p in self.primitives]}

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        prims = tuple(Primitive(p["shape"], tuple(p["center"]), tuple(p["size"]), p["color"])
                      for p in d["primitives"])
        return cls(prims, d["caption"], int(d["seed"]))


def caption_for(primitives) -> str:
    return " and ".join(f"a {p.color} {p.shape}" for p in primitives)


def gen_scene(seed: int) -> SceneSpec:
    """Deterministic 1-3 primitive scene; primitives do not overlap."""
    rng = np.random.default_rng([seed, 0x5CE])
    n = int(rng.integers(1, 4))
    scale = 1.0 if n == 1 else 0.75
    colors = rng.permutation(len(PALETTE))
    names = list(PALETTE)
    prims: list = []
    tries = 0
    while len(prims) < n:
        tries += 1
        if tries % 200 == 0:
            prims = []  # crowded layout, start over
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        if shape == "sphere":
            size = (float(rng.uniform(0.28, 0.5) * scale),)
        elif shape == "box":
            size = tuple(float(v) for v in rng.uniform(0.2, 0.4, 3) * scale)
        else:
            size = (float(rng.uniform(0.18, 0.32) * scale), float(rng.uniform(0.22, 0.45) * scale))
        lim = PLACEMENT_BOUND - Primitive(shape, (0, 0, 0), size, "red").half_extent()
        if n == 1:
            center = rng.uniform(-0.15, 0.15, 3) * np.minimum(lim, 1)
        else:
            center = rng.uniform(-lim, lim)
        cand = Primitive(shape, tuple(float(c) for c in center), size, names[colors[len(prims)]])
        if all(_separated(cand, p) for p in prims):
            prims.append(cand)
    return SceneSpec(tuple(prims), caption_for(prims), int(seed))


def _separated(a: Primitive, b: Primitive, gap: float = 0.04) -> bool:
    d = np.abs(np.subtract(a.center, b.center))
    return bool(np.any(d > a.half_extent() + b.half_extent() + gap))


# --- analytic oracle ---------------------------------------------------------

def _hit_sphere(o, d, p):
    oc = o - np.asarray(p.center)
    r = p.size[0]
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - c
    t = np.full(len(o), np.inf)
    ok = disc >= 0
    t0 = -b[ok] - np.sqrt(disc[ok])
    t[ok] = np.where(t0 > 1e-9, t0, np.inf)
    x = o + np.where(np.isfinite(t), t, 0)[:, None] * d
    return t, (x - np.asarray(p.center)) / r


def _hit_box(o, d, p):
    c = np.asarray(p.center)
    h = np.asarray(p.size)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (c - h - o) * inv
        t2 = (c + h - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    t_in = tmin.max(axis=1)
    t_out = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    ok = (t_in <= t_out) & (t_in > 1e-9)
    t = np.where(ok, t_in, np.inf)
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    n[rows, axis] = -np.sign(d[rows, axis])
    return t, n


def _hit_cylinder(o, d, p):
    c = np.asarray(p.center)
    r, hh = p.size
    oc = o - c
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = oc[:, 0] * d[:, 0] + oc[:, 1] * d[:, 1]
    cc = oc[:, 0] ** 2 + oc[:, 1] ** 2 - r * r
    t_side = np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * cc
        ok = (disc >= 0) & (a > 1e-12)
        ts = (-b - np.sqrt(np.where(ok, disc, 0))) / np.where(ok, a, 1)
        zs = oc[:, 2] + ts * d[:, 2]
        ok &= (ts > 1e-9) & (np.abs(zs) <= hh)
        t_side = np.where(ok, ts, np.inf)
        t_cap = np.full(len(o), np.inf)
        cap_n = np.zeros(len(o))
        for zc, sgn in ((hh, 1.0), (-hh, -1.0)):
            tc = (zc - oc[:, 2]) / d[:, 2]
            xy = oc[:, :2] + tc[:, None] * d[:, :2]
            okc = np.isfinite(tc) & (tc > 1e-9) & (np.sum(xy * xy, axis=1) <= r * r)
            better = okc & (tc < t_cap)
            t_cap = np.where(better, tc, t_cap)
            cap_n = np.where(better, sgn, cap_n)
    side = t_side <= t_cap
    t = np.where(side, t_side, t_cap)
    x = oc + np.where(np.isfinite(t), t, 0)[:, None] * d
    n_side = np.stack([x[:, 0] / r, x[:, 1] / r, np.zeros(len(o))], axis=1)
    n_cap = np.stack([np.zeros(len(o)), np.zeros(len(o)), cap_n], axis=1)
    return t, np.where(side[:, None], n_side, n_cap)


_HITTERS = {"sphere": _hit_sphere, "box": _hit_box, "cylinder": _hit_cylinder}


@dataclass
class OracleView:
    rgb: np.ndarray  # (H, W, 3) float32
    depth: np.ndarray  # (H, W) z-depth, far where empty
    normal: np.ndarray  # (H, W, 3) world normals, zero where empty
    mask: np.ndarray  # (H, W) bool
    prim_id: np.ndarray  # (H, W) index of the visible primitive, -1 where empty

    def camera_normals(self, pose: CameraPose) -> np.ndarray:
        """Normals in camera coordinates; background reads (0, 0, 1)."""
        n = self.normal @ pose.rotation
        n[~self.mask] = (0.0, 0.0, 1.0)
        return n.astype(np.float32)


def smooth_interior(view: OracleView, min_dot: float = 0.99) -> np.ndarray:
    """Pixels whose 3x3 neighbourhood lies on one primitive with agreeing normals.

    Excludes silhouettes, creases and occlusion boundaries, where finite
    differences of depth are not meant to recover the surface normal.
    """
    h, w = view.mask.shape
    ok = view.mask.copy()
    ok[0, :] = ok[-1, :] = ok[:, 0] = ok[:, -1] = False
    pid = np.pad(view.prim_id, 1, constant_values=-1)
    nrm = np.pad(view.normal, ((1, 1), (1, 1), (0, 0)))
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            sp = pid[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            sn = nrm[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
            ok &= (sp == view.prim_id) & (np.sum(sn * view.normal, axis=-1) > min_dot)
    return ok


def oracle_render(scene: SceneSpec, pose: CameraPose, res: Optional[int] = None,
                  far: float = FAR) -> OracleView:
    """Closed-form ray cast of ``scene`` through pixel centres of ``pose``."""
    if res is not None:
        pose = pose.with_resolution(res, res)
    o, d = rays(pose)
    h, w = pose.height, pose.width
    o = o.reshape(-1, 3)
    d = d.reshape(-1, 3)
    best = np.full(len(o), np.inf)
    normal = np.zeros_like(o)
    color = np.ones_like(o)
    ids = np.full(len(o), -1)
    for i, p in enumerate(scene.primitives):
        t, n = _HITTERS[p.shape](o, d, p)
        closer = t < best
        best = np.where(closer, t, best)
        normal[closer] = n[closer]
        color[closer] = p.rgb
        ids[closer] = i
    mask = np.isfinite(best)
    shade = AMBIENT + (1 - AMBIENT) * np.clip(normal @ LIGHT_DIR, 0, None)
    rgb = np.where(mask[:, None], color * shade[:, None], 1.0)
    zdepth = np.where(mask, best * (d @ pose.forward), far)
    return OracleView(rgb.reshape(h, w, 3).astype(np.float32),
                      zdepth.reshape(h, w).astype(np.float32),
                      normal.reshape(h, w, 3).astype(np.float32),
                      mask.reshape(h, w), ids.reshape(h, w))


# --- T32 container -------------------------------------------------------------

T32_MAGIC = b"T32\x00"


class T32Error(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)
        self.reason = reason


def encode_t32(arr) -> bytes:
    a = np.asarray(arr)
    head = T32_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_t32(buf: bytes, path="<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise T32Error(path, "truncated header")
    if buf[:4] != T32_MAGIC:
        raise T32Error(path, f"bad magic {buf[:4].hex()}")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise T32Error(path, "truncated shape")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) != off + 4 * n:
        raise T32Error(path, f"expected {off + 4 * n} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(dims).astype(np.float32)


def write_t32(path, arr) -> None:
    try:
        Path(path).write_bytes(encode_t32(arr))
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def read_t32(path) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e
    return decode_t32(buf, path)


def save_state(path, state: dict) -> None:
    """Write named tensors as ``<path>/<name>.t32`` plus an index."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    names = sorted(state)
    for k in names:
        write_t32(root / f"{k}.t32", state[k])
    (root / "index.json").write_text(json.dumps({"tensors": names}, indent=1) + "\n")


def load_state(path) -> dict:
    root = Path(path)
    try:
        names = json.loads((root / "index.json").read_text())["tensors"]
    except OSError as e:
        raise OSError(f"cannot read checkpoint index in {root}: {e.strerror}") from e
    return {k: read_t32(root / f"{k}.t32") for k in names}


def write_ppm(path, image) -> None:
    """8-bit binary PPM (P6) of an ``(H, W, 3)`` or ``(H, W)`` image in [0, 1]."""
    a = np.asarray(image, dtype=np.float64)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    px = np.clip(np.round(a * 255), 0, 255).astype(np.uint8)
    h, w, _ = px.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + px.tobytes())


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, mx = (int(t) for t in tokens[1:])
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return (data.reshape(h, w, 3) / float(mx)).astype(np.float32)


# --- dataset on disk -----------------------------------------------------------

SCENE_TENSORS = ("rgb", "depth", "normal")


def view_meta(grid: ViewGrid) -> list:
    out = []
    for pose, lab in zip(grid.poses, grid.labels):
        out.append({"elevation_deg": lab["elevation"], "azimuth_deg": lab["azimuth"],
                    "pose_row_major": pose.to_row_major(), "fov_y_rad": float(pose.fov_y),
                    "width": int(pose.width), "height": int(pose.height)})
    return out


def build_dataset(n_scenes: int, out_dir, grid: Optional[ViewGrid] = None, res: int = 64,
                  seed: int = 0, config: Optional[dict] = None) -> dict:
    """Render every scene at every grid view into ``out_dir`` and write a manifest.

    Scene ``k`` uses ``gen_scene(seed * 100003 + k)``; the last eighth of the
    scenes (at least one when ``n_scenes >= 2``) is held out.
    """
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    grid = grid or make_view_grid(res=res)
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {root}: {e.strerror}") from e
    names = []
    for k in range(n_scenes):
        scene = gen_scene(seed * 100003 + k)
        name = f"scene_{k:04d}"
        sdir = root / name
        sdir.mkdir(exist_ok=True)
        for v, pose in enumerate(grid.poses):
            view = oracle_render(scene, pose, res)
            write_t32(sdir / f"view{v:02d}_rgb.t32", view.rgb)
            write_t32(sdir / f"view{v:02d}_depth.t32", view.depth)
            write_t32(sdir / f"view{v:02d}_normal.t32", view.normal)
        meta = {"caption": scene.caption, "reference_index": grid.reference_index,
                "views": view_meta(grid.with_resolution(res)), "scene": scene.to_json()}
        (sdir / "meta.json").write_text(json.dumps(meta, indent=1) + "\n")
        names.append(name)
    n_held = n_scenes // 8 if n_scenes >= 8 else min(1, n_scenes - 1)
    manifest = {"scenes": names, "train": names[: n_scenes - n_held],
                "held_out": names[n_scenes - n_held:], "res": res, "seed": seed,
                "n_views": len(grid)}
    if config is not None:
        manifest["config"] = config
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


@dataclass
class MultiViewSample:
    name: str
    caption: str
    poses: list
    rgb: np.ndarray  # (V, H, W, 3)
    depth: np.ndarray  # (V, H, W)
    normal: np.ndarray  # (V, H, W, 3) world
    reference_index: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_views(self) -> int:
        return len(self.poses)

    @property
    def mask(self) -> np.ndarray:
        return np.sum(self.normal * self.normal, axis=-1) > 0.25

    def camera_normals(self, v: int) -> np.ndarray:
        n = self.normal[v] @ self.poses[v].rotation
        n[~self.mask[v]] = (0.0, 0.0, 1.0)
        return n.astype(np.float32)

    def view(self, v: int, res: Optional[int] = None) -> dict:
        """Ground truth of view ``v``, area-downsampled to ``res`` when given.

        Depth averages only covered sub-pixels; a pixel counts as covered when
        more than half its sub-pixels are.  Normals are renormalized.
        """
        key = (v, res)
        if key in self._cache:
            return self._cache[key]
        rgb, depth, nrm, mask = self.rgb[v], self.depth[v], self.camera_normals(v), self.mask[v]
        pose = self.poses[v]
        h = rgb.shape[0]
        if res is not None and res != h:
            f = h // res
            if f * res != h:
                raise ValueError(f"cannot downsample {h} -> {res}")

            def pool(a):
                return a.reshape((res, f, res, f) + a.shape[2:]).mean(axis=(1, 3))

            cover = pool(mask.astype(np.float64))
            dsum = pool(np.where(mask, depth, 0.0))
            far = float(depth[~mask].max()) if (~mask).any() else FAR
            new_mask = cover > 0.5
            depth = np.where(new_mask, dsum / np.maximum(cover, 1e-12), far)
            rgb = pool(rgb)
            nrm = pool(nrm)
            nrm = nrm / np.maximum(np.linalg.norm(nrm, axis=-1, keepdims=True), 1e-12)
            nrm[~new_mask] = (0.0, 0.0, 1.0)
            mask = new_mask
            pose = pose.with_resolution(res, res)
        out = {"rgb": rgb.astype(np.float32), "depth": depth.astype(np.float32),
               "normal": nrm.astype(np.float32), "mask": mask, "pose": pose}
        self._cache[key] = out
        return out


def load_scene(sdir) -> MultiViewSample:
    sdir = Path(sdir)
    try:
        meta = json.loads((sdir / "meta.json").read_text())
    except OSError as e:
        raise OSError(f"cannot read {sdir / 'meta.json'}: {e.strerror}") from e
    poses = [CameraPose.from_row_major(v["pose_row_major"], v["fov_y_rad"], v["width"], v["height"])
             for v in meta["views"]]
    arrs = {k: np.stack([read_t32(sdir / f"view{v:02d}_{k}.t32") for v in range(len(poses))])
            for k in SCENE_TENSORS}
    return MultiViewSample(sdir.name, meta["caption"], poses, arrs["rgb"], arrs["depth"],
                           arrs["normal"], int(meta["reference_index"]))


class SceneDataset:
    """Lazy loader over a directory written by :func:`build_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.manifest = json.loads((self.root / "manifest.json").read_text())
        except OSError as e:
            raise OSError(f"cannot read {self.root / 'manifest.json'}: {e.strerror}") from e
        self._scenes: dict = {}

    def split(self, name: str) -> list:
        if name == "all":
            return list(self.manifest["scenes"])
        if name not in ("train", "held_out"):
            raise ValueError(f"unknown split {name!r}")
        return list(self.manifest[name])

    def scene(self, name: str) -> MultiViewSample:
        if name not in self._scenes:
            self._scenes[name] = load_scene(self.root / name)
        return self._scenes[name]

    def scenes(self, split: str = "train") -> list:
        return [self.scene(n) for n in self.split(split)]


def in_memory_dataset(n_scenes: int, res: int = 64, seed: int = 0,
                      grid: Optional[ViewGrid] = None) -> list:
    """Same content as :func:`build_dataset` without touching the disk."""
    grid = grid or make_view_grid(res=res)
    out = []
    for k in range(n_scenes):
        scene = gen_scene(seed * 100003 + k)
        views = [oracle_render(scene, p, res) for p in grid.poses]
        poses = [p.with_resolution(res, res) for p in grid.poses]
        out.append(MultiViewSample(f"scene_{k:04d}", scene.caption, poses,
                                   np.stack([v.rgb for v in views]), np.stack([v.depth for v in views]),
                                   np.stack([v.normal for v in views]), grid.reference_index))
    return out
