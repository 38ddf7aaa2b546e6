"""Tour of the four control signals on one synthetic scene.

A procedurally generated scene is ray cast from its reference camera, and
each condition extractor is applied to the result.  Maps are written as PPM
files so they can be opened with any image viewer.

    python3 demos/01_conditions.py [OUT_DIR]
"""

import sys
from pathlib import Path

import numpy as np

from condcycle import dataset as D
from condcycle.autodiff import Tensor
from condcycle.camera import make_view_grid
from condcycle.conditions import f_canny, f_d2n, f_norm, f_sketch


def to_rgb(cmap):
    a = np.asarray(cmap, dtype=np.float64)
    if a.ndim == 2:
        return np.repeat(a[..., None], 3, axis=-1)
    return 0.5 * (a + 1.0)  # normals live in [-1, 1]


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    grid = make_view_grid(res=64)
    pose = grid[grid.reference_index]
    scene = D.gen_scene(7)
    print(f"scene: {scene.caption!r} ({len(scene.primitives)} primitives)")
    view = D.oracle_render(scene, pose)
    print(f"object covers {view.mask.mean():.0%} of the {pose.width}x{pose.height} reference view")

    img = Tensor(view.rgb)
    depth = Tensor(view.depth.astype(np.float64))
    maps = {
        "edge": f_canny(img).data.data,
        "sketch": f_sketch(img).data.data,
        "depth": f_norm(depth, view.mask).data.data,
        "normal": f_d2n(depth, pose).data.data,
    }
    D.write_ppm(out / "rgb.ppm", view.rgb)
    for kind, m in maps.items():
        D.write_ppm(out / f"{kind}.ppm", np.clip(to_rgb(m), 0, 1))
        print(f"  {kind:<7} shape {m.shape}  range [{m.min():+.2f}, {m.max():+.2f}]")

    # Normals recovered from depth should agree with the analytic ones away from creases.
    interior = D.smooth_interior(view)
    n_true = view.camera_normals(pose)[interior]
    cos = np.sum(maps["normal"][interior] * n_true, axis=-1)
    print(f"depth->normal vs analytic normals on {interior.sum()} smooth pixels: mean cosine {cos.mean():.5f}")
    print(f"wrote {len(maps) + 1} images to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/conditions"))
