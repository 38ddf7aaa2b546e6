"""Sanity check for the differentiable renderer: fit a triplane to one view.

A centred sphere is ray cast analytically, then a free triplane and decoder
are optimized until the rendered silhouette overlaps the true one.

    python3 demos/03_overfit_sphere.py [MAX_STEPS]
"""

import sys
import time

from condcycle import dataset as D
from condcycle.camera import make_view_grid
from condcycle.overfit import fit_view, render_alpha, silhouette_iou
from condcycle.render import RenderConfig


def main(max_steps: int) -> None:
    grid = make_view_grid(res=64)
    pose = grid[grid.reference_index]
    sphere = D.SceneSpec((D.Primitive("sphere", (0.0, 0.0, 0.0), (0.5,), "red"),), "a red sphere", 0)
    view = D.oracle_render(sphere, pose)
    t0 = time.time()
    fit = fit_view(view.rgb, view.mask, pose, max_steps=max_steps, eval_every=50)
    for step, loss, iou in fit.history:
        print(f"step {step:5d}  loss {loss:.4f}  IoU {iou:.4f}")
    iou = silhouette_iou(render_alpha(fit.planes, fit.decoder, pose, RenderConfig()) > 0.5, view.mask)
    print(f"final silhouette IoU {iou:.4f} after {fit.steps} steps ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 300)
