import json

import numpy as np
import pytest

from condcycle import dataset as D
from condcycle.ablation import HEADLINE, run_ablation
from condcycle.camera import make_view_grid
from condcycle.losses import LossWeights
from condcycle.overfit import fit_view, render_alpha, silhouette_iou
from condcycle.render import RenderConfig


def test_silhouette_iou_cases():
    a = np.zeros((4, 4), bool)
    assert silhouette_iou(a, a) == 1.0
    b = a.copy()
    b[:2] = True
    c = a.copy()
    c[1:3] = True
    assert silhouette_iou(b, c) == pytest.approx(1 / 3)
    assert silhouette_iou(b, ~b) == 0.0


def test_fit_view_learns_a_small_silhouette():
    grid = make_view_grid(res=16)
    pose = grid[grid.reference_index]
    scene = D.SceneSpec((D.Primitive("box", (0.0, 0.0, 0.0), (0.4, 0.4, 0.4), "blue"),), "a blue box", 0)
    view = D.oracle_render(scene, pose)
    cfg = RenderConfig(n_samples=16)
    fit = fit_view(view.rgb, view.mask, pose, max_steps=150, rays_per_step=256, plane_res=8,
                   cfg=cfg, eval_every=50)
    assert [h[0] for h in fit.history] == [50, 100, 150]
    assert fit.history[-1][1] < fit.history[0][1]
    iou = silhouette_iou(render_alpha(fit.planes, fit.decoder, pose, cfg) > 0.5, view.mask)
    assert iou == pytest.approx(fit.history[-1][2]) and iou > 0.8


def test_fit_view_stops_at_target():
    grid = make_view_grid(res=16)
    pose = grid[grid.reference_index]
    view = D.oracle_render(D.gen_scene(3), pose)
    fit = fit_view(view.rgb, view.mask, pose, max_steps=500, rays_per_step=256, plane_res=8,
                   cfg=RenderConfig(n_samples=16), eval_every=10, target_iou=0.0)
    assert fit.steps == 10 and len(fit.history) == 1


def test_run_ablation_document(tmp_path):
    out = tmp_path / "edge.json"
    doc = run_ablation(tmp_path / "work", "edge", LossWeights(lam=0.0), LossWeights(lam=1.0), steps=2,
                       n_scenes=8, semantic_epochs=2, out_json=out)
    assert doc["n_train"] == 7 and doc["n_held_out"] == 1 and doc["metric"] == HEADLINE["edge"] == "mse"
    on, off = doc["arms"]["on"], doc["arms"]["off"]
    assert on["weights"]["lam"] == 1.0 and off["weights"]["lam"] == 0.0
    assert on["headline"] == on["front4"]["mse"]["mean"]
    assert doc["relative_drop"] == pytest.approx(1 - on["headline"] / off["headline"])
    assert json.loads(out.read_text()) == json.loads(json.dumps(doc))
    # the dataset and encoders are reused on a second call
    stamp = (tmp_path / "work" / "semantic" / "index.json").stat().st_mtime_ns
    run_ablation(tmp_path / "work", "depth", LossWeights(beta=0.0), LossWeights(beta=0.1), steps=1,
                 n_scenes=8, semantic_epochs=2)
    assert (tmp_path / "work" / "semantic" / "index.json").stat().st_mtime_ns == stamp
