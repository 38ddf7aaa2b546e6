import argparse
import json
import subprocess
import sys

import numpy as np
import pytest

from condcycle import cli
from condcycle.dataset import read_t32, write_ppm, write_t32

SMALL = {"dataset": {"n_scenes": 4, "res": 32, "views": [4, 2]},
         "model": {"cond_res": 32, "H_p": 8, "W_p": 8},
         "train": {"steps": 3, "checkpoint_interval": 2, "render_res": 32, "n_samples": 8, "n_gt_views": 1},
         "semantic": {"epochs": 3}}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(SMALL))
    assert cli.main(["gen-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli.main(["pretrain-semantic", "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(root / "sem")]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--semantic", str(root / "sem"),
                     "--kind", "edge", "--out", str(root / "ck")]) == 0
    return root


def _subparsers():
    p = cli.build_parser()
    act = next(a for a in p._actions if isinstance(a, argparse._SubParsersAction))
    return act.choices


def test_every_flag_documents_its_default():
    subs = _subparsers()
    assert set(subs) == {"gen-data", "pretrain-semantic", "train", "eval", "render", "extract"}
    for name, sp in subs.items():
        text = sp.format_help()
        for a in sp._actions:
            if a.dest == "help":
                continue
            assert a.help and ("(default:" in a.help or "(required)" in a.help), (name, a.dest)
            assert a.option_strings[0] in text


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--help"])
    assert e.value.code == 0
    assert "--lambda" in capsys.readouterr().out


def test_bad_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--out", "x", "--bogus"])
    assert e.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_gen_data_scenes(tmp_path, capsys):
    code, out, _ = run(["gen-data", "--out", tmp_path / "d", "--scenes", 8, "--res", 16, "--views", "2,1"], capsys)
    assert code == 0
    assert json.loads(out) == {"out": str(tmp_path / "d"), "scenes": 8, "train": 7, "held_out": 1}
    assert len([p for p in (tmp_path / "d").iterdir() if p.is_dir()]) == 8
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert man["config"]["dataset"]["n_scenes"] == 8


def test_seed_precedence(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CYC_SEED", "5")
    run(["gen-data", "--out", tmp_path / "a", "--scenes", 1, "--res", 16, "--views", "1,1"], capsys)
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["seed"] == 5
    run(["gen-data", "--out", tmp_path / "b", "--scenes", 1, "--res", 16, "--views", "1,1", "--seed", 2], capsys)
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 2
    monkeypatch.setenv("CYC_SEED", "x")
    code, _, err = run(["gen-data", "--out", tmp_path / "c", "--scenes", 1], capsys)
    assert code == 2 and json.loads(err)["error"] == "usage"


def test_steps_zero_rejected(tmp_path, capsys):
    code, _, err = run(["train", "--data", tmp_path, "--semantic", tmp_path, "--out", tmp_path / "o",
                        "--steps", 0], capsys)
    assert code == 2
    doc = json.loads(err.strip())
    assert doc["code"] == 2 and "steps" in doc["message"]


def test_missing_inputs_are_reported(tmp_path, capsys):
    code, _, err = run(["train", "--data", tmp_path / "none", "--semantic", tmp_path, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "none" in json.loads(err)["message"]
    code, _, err = run(["extract", "--kind", "edge", "--image", tmp_path / "no.ppm", "--out", tmp_path / "e.t32"], capsys)
    assert code == 2


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"stepz": 3}}')
    code, _, err = run(["gen-data", "--config", bad, "--out", tmp_path / "d"], capsys)
    assert code == 2 and "stepz" in err
    bad.write_text("{not json")
    code, _, err = run(["gen-data", "--config", bad, "--out", tmp_path / "d"], capsys)
    assert code == 2 and "JSON" in err
    bad.write_text('{"trian": {}}')
    assert run(["gen-data", "--config", bad, "--out", tmp_path / "d"], capsys)[0] == 2


def test_runtime_failure_exit_one(tmp_path, capsys):
    f = tmp_path / "corrupt.t32"
    f.write_bytes(b"NOPE0000")
    code, _, err = run(["extract", "--kind", "depth", "--image", f, "--out", tmp_path / "o.t32"], capsys)
    assert code == 1 and "bad magic" in json.loads(err)["message"]


def test_run_config_round_trip():
    cfg = cli.RunConfig.from_json(SMALL)
    doc = cfg.to_json()
    assert doc["train"]["lambda"] == 1.0 and "lam" not in doc["train"]
    assert cli.RunConfig.from_json(doc).to_json() == doc
    with pytest.raises(cli.UsageError):
        cli.RunConfig.from_json({"train": {"lam": 1.0}})


def test_flags_override_config(pipeline):
    summary = json.loads((pipeline / "ck" / "summary.json").read_text())
    eff = summary["effective_config"]
    assert eff["train"]["steps"] == 3 and eff["train"]["kind"] == "edge" and eff["model"]["H_p"] == 8
    assert (pipeline / "ck" / "semantic" / "index.json").exists()
    assert (pipeline / "ck" / "checkpoints" / "step_000002" / "index.json").exists()


def test_eval_writes_reports(pipeline, capsys):
    code, out, _ = run(["eval", "--data", pipeline / "data", "--ckpt", pipeline / "ck", "--semantic", pipeline / "sem",
                        "--views", "all", "--kinds", "edge,depth", "--report", pipeline / "rep" / "r.json"], capsys)
    assert code == 0
    doc = json.loads((pipeline / "rep" / "r.json").read_text())
    assert doc["view_setting"] == "all" and set(doc["summary"]) == {"edge", "depth"}
    assert doc["config"]["effective_config"]["eval"]["kinds"] == ["edge", "depth"]
    assert (pipeline / "rep" / "r.csv").exists() and (pipeline / "rep" / "r.txt").exists()
    assert "summary" in json.loads(out)


def test_extract_and_render(pipeline, capsys):
    sample = json.loads((pipeline / "data" / "manifest.json").read_text())["scenes"][0]
    rgb = read_t32(pipeline / "data" / sample / "view00_rgb.t32")
    write_ppm(pipeline / "img.ppm", rgb)
    code, out, _ = run(["extract", "--kind", "edge", "--image", pipeline / "img.ppm", "--out", pipeline / "edge.t32"],
                       capsys)
    assert code == 0 and json.loads(out)["shape"] == [32, 32]
    side = json.loads((pipeline / "edge.t32.json").read_text())
    assert side["kind"] == "edge" and "effective_config" in side
    code, _, _ = run(["extract", "--kind", "normal", "--image", pipeline / "data" / sample / "view00_depth.t32",
                      "--out", pipeline / "n.ppm"], capsys)
    assert code == 0
    code, _, _ = run(["render", "--ckpt", pipeline / "ck", "--cond", pipeline / "edge.t32", "--prompt", "a red box",
                      "--view-index", 3, "--out", pipeline / "r.t32"], capsys)
    assert code == 0
    img = read_t32(pipeline / "r.t32")
    assert img.shape == (32, 32, 3) and np.all((img >= 0) & (img <= 1))
    code, _, err = run(["render", "--ckpt", pipeline / "ck", "--cond", pipeline / "edge.t32", "--prompt", "a red box",
                        "--view-index", 99, "--out", pipeline / "r2.t32"], capsys)
    assert code == 2 and "view-index" in err
    write_t32(pipeline / "rgb.t32", rgb)
    code, _, err = run(["render", "--ckpt", pipeline / "ck", "--cond", pipeline / "rgb.t32", "--prompt", "a red box",
                        "--view-index", 0, "--out", pipeline / "r3.t32"], capsys)
    assert code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "condcycle", "eval", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--report" in res.stdout
