from __future__ import annotations

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from camgeo import calibrate as cal
from camgeo.cli import load_camera, main
from camgeo.embeddings import read_embedding
from camgeo.geometry import Pose
from camgeo.io import read_pfm



def run(*argv):
    return main([str(a) for a in argv])


def report(out):
    return json.loads((out / "report.json").read_text())


def tree_hashes(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def eucm_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("eucm")
    assert run("synth", "--scene", "calibration", "--model", "eucm", "--noise", "0", "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def plane_scene(tmp_path_factory):
    out = tmp_path_factory.mktemp("plane")
    assert run("synth", "--scene", "plane", "--model", "ucm", "--out", out) == 0
    return out


def test_synth_is_deterministic(tmp_path):
    for scene in ("calibration", "plane", "rig"):
        out = tmp_path / scene
        args = ["synth", "--scene", scene, "--seed", 11, "--views", 4, "--out", out]
        assert run(*args) == 0
        first = tree_hashes(out)
        assert run(*args) == 0
        assert tree_hashes(out) == first
    assert run("synth", "--scene", "calibration", "--seed", 12, "--views", 4, "--out", tmp_path / "other") == 0
    assert tree_hashes(tmp_path / "other") != tree_hashes(tmp_path / "calibration")


def test_correspondences_reproject(eucm_scene):
    cam = load_camera(eucm_scene / "camera.json")
    corrs = cal.load_correspondences(eucm_scene / "correspondences.jsonl")
    for k, view in enumerate(corrs.views):
        pose = Pose.from_text((eucm_scene / "poses" / f"view_{k:03d}.txt").read_text())
        err = np.abs(cam.project(pose.apply(view.points)) - view.pixels)
        assert err.max() < 1e-9


def test_alpha_passthrough(tmp_path):
    assert run("synth", "--model", "ucm", "--params", "alpha=0.71", "--views", 2, "--out", tmp_path) == 0
    assert json.loads((tmp_path / "camera.json").read_text())["alpha"] == 0.71
    assert run("synth", "--model", "ucm", "--params", "gamma=1", "--out", tmp_path) == 2


def test_perturb_recovers_eucm(eucm_scene, tmp_path, capsys):
    code = run("perturb", "--camera", eucm_scene / "camera.json", "--corrs", eucm_scene / "correspondences.jsonl", "--factor", 1.10, "--out", tmp_path)
    assert code == 0
    errs = report(tmp_path)["results"]["relative_errors"]
    assert set(errs) == {"fx", "fy", "cx", "cy", "alpha", "beta"}
    assert max(errs.values()) < 0.03
    assert "worst relative error" in capsys.readouterr().out


def test_calibrate_and_nonconvergence(eucm_scene, tmp_path):
    corrs = eucm_scene / "correspondences.jsonl"
    assert run("calibrate", "--corrs", corrs, "--model", "eucm", "--size", "384x256", "--out", tmp_path / "a") == 0
    assert report(tmp_path / "a")["results"]["rms_px"] < 1e-3
    assert run("calibrate", "--corrs", corrs, "--model", "eucm", "--max-iters", 1, "--out", tmp_path / "b") == 3
    assert run("calibrate", "--corrs", corrs, "--out", tmp_path / "c") == 2


def test_metrics_identity(plane_scene, tmp_path, capsys):
    d = plane_scene / "depth.pfm"
    assert run("metrics", "--pred", d, "--gt", d, "--out", tmp_path) == 0
    avg = report(tmp_path)["results"]["average"]
    assert avg["abs_rel"] == 0 and avg["rmse"] == 0 and avg["delta1"] == 1
    assert capsys.readouterr().out.split()[0] == "abs_rel"
    assert run("metrics", "--pred", d, d, "--gt", d, d, "--mode", "shared", "--out", tmp_path) == 0
    assert run("metrics", "--pred", d, "--gt", d, d, "--out", tmp_path) == 2


def test_warp_eval_ground_truth(plane_scene, tmp_path):
    s = plane_scene
    args = ["warp-eval", "--target", s / "target.png", "--context", s / "context.png", "--depth", s / "depth.pfm", "--pose", s / "pose.txt", "--camera", s / "camera.json"]
    assert run(*args, "--out", tmp_path) == 0
    assert report(tmp_path)["results"]["total_loss"] < 0.01
    assert read_pfm(tmp_path / "loss_map.pfm").shape == (256, 384)


def test_rectify_embed_scanproc(plane_scene, tmp_path):
    assert run("rectify", "--image", plane_scene / "target.png", "--camera", plane_scene / "camera.json", "--focal", 120, "--out", tmp_path / "r") == 0
    assert (tmp_path / "r" / "rectified.png").exists()
    (tmp_path / "pin.json").write_text(json.dumps({"model": "pinhole", "fx": 50, "fy": 50, "cx": 23.5, "cy": 15.5}))
    assert run("embed", "--camera", tmp_path / "pin.json", "--out", tmp_path / "e") == 0
    assert read_embedding(tmp_path / "e" / "embedding.bin").shape == (32, 48, 186)
    assert run("embed", "--camera", plane_scene / "camera.json", "--out", tmp_path / "e2") == 2
    assert run("synth", "--scene", "panorama", "--size", "1440x720", "--out", tmp_path / "p") == 0
    p = tmp_path / "p"
    assert run("scanproc", "--rgb", p / "pano_rgb.png", "--range", p / "pano_range.pfm", "--width", 16, "--height", 12, "--normals", "--out", tmp_path / "s") == 0
    res = report(tmp_path / "s")["results"]
    assert res["valid_fraction"] == 1.0 and res["normal_fraction"] > 0.9


def test_malformed_inputs_exit_2(tmp_path, capsys):
    bad = tmp_path / "broken.jsonl"
    bad.write_text('{"view": 0, "P": [0, 0, 0], "p": [1, 2]}\n{not json\n')
    assert run("calibrate", "--corrs", bad, "--model", "ucm", "--out", tmp_path) == 2
    assert "broken.jsonl:2" in capsys.readouterr().err
    assert run("calibrate", "--corrs", tmp_path / "missing.jsonl", "--model", "ucm", "--out", tmp_path) == 2
    cam = tmp_path / "cam.json"
    cam.write_text('{"model": "ucm",\n "fx": }')
    assert run("perturb", "--camera", cam, "--corrs", bad, "--out", tmp_path) == 2
    assert "cam.json:2" in capsys.readouterr().err


def test_config_file_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# synthetic calibration\nviews = 3\nmodel = ds\nparams = fx=170, fy=175\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "a") == 0
    conf = report(tmp_path / "a")["config"]
    assert conf["views"] == 3 and conf["model"] == "ds" and conf["params"] == {"fx": 170.0, "fy": 175.0}
    assert run("synth", "--config", cfg, "--views", 5, "--out", tmp_path / "b") == 0
    assert report(tmp_path / "b")["config"]["views"] == 5
    cfg.write_text("views = 3\n\nbogus = 1\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "c") == 2
    assert "run.cfg:3" in capsys.readouterr().err
    cfg.write_text("model = fisheye\n")
    assert run("synth", "--config", cfg, "--out", tmp_path / "c") == 2


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "camgeo.cli", "metrics", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2 and "--pred" in proc.stderr
