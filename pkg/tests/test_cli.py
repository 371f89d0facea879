import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import tetra_model
from gsavatar.cli import main
from gsavatar.dataset import read_keypoints, write_motion
from gsavatar.gradcheck import run_suite
from gsavatar.io import load_blob, read_png, sha256_file
from gsavatar.model import SequenceParams, save_model

EIGHT = ["--set", "scene.frames=8", "--set", "scene.heldout=0"]
TINY = ["--set", "train.channels=4", "--set", "train.resolution=16", "--set", "train.hidden=16", "--set", "train.groups=2"]


def run(*argv) -> int:
    return main([str(a) for a in argv])


def digests(root):
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """An eight-frame dataset, a short registration and a two-step training run."""
    root = tmp_path_factory.mktemp("cli")
    assert run("make-synthetic", "--out", root / "data", *EIGHT) == 0
    assert run("register", "--data", root / "data", "--out", root / "reg", "--iterations", 5) == 0
    assert run("train", "--data", root / "data", "--params", root / "reg" / "params.blob", "--out", root / "run", "--iterations", 2, *TINY) == 0
    return root


def test_eight_frame_dataset(workdir):
    data = workdir / "data"
    assert len(list((data / "images").glob("*.png"))) == 8
    _, kp, conf = read_keypoints(data / "keypoints.json")
    assert len(kp) == len(conf) == 8
    assert read_png(data / "images" / "0000.png").shape == (64, 64, 3)
    assert (data / "config.ini").exists()


def test_regeneration_is_byte_identical(workdir, tmp_path):
    assert run("make-synthetic", "--out", tmp_path / "again", *EIGHT) == 0
    assert digests(tmp_path / "again") == digests(workdir / "data")


def test_register_and_train_outputs(workdir):
    reg = json.loads((workdir / "reg" / "registration.json").read_text())
    assert np.isfinite(reg["reprojection_px"])
    assert len(reg["face_visible"]) == 8
    assert SequenceParams.load(workdir / "reg" / "params.blob").n_frames == 8
    rows = (workdir / "run" / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("iteration,frame,") and "lr" in rows[0] and len(rows) == 3
    _, meta = load_blob(workdir / "run" / "checkpoint.blob", "checkpoint")
    assert meta["iteration"] == 2
    ev = json.loads((workdir / "run" / "eval.json").read_text())
    assert len(ev["train"]["psnr"]) == 8 and "heldout" not in ev


def test_animate_keeps_the_frame_count(workdir, tmp_path):
    motion = workdir / "data" / "motion.json"
    n = len(json.loads(motion.read_text())["frames"])
    out = tmp_path / "anim"
    assert run("animate", "--checkpoint", workdir / "run" / "checkpoint.blob", "--model", workdir / "data" / "model.blob", "--motion", motion, "--out", out) == 0
    clouds = sorted(out.glob("cloud_*.blob"))
    assert len(clouds) == n
    arrays, _ = load_blob(clouds[0], "gaussian_cloud")
    assert arrays["positions"].shape[1] == 3


def test_animate_with_a_new_expression_sequence(workdir, tmp_path):
    params = SequenceParams.load(workdir / "reg" / "params.blob")
    params.expression[...] = np.random.default_rng(0).uniform(-1, 1, params.expression.shape)
    write_motion(tmp_path / "m.json", params, frames=[0, 2, 4])
    out = tmp_path / "anim"
    code = run(
        "animate", "--checkpoint", workdir / "run" / "checkpoint.blob", "--model", workdir / "data" / "model.blob",
        "--motion", tmp_path / "m.json", "--out", out, "--cameras", workdir / "data" / "cameras.json",
    )
    assert code == 0
    assert len(list(out.glob("cloud_*.blob"))) == 3 and len(list(out.glob("*.png"))) == 3


def test_render_writes_one_png_per_frame(workdir, tmp_path):
    out = tmp_path / "frames"
    code = run(
        "render", "--checkpoint", workdir / "run" / "checkpoint.blob", "--model", workdir / "data" / "model.blob",
        "--motion", workdir / "data" / "motion.json", "--cameras", workdir / "data" / "cameras.json", "--out", out,
    )
    assert code == 0
    assert len(list(out.glob("*.png"))) == 8


def test_render_with_a_foreign_model_is_a_dimension_error(workdir, tmp_path, capsys):
    save_model(tetra_model(), tmp_path / "tetra.blob")
    code = run(
        "render", "--checkpoint", workdir / "run" / "checkpoint.blob", "--model", tmp_path / "tetra.blob",
        "--motion", workdir / "data" / "motion.json", "--cameras", workdir / "data" / "cameras.json", "--out", tmp_path / "x",
    )
    assert code == 5
    assert "code=5" in capsys.readouterr().err


def test_motion_with_wrong_dimensions_is_rejected(workdir, tmp_path):
    doc = json.loads((workdir / "data" / "motion.json").read_text())
    for f in doc["frames"]:
        f["pose"] = f["pose"][:-1]
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code = run(
        "animate", "--checkpoint", workdir / "run" / "checkpoint.blob", "--model", workdir / "data" / "model.blob",
        "--motion", tmp_path / "bad.json", "--out", tmp_path / "x",
    )
    assert code == 5


def test_missing_inputs_and_bad_usage(workdir, tmp_path, capsys):
    assert run("render", "--checkpoint", tmp_path / "nope.blob", "--model", workdir / "data" / "model.blob",
               "--motion", workdir / "data" / "motion.json", "--cameras", workdir / "data" / "cameras.json", "--out", tmp_path / "x") == 3
    assert run("make-synthetic", "--out", tmp_path / "y", "--set", "scene.nonsense=1") == 2
    assert run("frobnicate") == 2
    assert run("info", "--checkpoint", workdir / "data" / "keypoints.json") == 4
    err = capsys.readouterr().err
    assert "code=3" in err and "code=2" in err


def test_info_reports_dimensions(workdir, capsys):
    assert run("info", "--model", workdir / "data" / "model.blob", "--checkpoint", workdir / "run" / "checkpoint.blob", "--data", workdir / "data") == 0
    out = capsys.readouterr().out
    assert "joints" in out and "frames" in out


def test_gradcheck_lists_every_path():
    proc = subprocess.run([sys.executable, "-m", "gsavatar", "gradcheck"], capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    listed = [line.split()[1] for line in proc.stdout.splitlines() if line.startswith(("ok ", "FAIL"))]
    assert listed == [r.name for r in run_suite()]
    assert {name.split(".")[0] for name in listed} == {"splat", "triplane", "mlp", "laplacian", "face"}
