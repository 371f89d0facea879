"""End-to-end acceptance criteria, each at its stated tolerance and time limit.

Every test appends one pass/fail line to the acceptance summary printed at the
end of the run.
"""

import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE, pinhole, random_cloud, smplx_sized_mesh
from gsavatar.cli import main
from gsavatar.dataset import load_sequence
from gsavatar.fit.avatar import Frame, animate, animate_ground_truth, build_canonical
from gsavatar.fit.metrics import evaluate
from gsavatar.fit.register import KeypointFrame, register_sequence
from gsavatar.fit.train import AvatarDataset, TrainConfig, create_field, render_frame, train_avatar
from gsavatar.gradcheck import FACE_TOLERANCE, TOLERANCE, run_suite
from gsavatar.io import sha256_file
from gsavatar.mesh import subdivide
from gsavatar.model import FACE, forward_kinematics, lbs, shaped_template
from gsavatar.objective import LossWeights
from gsavatar.splat import brute_force_render, render_gaussians
from gsavatar.synthetic import random_pose

pytestmark = pytest.mark.slow


@contextmanager
def criterion(number: int, title: str):
    """Record a pass/fail line for one criterion; details are filled in through the yielded dict."""
    info: dict[str, str] = {}
    start = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        detail = info.get("detail") or str(exc).splitlines()[0][:120]
        ACCEPTANCE.append(f"criterion {number}: FAIL {title} ({detail}; {time.perf_counter() - start:.1f}s)")
        raise
    ACCEPTANCE.append(f"criterion {number}: PASS {title} ({info.get('detail', '')}; {time.perf_counter() - start:.1f}s)")


def elapsed_under(start: float, limit: float) -> float:
    took = time.perf_counter() - start
    assert took < limit, f"took {took:.1f}s, limit {limit:.0f}s"
    return took


# --- shared synthetic data ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """The default synthetic sequence, written by the CLI and read back from disk."""
    out = tmp_path_factory.mktemp("acceptance") / "data"
    assert main(["make-synthetic", "--out", str(out)]) == 0
    return load_sequence(out)


@pytest.fixture(scope="module")
def registration(dataset):
    seq = dataset
    frames = [
        KeypointFrame(seq.keypoints[t], seq.confidence[t], seq.cameras[t], seq.face_vertices[t], seq.images[t])
        for t in range(len(seq))
    ]
    start = time.perf_counter()
    res = register_sequence(seq.model, frames, seq.init, seq.face_neutral)
    return res, time.perf_counter() - start


def _avatar_data(seq, reg) -> AvatarDataset:
    return AvatarDataset(seq.images, seq.masks, seq.cameras, seq.background, reg.visible, reg.texture)


def _render_eval(seq, result, frames):
    images = [render_frame(result.field, seq.model, result.canon, result.params, t, seq.cameras[t], seq.background)[0] for t in frames]
    return evaluate(images, [seq.images[t] for t in frames], [seq.masks[t] for t in frames])


# --- 1 and 9: rasterizer ------------------------------------------------------------------------


def _oracle_clouds():
    rng = np.random.default_rng(2024)
    return [random_cloud(rng, int(rng.integers(1, 257))) for _ in range(100)]


def test_criterion_1_tiled_renderer_matches_brute_force():
    with criterion(1, "tiled renderer == brute force on 100 clouds, 1e-5") as info:
        cam = pinhole(64)
        start = time.perf_counter()
        worst = 0.0
        for cloud in _oracle_clouds():
            tiled = render_gaussians(cloud, cam, keep_cache=False)
            brute = brute_force_render(cloud, cam)
            worst = max(worst, float(np.abs(tiled.rgb - brute.rgb).max()), float(np.abs(tiled.alpha - brute.alpha).max()))
        info["detail"] = f"max diff {worst:.2e}"
        assert worst <= 1e-5
        elapsed_under(start, 60)


def test_criterion_9_compositing_conserves_transmittance(dataset):
    with criterion(9, "sum w*T + T_final == 1 within 1e-6") as info:
        worst = 0.0
        cam = pinhole(64)
        for cloud in _oracle_clouds():
            for res in (render_gaussians(cloud, cam, keep_cache=False), brute_force_render(cloud, cam)):
                worst = max(worst, float(np.abs(res.weight_sum + res.transmittance - 1.0).max()))
        seq = dataset
        canon = build_canonical(seq.model, seq.gt.shape, seq.gt.joint_offset, seq.gt.face_offset)
        colors = np.full((canon.n_points, 3), 0.5)
        log_scales = np.full(canon.n_points, np.log(canon.mean_edge()))
        for t in range(len(seq)):
            frame = Frame(seq.gt.pose[t], seq.gt.expression[t], seq.gt.translation[t])
            res = render_gaussians(animate_ground_truth(seq.model, canon, frame, seq.gt, colors, log_scales), seq.cameras[t], keep_cache=False)
            worst = max(worst, float(np.abs(res.weight_sum + res.transmittance - 1.0).max()))
        info["detail"] = f"max deviation {worst:.2e} over {100 * 2 + len(seq)} images"
        assert worst <= 1e-6


# --- 2: gradients -------------------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    with criterion(2, "gradient suite (a)-(e)") as info:
        start = time.perf_counter()
        results = run_suite(seed=0)
        failed = [r.line() for r in results if not r.passed]
        info["detail"] = f"{len(results)} checks, worst rel err {max(r.max_rel_error for r in results):.1e}"
        for r in results:
            assert r.tolerance == (FACE_TOLERANCE if r.name.startswith("face") else TOLERANCE)
        assert not failed, failed
        elapsed_under(start, 300)


# --- 3: subdivision -----------------------------------------------------------------------------


def test_criterion_3_subdivision_arithmetic():
    with criterion(3, "two subdivisions of 10475/20908 -> 167285/334528") as info:
        start = time.perf_counter()
        v, f = smplx_sized_mesh()
        assert (len(v), len(f)) == (10475, 20908)
        for _ in range(2):
            v, f, _ = subdivide(v, f)
        info["detail"] = f"{len(v)} vertices, {len(f)} faces"
        assert len(f) == 334_528 and len(v) == 167_285
        elapsed_under(start, 30)


# --- 4: skinning and animation identities -------------------------------------------------------


def test_criterion_4_skinning_and_animation_identities(mini_body):
    with criterion(4, "rest-pose identity, expression locality, path agreement") as info:
        model = mini_body
        rng = np.random.default_rng(4)
        shape = rng.uniform(-0.5, 0.5, model.n_shape)
        rest_v, rest_j = shaped_template(model, shape, None, None)
        rest = lbs(rest_v, forward_kinematics(rest_j, model.parents, np.zeros((model.n_joints, 3))), model.skin_weights)
        identity_err = float(np.abs(rest - rest_v).max())
        assert identity_err <= 1e-6

        canon = build_canonical(model)
        fld = create_field(model, canon, TrainConfig(channels=4, resolution=8, hidden=16, groups=2))
        zero = np.zeros(model.n_shape)
        a, b = rng.uniform(-1, 1, model.n_expr), rng.uniform(-1, 1, model.n_expr)
        pa = animate(fld, model, canon, Frame(model.big_pose, a, np.zeros(3)), zero)[0].positions
        pb = animate(fld, model, canon, Frame(model.big_pose, b, np.zeros(3)), zero)[0].positions
        moved = np.any(pa != pb, axis=1)
        assert moved.any() and np.all(canon.labels[moved] == FACE)
        expr_err = float(np.abs((pa - pb) - canon.expr_dirs @ (a - b)).max())
        assert expr_err <= 1e-12

        frame = Frame(random_pose(model, rng), a, rng.normal(scale=0.1, size=3))
        tri, pose, cache = animate(fld, model, canon, frame, zero)
        assert not cache.dv_pose.any()
        np.testing.assert_array_equal(tri.positions, pose.positions)
        info["detail"] = f"identity {identity_err:.1e}, expression {expr_err:.1e}, paths equal"


# --- 5: registration ----------------------------------------------------------------------------


def test_criterion_5_registration_recovery(dataset, registration):
    with criterion(5, "registration: reprojection < 0.5 px, joint offsets within 5 mm") as info:
        res, took = registration
        err = np.linalg.norm(res.params.joint_offset - dataset.gt.joint_offset, axis=1).max()
        info["detail"] = f"reprojection {res.reprojection_px:.3f} px, max joint error {1000 * err:.2f} mm, fit {took:.1f}s"
        assert np.abs(dataset.gt.joint_offset).max() >= 0.02 - 1e-12 and np.abs(dataset.gt.face_offset).max() > 0
        assert res.reprojection_px < 0.5
        assert err <= 0.005
        assert took < 600, f"took {took:.1f}s"


# --- 6: synthetic round trip --------------------------------------------------------------------


def test_criterion_6_synthetic_round_trip(dataset, registration):
    with criterion(6, "held-out PSNR > 30 dB and SSIM > 0.95") as info:
        seq = dataset
        reg, reg_time = registration
        assert len(seq.train) == 8 and len(seq.heldout) == 2 and seq.images[0].shape == (64, 64, 3)
        start = time.perf_counter()
        result = train_avatar(seq.model, _avatar_data(seq, reg), reg.params, TrainConfig(), train_frames=seq.train)
        ev = _render_eval(seq, result, seq.heldout)
        info["detail"] = f"PSNR {ev.mean_psnr:.2f} dB, SSIM {ev.mean_ssim:.4f}, {TrainConfig().iterations} iterations"
        assert ev.mean_psnr > 30 and min(ev.psnr) > 30
        assert ev.mean_ssim > 0.95 and min(ev.ssim) > 0.95
        elapsed_under(start - reg_time, 1800)


ABLATION_ITERATIONS = 1500  # long enough for the unregularized offsets to overfit the training views


# --- 7: Laplacian regularizer -------------------------------------------------------------------


def test_criterion_7_laplacian_regularizer_efficacy(dataset, registration):
    with criterion(7, "Laplacian position regularizer gains >= 2 dB on withheld views") as info:
        seq = dataset
        reg, reg_time = registration
        withheld = [3, 4, 5]
        train = [t for t in seq.train if t not in withheld]
        start = time.perf_counter()
        scores = {}
        for name, weight in (("with", LossWeights().lap_position), ("without", 0.0)):
            cfg = TrainConfig(iterations=ABLATION_ITERATIONS, weights=replace(LossWeights(), lap_position=weight))
            result = train_avatar(seq.model, _avatar_data(seq, reg), reg.params, cfg, train_frames=train)
            scores[name] = _render_eval(seq, result, withheld).mean_psnr
        gain = scores["with"] - scores["without"]
        info["detail"] = f"with {scores['with']:.2f} dB, without {scores['without']:.2f} dB, gain {gain:+.2f} dB"
        assert gain >= 2.0
        elapsed_under(start - reg_time, 3600)


# --- 8: schedule and determinism ----------------------------------------------------------------


def _tiny(iterations=20, workers=1):
    return TrainConfig(iterations=iterations, channels=4, resolution=16, hidden=16, groups=2, workers=workers)


def test_criterion_8_schedule_and_determinism(scene, tmp_path):
    with criterion(8, "lr milestones, bit-identical reruns, thread-count invariance") as info:
        data = AvatarDataset(scene.images, scene.masks, scene.cameras, scene.background)
        runs = {}
        for name, workers in (("a", 1), ("b", 1), ("c", 4)):
            runs[name] = train_avatar(scene.model, data, scene.gt, _tiny(workers=workers), train_frames=scene.train, out_dir=tmp_path / name)
        lrs = [h["lr"] for h in runs["a"].history]
        expected = [1e-3] * 15 + [1e-4] * 3 + [1e-5] * 2
        assert lrs == expected, lrs

        assert sha256_file(tmp_path / "a" / "checkpoint.blob") == sha256_file(tmp_path / "b" / "checkpoint.blob")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

        la = np.array([h["total"] for h in runs["a"].history])
        lc = np.array([h["total"] for h in runs["c"].history])
        drift = float(np.abs(la - lc).max())
        for k, v in runs["a"].field.parameters().items():
            drift = max(drift, float(np.abs(v - runs["c"].field.parameters()[k]).max()))
        info["detail"] = f"milestones at 15/18 of 20, checkpoints identical, 1-vs-4 worker drift {drift:.1e}"
        assert drift <= 1e-6
