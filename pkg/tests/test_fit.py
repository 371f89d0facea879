import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import reference_ssim
from gsavatar.field import regress_pose_assets, regress_static_assets
from gsavatar.fit.adam import AdamState, NonFiniteGradient, adam_step, lr_factor, milestone_iterations
from gsavatar.fit.avatar import Frame, animate, build_canonical
from gsavatar.fit.metrics import PSNR_CAP, evaluate, masked_ssim, psnr
from gsavatar.fit.register import KeypointFrame, RegisterConfig, RegistrationProblem, register_sequence
from gsavatar.fit.train import AvatarDataset, TrainConfig, create_field, train_avatar
from gsavatar.mesh import vertex_normals
from gsavatar.model import BODY, FACE, SequenceParams, forward_kinematics, shaped_template
from gsavatar.synthetic import J, landmark_targets, mini_body, orbit_camera, random_pose


# --- Adam -------------------------------------------------------------------------------


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_zero_gradient_leaves_params_alone(rng):
    p = {"w": rng.normal(size=(3, 4))}
    before = p["w"].copy()
    adam_step(AdamState(total_steps=10), p, {"w": np.zeros((3, 4))})
    np.testing.assert_array_equal(p["w"], before)


def test_first_step_closed_form():
    p = {"x": np.array([2.0])}
    adam_step(AdamState(total_steps=10), p, {"x": np.array([0.5])})
    assert p["x"][0] - 2.0 == pytest.approx(-1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_steps_match_textbook_adam(rng):
    grads = rng.normal(size=(20, 5))
    p = {"x": np.zeros(5)}
    state = AdamState(total_steps=1000)
    for g in grads:
        adam_step(state, p, {"x": g})
    np.testing.assert_allclose(p["x"], reference_adam(np.zeros(5), grads), rtol=1e-12, atol=1e-15)


def test_schedule_milestones():
    state = AdamState(total_steps=100)
    assert [state.lr_at(i) for i in (0, 74, 75, 89, 90, 99)] == [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5]


@given(st.integers(1, 100_000))
def test_milestones_are_the_first_iterations_past_each_fraction(total):
    for m, it in zip(("0.75", "0.9"), milestone_iterations(total)):
        assert it == math.ceil(Fraction(m) * total)
    assert lr_factor(0, total) == 1.0


def test_frozen_group_does_not_move(rng):
    p = {"field.a": rng.normal(size=3), "pose": rng.normal(size=3)}
    before = {k: v.copy() for k, v in p.items()}
    adam_step(AdamState(total_steps=5, frozen={"field"}), p, {k: np.ones(3) for k in p})
    np.testing.assert_array_equal(p["field.a"], before["field.a"])
    assert not np.array_equal(p["pose"], before["pose"])


def test_non_finite_gradient_is_rejected_before_any_update(rng):
    p = {"a": rng.normal(size=3), "b": rng.normal(size=3)}
    before = {k: v.copy() for k, v in p.items()}
    with pytest.raises(NonFiniteGradient, match="'b'"):
        adam_step(AdamState(total_steps=5), p, {"a": np.ones(3), "b": np.array([0.0, np.inf, 0.0])})
    for k in p:
        np.testing.assert_array_equal(p[k], before[k])


# --- registration ---------------------------------------------------------------------------


def _keypoint_scene(n_frames=3, seed=0):
    model = mini_body()
    rng = np.random.default_rng(seed)
    truth = SequenceParams.zeros(model, n_frames)
    for t in range(n_frames):
        truth.pose[t] = random_pose(model, rng)
        truth.expression[t] = rng.uniform(-1, 1, model.n_expr)
    cams = [orbit_camera(60.0 * t, 64) for t in range(n_frames)]
    kp, _ = landmark_targets(model, truth, cams)
    frames = [KeypointFrame(kp[t], np.ones(len(kp[t])), cams[t]) for t in range(n_frames)]
    return model, truth, frames, rng


def test_registration_from_the_truth_stays_put():
    model, truth, frames, _ = _keypoint_scene()
    res = register_sequence(model, frames, truth, cfg=RegisterConfig(iterations=20))
    assert res.history[0]["total"] == pytest.approx(0.0, abs=1e-12)
    for name, arr in res.params.arrays().items():
        np.testing.assert_allclose(arr, getattr(truth, name), atol=1e-6, err_msg=name)
    assert res.reprojection_px < 1e-6


def test_zero_confidence_limb_gets_no_keypoint_gradient():
    model, truth, frames, rng = _keypoint_scene()
    init = truth.copy()
    init.pose += rng.normal(scale=0.05, size=init.pose.shape)
    arm = [i for i, lm in enumerate(model.landmarks) if lm.name in ("l_elbow", "l_wrist", "l_hand_tip")]
    for fr in frames:
        fr.confidence[arm] = 0.0
    problem = RegistrationProblem(model, frames, None, init, RegisterConfig())
    _, _, grads = problem.evaluate(init)
    assert not grads["pose"][:, [J["l_elbow"], J["l_wrist"]]].any()
    assert np.abs(grads["pose"][:, J["r_elbow"]]).max() > 0


# --- canonical mesh and animation -------------------------------------------------------------


def test_zero_identity_canonical_equals_positional_mesh(mini_body):
    canon = build_canonical(mini_body)
    np.testing.assert_array_equal(canon.vertices, canon.pos_mesh)


def test_positional_mesh_ignores_shape(mini_body, rng):
    a = build_canonical(mini_body)
    b = build_canonical(mini_body, rng.uniform(-1, 1, mini_body.n_shape))
    np.testing.assert_array_equal(a.pos_mesh, b.pos_mesh)
    assert np.abs(a.vertices - b.vertices).max() > 1e-3


def _small_field(model, canon, randomize=False, seed=0):
    fld = create_field(model, canon, TrainConfig(channels=4, resolution=8, hidden=16, groups=2, seed=seed))
    if randomize:
        rng = np.random.default_rng(seed)
        for arr in fld.parameters().values():
            arr[...] += rng.normal(scale=0.05, size=arr.shape)
    return fld


def test_big_pose_with_neutral_field_is_the_canonical_mesh(mini_body):
    canon = build_canonical(mini_body)
    fld = _small_field(mini_body, canon)
    frame = Frame(mini_body.big_pose, np.zeros(mini_body.n_expr), np.zeros(3))
    tri, pose, _ = animate(fld, mini_body, canon, frame, np.zeros(mini_body.n_shape))
    np.testing.assert_array_equal(tri.positions, canon.vertices)
    np.testing.assert_array_equal(pose.positions, canon.vertices)


def test_expression_moves_only_face_vertices(mini_body, rng):
    canon = build_canonical(mini_body)
    fld = _small_field(mini_body, canon)
    a, b = rng.uniform(-1, 1, mini_body.n_expr), rng.uniform(-1, 1, mini_body.n_expr)
    big = mini_body.big_pose
    pa = animate(fld, mini_body, canon, Frame(big, a, np.zeros(3)), np.zeros(mini_body.n_shape))[0].positions
    pb = animate(fld, mini_body, canon, Frame(big, b, np.zeros(3)), np.zeros(mini_body.n_shape))[0].positions
    moved = np.any(pa != pb, axis=1)
    assert moved.any() and np.all(canon.labels[moved] == FACE)
    np.testing.assert_allclose(pa - pb, canon.expr_dirs @ (a - b), atol=1e-12)


def test_static_and_pose_paths_agree_without_pose_offsets(mini_body, rng):
    canon = build_canonical(mini_body)
    fld = _small_field(mini_body, canon)
    frame = Frame(random_pose(mini_body, rng), rng.uniform(-1, 1, mini_body.n_expr), rng.normal(size=3))
    tri, pose, cache = animate(fld, mini_body, canon, frame, np.zeros(mini_body.n_shape))
    assert not cache.dv_pose.any()
    np.testing.assert_array_equal(tri.positions, pose.positions)


def test_animation_matches_scripted_composition(mini_body, rng):
    model = mini_body
    shape = rng.uniform(-0.5, 0.5, model.n_shape)
    jo = rng.normal(scale=0.01, size=(model.n_joints, 3))
    fo = rng.normal(scale=0.002, size=(len(model.face_vertex_index), 3))
    canon = build_canonical(model, shape, jo, fo)
    fld = _small_field(model, canon, randomize=True, seed=3)
    theta, psi, t = random_pose(model, rng), rng.uniform(-1, 1, model.n_expr), rng.normal(scale=0.1, size=3)
    tri, pose, _ = animate(fld, model, canon, Frame(theta, psi, t), shape, jo, fo)

    def skin(points, transforms, weights):
        homo = np.hstack([points, np.ones((len(points), 1))])
        per_joint = np.einsum("jab,vb->vja", transforms, homo)[..., :3]
        return np.einsum("vj,vja->va", weights, per_joint)

    rest_v, rest_j = shaped_template(model, shape, jo, fo)
    big = forward_kinematics(rest_j, model.parents, model.big_pose)
    posed = forward_kinematics(rest_j, model.parents, theta)
    vbar = canon.matrix @ skin(rest_v, big, model.skin_weights)
    static = regress_static_assets(fld)
    vbar_tri = vbar + static.offsets + canon.expr_dirs @ psi
    pose_in = theta[1:].ravel()
    dv_pose = regress_pose_assets(fld, static.features, pose_in, np.zeros_like(vbar)).offsets
    vbar_pose = vbar_tri + dv_pose * (canon.labels == BODY)[:, None]
    assets = regress_pose_assets(fld, static.features, pose_in, vertex_normals(vbar_pose, canon.faces)[0])
    rel = np.stack([posed[j] @ np.linalg.inv(big[j]) for j in range(model.n_joints)])

    assert np.abs(dv_pose).max() > 1e-4
    np.testing.assert_allclose(tri.positions, skin(vbar_tri, rel, canon.weights) + t, atol=1e-6)
    np.testing.assert_allclose(pose.positions, skin(vbar_pose, rel, canon.weights) + t, atol=1e-6)
    np.testing.assert_allclose(pose.log_scales, static.log_scales + assets.log_scale_offsets, atol=1e-12)
    np.testing.assert_allclose(pose.colors, np.clip(static.colors + assets.color_offsets, 0, 1), atol=1e-12)
    np.testing.assert_array_equal(tri.colors, static.colors)


# --- training ---------------------------------------------------------------------------------


def _dataset(scene):
    return AvatarDataset(scene.images, scene.masks, scene.cameras, scene.background)


def test_fully_frozen_training_is_a_no_op(scene):
    model = scene.model
    canon = build_canonical(model, scene.gt.shape, scene.gt.joint_offset, scene.gt.face_offset)
    cfg = TrainConfig(iterations=10, frozen=("field", "params"))
    fld = create_field(model, canon, cfg)
    before = {k: v.copy() for k, v in fld.parameters().items()}
    res = train_avatar(model, _dataset(scene), scene.gt, cfg, train_frames=[0], field=fld, canon=canon)
    for k, v in res.field.parameters().items():
        assert v.tobytes() == before[k].tobytes(), k
    for k, v in res.params.arrays().items():
        assert v.tobytes() == getattr(scene.gt, k).tobytes(), k
    assert len({h["total"] for h in res.history}) == 1


def test_loss_falls_over_the_first_fifty_iterations(scene):
    res = train_avatar(scene.model, _dataset(scene), scene.gt, TrainConfig(iterations=50), train_frames=[0])
    losses = np.array([h["total"] for h in res.history])
    upticks = losses[1:] / losses[:-1]
    assert upticks.max() <= 1.05, f"largest uptick {upticks.max():.3f} at iteration {upticks.argmax() + 1}"
    assert losses[-1] < losses[0]
    assert np.array_equal(res.field.pos_mesh, res.canon.pos_mesh)


def test_mismatched_frame_counts_are_rejected(scene):
    with pytest.raises(ValueError, match="frames"):
        train_avatar(scene.model, _dataset(scene), SequenceParams.zeros(scene.model, 3), TrainConfig(iterations=1))


# --- metrics --------------------------------------------------------------------------------


def test_identical_images_hit_the_cap(rng):
    img = rng.uniform(size=(32, 32, 3))
    mask = np.ones((32, 32), dtype=bool)
    ev = evaluate([img], [img], [mask])
    assert ev.psnr == [PSNR_CAP] and ev.ssim[0] == pytest.approx(1.0)


def test_uniform_error_of_a_tenth_is_twenty_db(rng):
    img = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    mask = rng.uniform(size=(16, 16)) > 0.3
    assert psnr(img + 0.1, img, mask) == pytest.approx(20.0, abs=1e-9)


def test_pixels_outside_the_mask_do_not_count(rng):
    a = rng.uniform(size=(16, 16, 3))
    b = a.copy()
    mask = np.zeros((16, 16), dtype=bool)
    mask[4:12, 4:12] = True
    b[~mask] = 0.0
    assert psnr(a, b, mask) == PSNR_CAP


def test_checkerboard_against_its_inverse():
    board = (np.indices((32, 32)).sum(axis=0) % 2).astype(np.float64)
    x = np.repeat(board[..., None], 3, axis=2)
    mask = np.ones((32, 32), dtype=bool)
    value = masked_ssim(x, 1.0 - x, mask)
    assert value == pytest.approx(reference_ssim(x, 1.0 - x), abs=1e-6)
    assert value < -0.99


def test_empty_mask_is_an_error(rng):
    img = rng.uniform(size=(8, 8, 3))
    with pytest.raises(ValueError):
        psnr(img, img, np.zeros((8, 8), dtype=bool))
    with pytest.raises(ValueError):
        evaluate([img], [img, img], [np.ones((8, 8), dtype=bool)])
