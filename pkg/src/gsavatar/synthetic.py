"""Procedural 16-joint "mini-body" template built from icosphere ellipsoids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera, look_at
from .mesh import subdivide
from .model import (
    BODY,
    FACE,
    LEFT_HAND,
    RIGHT_HAND,
    Landmark,
    SequenceParams,
    TemplateModel,
    project_points,
    shaped_template,
    validate_model,
)
from .splat import brute_force_render

JOINT_NAMES = [
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]  # fmt: skip
PARENTS = np.array([-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14])
JOINT_MIRROR = np.array([0, 1, 2, 3, 7, 8, 9, 4, 5, 6, 13, 14, 15, 10, 11, 12])
J = {name: i for i, name in enumerate(JOINT_NAMES)}

REST_JOINTS = np.array(
    [
        [0.0, 1.00, 0.0], [0.0, 1.25, 0.0], [0.0, 1.50, 0.0], [0.0, 1.60, 0.0],
        [0.18, 1.45, 0.0], [0.45, 1.45, 0.0], [0.70, 1.45, 0.0],
        [-0.18, 1.45, 0.0], [-0.45, 1.45, 0.0], [-0.70, 1.45, 0.0],
        [0.10, 0.95, 0.0], [0.10, 0.53, 0.0], [0.10, 0.10, 0.0],
        [-0.10, 0.95, 0.0], [-0.10, 0.53, 0.0], [-0.10, 0.10, 0.0],
    ]
)  # fmt: skip


def icosphere(level: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with outward (counter-clockwise) winding."""
    p = (1 + 5**0.5) / 2
    v = np.array(
        [[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0], [0, -1, p], [0, 1, p],
         [0, -1, -p], [0, 1, -p], [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]],
        dtype=np.float64,
    )  # fmt: skip
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
         [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5],
         [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )  # fmt: skip
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        v, f, _ = subdivide(v, f)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v, f


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _limb(a: str, b: str, radius: float, level: int = 1, parent: str | None = None):
    """Ellipsoid spanning joint a → joint b, weighted to a with blends at both ends."""
    pa, pb = REST_JOINTS[J[a]], REST_JOINTS[J[b]]
    axis = pb - pa
    length = np.linalg.norm(axis)
    d = axis / length
    sphere, faces = icosphere(level)
    # orthonormal frame with d as the long axis
    helper = np.array([0.0, 0.0, 1.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    verts = (pa + pb) / 2 + sphere[:, :1] * e1 * radius + sphere[:, 1:2] * e2 * radius + sphere[:, 2:3] * d * (0.55 * length)
    # keep outward winding: the frame (e1, e2, d) is right-handed
    t = np.clip(((verts - pa) @ d) / length, 0.0, 1.0)
    w = {a: 1.0 - 0.5 * _smoothstep((t - 0.75) / 0.25)}
    w[b] = 0.5 * _smoothstep((t - 0.75) / 0.25)
    if parent is not None:
        blend = 0.5 * (1.0 - _smoothstep(t / 0.25))
        w[parent] = blend
        w[a] = w[a] - blend
    return verts, faces, w


def _ellipsoid(center, radii, level: int):
    sphere, faces = icosphere(level)
    return np.asarray(center) + sphere * np.asarray(radii), faces


def _parts():
    parts = []
    # torso: pelvis → spine → neck by height
    v, f = _ellipsoid([0.0, 1.22, 0.0], [0.17, 0.30, 0.10], 2)
    h = v[:, 1]
    w_neck = _smoothstep((h - 1.38) / 0.14)
    w_pelvis = 1.0 - _smoothstep((h - 1.02) / 0.18)
    parts.append(("torso", v, f, {"pelvis": w_pelvis, "spine": 1.0 - w_pelvis - w_neck, "neck": w_neck}, BODY))
    v, f = _ellipsoid([0.0, 1.69, 0.01], [0.095, 0.115, 0.105], 2)
    w_neckh = 0.5 * (1.0 - _smoothstep((v[:, 1] - 1.58) / 0.05))
    labels = np.where(v[:, 2] > 0.01 + 1e-9, FACE, BODY)
    parts.append(("head", v, f, {"head": 1.0 - w_neckh, "neck": w_neckh}, labels))
    for side, sx, hand_label in (("l", 1.0, LEFT_HAND), ("r", -1.0, RIGHT_HAND)):
        parts.append((f"{side}_upper_arm", *_limb(f"{side}_shoulder", f"{side}_elbow", 0.048), BODY))
        parts.append((f"{side}_forearm", *_limb(f"{side}_elbow", f"{side}_wrist", 0.040, parent=f"{side}_shoulder"), BODY))
        v, f = _ellipsoid([sx * 0.785, 1.45, 0.0], [0.075, 0.022, 0.045], 1)
        parts.append((f"{side}_hand", v, f, {f"{side}_wrist": np.ones(len(v))}, hand_label))
        parts.append((f"{side}_thigh", *_limb(f"{side}_hip", f"{side}_knee", 0.068, parent="pelvis"), BODY))
        parts.append((f"{side}_shin", *_limb(f"{side}_knee", f"{side}_ankle", 0.052, parent=f"{side}_hip"), BODY))
    return parts


def _f32(x):
    return np.asarray(x, dtype=np.float32).astype(np.float64)


BIG_POSE_DEGREES = {"l_hip": 15.0, "r_hip": -15.0, "l_shoulder": -45.0, "r_shoulder": 45.0}


def mini_body() -> TemplateModel:
    """Deterministic 16-joint template: 12 closed ellipsoid parts, S=4 shape and E=4 expression directions.

    All floats are rounded through float32 so the in-memory model equals its
    saved-and-reloaded copy bit for bit.
    """
    verts, faces, labels, dense_w, part_id = [], [], [], [], []
    offset = 0
    for k, (name, v, f, weights, lab) in enumerate(_parts()):
        n = len(v)
        verts.append(v)
        faces.append(f + offset)
        labels.append(np.broadcast_to(lab, n))
        w = np.zeros((n, len(JOINT_NAMES)))
        for jn, col in weights.items():
            w[:, J[jn]] = col
        dense_w.append(w)
        part_id.append(np.full(n, k))
        offset += n
    V = np.concatenate(verts)
    F = np.concatenate(faces)
    labels = np.concatenate(labels).astype(np.int64)
    W = np.clip(np.concatenate(dense_w), 0.0, None)
    part_id = np.concatenate(part_id)

    order = np.argsort(-W, axis=1, kind="stable")[:, :4]
    w_idx = order.astype(np.int64)
    w_val = np.take_along_axis(W, order, axis=1)
    w_val = _f32(w_val / w_val.sum(axis=1, keepdims=True))
    w_idx = np.where(w_val > 0, w_idx, w_idx[:, :1])

    V = _f32(V)
    nV = len(V)
    # shape directions
    centers = np.stack([V[part_id == k].mean(axis=0) for k in range(part_id.max() + 1)])[part_id]
    sd = np.zeros((nV, 3, 4))
    sd[:, 1, 0] = 0.08 * (V[:, 1] - 1.0)  # stature
    radial = V - centers
    radial[:, 1] = 0.0
    sd[:, :, 1] = 0.15 * radial  # girth
    arm = np.abs(V[:, 0]) > 0.2
    sd[arm, 0, 2] = 0.1 * np.sign(V[arm, 0]) * (np.abs(V[arm, 0]) - 0.18)  # arm span
    sd[:, 0, 3] = 0.1 * V[:, 0] * (V[:, 1] > 1.3) * (V[:, 1] < 1.6)  # shoulder width
    sd = _f32(sd)

    # expression directions on the face only
    face = labels == FACE
    head_c = np.array([0.0, 1.69, 0.01])
    rel = V - head_c
    ed = np.zeros((nV, 3, 4))
    low = _smoothstep((-rel[:, 1]) / 0.08)
    ed[:, 1, 0] = -0.03 * low  # jaw open
    ed[:, 0, 1] = 0.02 * rel[:, 0] / 0.1 * low  # smile
    ed[:, 1, 1] = 0.01 * low * np.abs(rel[:, 0]) / 0.1
    ed[:, 1, 2] = 0.02 * _smoothstep(rel[:, 1] / 0.08)  # brow raise
    ed[:, 2, 3] = 0.015 * np.exp(-((np.abs(rel[:, 0]) - 0.05) ** 2 + rel[:, 1] ** 2) / 0.002)  # cheek puff
    ed[~face] = 0.0
    ed = _f32(ed)

    # UV: planar projection of the face region
    uv = np.zeros((nV, 2))
    fv = V[face]
    lo, hi = fv.min(axis=0), fv.max(axis=0)
    uv[face, 0] = (fv[:, 0] - lo[0]) / (hi[0] - lo[0])
    uv[face, 1] = 1.0 - (fv[:, 1] - lo[1]) / (hi[1] - lo[1])
    uv = _f32(np.clip(uv, 0.0, 1.0))

    # mirror tables
    flipped = V * np.array([-1.0, 1.0, 1.0])
    dist, vmirror = cKDTree(V).query(flipped)
    if dist.max() > 1e-5:
        raise RuntimeError("mini-body is not left/right symmetric")

    head_idx = np.flatnonzero(part_id == 1)
    front = np.flatnonzero(face)
    fr = rel[front]
    eye_score = -np.abs(fr[:, 1] - 0.035) - np.abs(np.abs(fr[:, 0]) - 0.04) + 0.5 * fr[:, 2]
    left_eye = front[fr[:, 0] > 0][np.argmax(eye_score[fr[:, 0] > 0])]
    right_eye = vmirror[left_eye]
    nose = front[np.argmax(fr[:, 2] - np.abs(fr[:, 0]) - np.abs(fr[:, 1]))]

    landmarks = [Landmark(n, "joint", i) for i, n in enumerate(JOINT_NAMES)]
    for side, lab in (("l", LEFT_HAND), ("r", RIGHT_HAND)):
        hand = np.flatnonzero(labels == lab)
        tip = hand[np.argmax(np.abs(V[hand, 0]))]
        landmarks.append(Landmark(f"{side}_hand_tip", "vertex", int(tip)))
        shin = np.flatnonzero(part_id == (6 if side == "l" else 11))
        landmarks.append(Landmark(f"{side}_toe", "vertex", int(shin[np.argmin(V[shin, 1] - 0.2 * V[shin, 2])])))
    landmarks += [
        Landmark("nose", "vertex", int(nose)),
        Landmark("l_eye", "vertex", int(left_eye)),
        Landmark("r_eye", "vertex", int(right_eye)),
    ]

    big = np.zeros((len(JOINT_NAMES), 3))
    for jn, deg in BIG_POSE_DEGREES.items():
        big[J[jn], 2] = np.deg2rad(deg)

    model = TemplateModel(
        vertices=V,
        faces=F.astype(np.int64),
        joints=_f32(REST_JOINTS),
        parents=PARENTS.copy(),
        weight_index=w_idx,
        weight_value=w_val,
        shape_dirs=sd,
        expr_dirs=ed,
        part_labels=labels,
        joint_mirror=JOINT_MIRROR.copy(),
        vertex_mirror=vmirror.astype(np.int64),
        big_pose=_f32(big),
        landmarks=landmarks,
        face_center=head_idx.astype(np.int64),
        eye_vertices=np.array([left_eye, right_eye], dtype=np.int64),
        joint_names=list(JOINT_NAMES),
        regressor=None,
        uv=uv,
    )
    validate_model(model)
    return model


# --- synthetic scenes --------------------------------------------------------


@dataclass
class SceneConfig:
    seed: int = 0
    frames: int = 8
    heldout: int = 2
    size: int = 64
    subdivisions: int = 1
    distance: float = 3.2
    joint_offset_cm: float = 2.0
    init_noise: float = 0.5


@dataclass
class Scene:
    model: TemplateModel
    gt: SequenceParams
    init: SequenceParams
    cameras: list[Camera]
    images: list[np.ndarray]
    masks: list[np.ndarray]
    keypoints: np.ndarray  # T×K×2
    confidence: np.ndarray  # T×K
    face_vertices: np.ndarray  # T×Fv×3
    face_neutral: np.ndarray  # Fv×3
    background: np.ndarray
    colors: np.ndarray  # ground-truth canonical colors
    log_scales: np.ndarray
    train: list[int]
    heldout: list[int]


def orbit_camera(azimuth_deg: float, size: int, distance: float = 3.2) -> Camera:
    """Camera on a circle around the body, looking at hip height; azimuth 0 faces the front (+z)."""
    az = np.deg2rad(azimuth_deg)
    eye = np.array([distance * np.sin(az), 1.15, distance * np.cos(az)])
    rot, trans = look_at(eye, np.array([0.0, 0.92, 0.0]))
    f = 100.0 * size / 64.0
    c = (size - 1) / 2.0
    return Camera(f, f, c, c, size, size, rot, trans)


def random_pose(model: TemplateModel, rng: np.random.Generator) -> np.ndarray:
    """A plausible pose near a relaxed stance (axis-angle per joint, radians)."""
    pose = np.zeros((model.n_joints, 3))
    u = lambda lo, hi: rng.uniform(lo, hi)  # noqa: E731
    pose[J["pelvis"]] = [u(-0.1, 0.1), u(-0.3, 0.3), u(-0.05, 0.05)]
    pose[J["spine"]] = [u(-0.15, 0.15), u(-0.2, 0.2), u(-0.1, 0.1)]
    pose[J["neck"]] = [u(-0.1, 0.1), u(-0.2, 0.2), u(-0.1, 0.1)]
    pose[J["head"]] = [u(-0.2, 0.2), u(-0.3, 0.3), u(-0.1, 0.1)]
    for side, s in (("l", 1.0), ("r", -1.0)):
        pose[J[f"{side}_shoulder"]] = [u(-0.3, 0.3), s * u(-0.4, 0.4), -s * u(0.2, 1.0)]
        pose[J[f"{side}_elbow"]] = [0.0, s * u(0.0, 0.9), 0.0]
        pose[J[f"{side}_wrist"]] = [u(-0.3, 0.3), u(-0.2, 0.2), u(-0.3, 0.3)]
        pose[J[f"{side}_hip"]] = [u(-0.4, 0.3), u(-0.1, 0.1), s * u(0.0, 0.25)]
        pose[J[f"{side}_knee"]] = [u(0.0, 0.6), 0.0, 0.0]
        pose[J[f"{side}_ankle"]] = [u(-0.2, 0.2), 0.0, 0.0]
    return pose


def ground_truth_colors(pos_mesh: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Smooth per-vertex albedo: clothing, skin, hair and simple facial features."""
    x, y, z = pos_mesh.T
    col = np.empty((len(x), 3))
    shirt = np.array([0.20, 0.36, 0.70])
    pants = np.array([0.28, 0.26, 0.32])
    skin = np.array([0.86, 0.66, 0.52])
    hair = np.array([0.33, 0.21, 0.12])
    col[:] = np.where((y > 0.93)[:, None], shirt, pants)
    col += 0.08 * np.stack([np.sin(7 * x) * np.cos(5 * y), np.sin(4 * y + 3 * z), np.cos(6 * z + 2 * x)], axis=1)
    col[(labels == LEFT_HAND) | (labels == RIGHT_HAND)] = skin
    head = y > 1.56
    col[head & (labels == BODY)] = hair
    face = labels == FACE
    col[face] = skin
    c = np.array([0.0, 1.69, 0.01])
    r = pos_mesh - c
    for ex in (0.04, -0.04):
        eye = np.exp(-((r[:, 0] - ex) ** 2 + (r[:, 1] - 0.035) ** 2) / 2e-4)
        col[face] = col[face] * (1 - 0.8 * eye[face, None]) + 0.8 * eye[face, None] * np.array([0.1, 0.1, 0.15])
    mouth = np.exp(-(r[:, 0] ** 2 / 1.5e-3 + (r[:, 1] + 0.055) ** 2 / 1e-4))
    col[face] = col[face] * (1 - 0.7 * mouth[face, None]) + 0.7 * mouth[face, None] * np.array([0.7, 0.2, 0.2])
    return np.clip(col, 0.05, 0.95)


def background_image(size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    return np.stack([0.55 + 0.15 * yy, 0.6 - 0.1 * xx, 0.5 + 0.1 * xx * yy], axis=2)


def make_scene(cfg: SceneConfig | None = None) -> Scene:
    """Seeded ground-truth avatar rendered over a static background, with keypoints and face geometry."""
    from .fit.avatar import Frame, animate_ground_truth, build_canonical

    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(cfg.seed)
    model = mini_body()
    T = cfg.frames + cfg.heldout
    gt = SequenceParams.zeros(model, T)
    gt.shape = rng.uniform(-0.5, 0.5, model.n_shape)
    d = cfg.joint_offset_cm / 100.0
    gt.joint_offset[J["l_wrist"], 0] = d
    gt.joint_offset[J["r_wrist"], 0] = -d
    fidx = model.face_vertex_index
    rel = model.vertices[fidx] - np.array([0.0, 1.69, 0.01])
    gt.face_offset = np.stack([0.0 * rel[:, 0], 0.004 * np.exp(-(rel[:, 1] ** 2) / 2e-3), 0.006 * np.exp(-(rel[:, 0] ** 2 + rel[:, 1] ** 2) / 1e-3)], axis=1)
    for t in range(T):
        gt.pose[t] = random_pose(model, rng)
        gt.expression[t] = rng.uniform(-1.0, 1.0, model.n_expr)
        gt.translation[t] = [rng.uniform(-0.05, 0.05), 0.0, rng.uniform(-0.05, 0.05)]

    azimuths = [45.0 * k for k in range(cfg.frames)] + [22.5 + 180.0 * k for k in range(cfg.heldout)]
    cameras = [orbit_camera(az, cfg.size, cfg.distance) for az in azimuths]
    canon = build_canonical(model, gt.shape, gt.joint_offset, gt.face_offset, cfg.subdivisions)
    colors = ground_truth_colors(canon.pos_mesh, canon.labels)
    log_scales = np.full(canon.n_points, np.log(canon.mean_edge()))
    bg = background_image(cfg.size)

    images, masks = [], []
    for t in range(T):
        frame = Frame(gt.pose[t], gt.expression[t], gt.translation[t])
        cloud = animate_ground_truth(model, canon, frame, gt, colors, log_scales)
        res = brute_force_render(cloud, cameras[t])
        images.append(np.clip(res.rgb + res.transmittance[..., None] * bg, 0.0, 1.0))
        masks.append(res.alpha > 0.5)

    kp, fv = landmark_targets(model, gt, cameras)
    rest_v, _ = shaped_template(model, gt.shape, gt.joint_offset, gt.face_offset)
    init = gt.copy()
    s = cfg.init_noise
    init.pose = gt.pose + s * rng.normal(0.0, 0.05, gt.pose.shape)
    init.expression = gt.expression + s * rng.normal(0.0, 0.2, gt.expression.shape)
    init.translation = gt.translation + s * rng.normal(0.0, 0.02, gt.translation.shape)
    init.shape = gt.shape + s * rng.normal(0.0, 0.1, gt.shape.shape)
    init.joint_offset = np.zeros_like(gt.joint_offset)
    init.face_offset = np.zeros_like(gt.face_offset)
    return Scene(
        model, gt, init, cameras, images, masks, kp, np.ones(kp.shape[:2]), fv, rest_v[fidx], bg, colors, log_scales,
        list(range(cfg.frames)), list(range(cfg.frames, T)),
    )


def landmark_targets(model: TemplateModel, params: SequenceParams, cameras: list[Camera]):
    """Projected landmarks (T×K×2) and posed face vertices (T×Fv×3) for the given parameters."""
    from .fit.register import pose_subset

    rest_v, rest_j = shaped_template(model, params.shape, params.joint_offset, params.face_offset)
    idx = np.array([lm.index for lm in model.landmarks])
    is_joint = np.array([lm.kind == "joint" for lm in model.landmarks])
    ps = pose_subset(model, rest_v, rest_j, params.pose, params.expression, params.translation, idx[~is_joint])
    pts = np.zeros((params.n_frames, len(idx), 3))
    pts[:, is_joint] = ps.joints[:, idx[is_joint]]
    pts[:, ~is_joint] = ps.vertices
    kp = np.stack([project_points(pts[t], cameras[t])[0] for t in range(params.n_frames)])
    fs = pose_subset(model, rest_v, rest_j, params.pose, params.expression, params.translation, model.face_vertex_index)
    return kp, fs.vertices
