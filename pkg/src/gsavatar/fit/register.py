"""Sequence co-registration of the template to 2D keypoints and per-frame face geometry."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..camera import Camera
from ..mesh import face_visibility, unique_edges
from ..model import (
    SequenceParams,
    TemplateModel,
    forward_kinematics,
    forward_kinematics_backward,
    project_points,
    project_points_backward,
    shaped_template,
    shaped_template_backward,
)
from ..objective import face_mirror_table, laplacian_reg, mean_sq, symmetry_reg
from ..splat import rasterize_triangles, sample_texture
from .adam import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class KeypointFrame:
    keypoints: np.ndarray  # K×2 pixels, ordered like model.landmarks
    confidence: np.ndarray  # K
    camera: Camera
    face_vertices: np.ndarray | None = None  # Fv×3 posed face geometry target
    image: np.ndarray | None = None  # H×W×3, used for the face texture


@dataclass
class RegisterConfig:
    iterations: int = 800
    lr: dict[str, float] = field(
        default_factory=lambda: {
            "pose": 1e-2,
            "expression": 1e-2,
            "translation": 1e-2,
            "shape": 1e-2,
            "joint_offset": 1e-3,
            "face_offset": 1e-3,
        }
    )
    frozen: tuple[str, ...] = ()
    w_init: float = 0.1
    w_vertex: float = 10.0
    w_lap: float = 1e4
    w_edge: float = 1.0
    w_shape: float = 0.01
    w_joint_offset: float = 100.0
    w_symmetry: float = 1.0
    texture_size: int = 64


@dataclass
class RegistrationResult:
    params: SequenceParams
    texture: np.ndarray | None
    visible: np.ndarray
    history: list[dict]
    reprojection_px: float


# --- posing helpers ----------------------------------------------------------


@dataclass
class PosedSubset:
    joints: np.ndarray  # T×J×3
    vertices: np.ndarray  # T×n×3
    transforms: np.ndarray
    fk: object
    rest_vertices: np.ndarray  # T×n×3 (expression applied)
    index: np.ndarray


def pose_subset(model: TemplateModel, rest_v, rest_j, pose, expression, translation, index) -> PosedSubset:
    """Posed joints and a vertex subset for every frame (expression in rest space, then LBS, then translation)."""
    A, fk = forward_kinematics(rest_j, model.parents, pose, return_cache=True)
    joints = np.einsum("tjab,jb->tja", A[..., :3, :3], rest_j) + A[..., :3, 3] + translation[:, None]
    w = model.skin_weights[index]
    rv = rest_v[index][None] + np.einsum("nce,te->tnc", model.expr_dirs[index], expression)
    blended = np.einsum("nj,tjab->tnab", w, A[..., :3, :])
    verts = np.einsum("tnab,tnb->tna", blended[..., :3], rv) + blended[..., 3] + translation[:, None]
    return PosedSubset(joints, verts, A, fk, rv, np.asarray(index))


def pose_subset_backward(model: TemplateModel, ps: PosedSubset, rest_j, d_joints, d_verts):
    """Returns d_pose (T×J×3), d_expression, d_translation, d_rest_vertices (V×3), d_rest_joints."""
    T = ps.transforms.shape[0]
    d_A = np.zeros_like(ps.transforms)
    d_trans = np.zeros((T, 3))
    d_rest_j = np.zeros_like(rest_j)
    d_rest_v = np.zeros((model.n_vertices, 3))
    d_expr = np.zeros((T, model.n_expr))
    if d_joints is not None:
        d_A[..., :3, :3] += np.einsum("tja,jb->tjab", d_joints, rest_j)
        d_A[..., :3, 3] += d_joints
        d_rest_j += np.einsum("tjab,tja->jb", ps.transforms[..., :3, :3], d_joints)
        d_trans += d_joints.sum(axis=1)
    if d_verts is not None and len(ps.index):
        w = model.skin_weights[ps.index]
        d_A[..., :3, :3] += np.einsum("nj,tna,tnb->tjab", w, d_verts, ps.rest_vertices, optimize=True)
        d_A[..., :3, 3] += np.einsum("nj,tna->tja", w, d_verts)
        blended = np.einsum("nj,tjab->tnab", w, ps.transforms[..., :3, :3])
        d_rv = np.einsum("tnab,tna->tnb", blended, d_verts)
        np.add.at(d_rest_v, ps.index, d_rv.sum(axis=0))
        d_expr += np.einsum("nce,tnc->te", model.expr_dirs[ps.index], d_rv)
        d_trans += d_verts.sum(axis=1)
    d_pose, d_rj = forward_kinematics_backward(ps.fk, d_A)
    return d_pose, d_expr, d_trans, d_rest_v, d_rest_j + d_rj


# --- objective ---------------------------------------------------------------


def _landmark_split(model: TemplateModel):
    kinds = np.array([lm.kind for lm in model.landmarks])
    idx = np.array([lm.index for lm in model.landmarks], dtype=np.int64)
    return np.flatnonzero(kinds == "joint"), np.flatnonzero(kinds == "vertex"), idx


class RegistrationProblem:
    """Loss and gradient of the co-registration objective for a fixed dataset."""

    def __init__(self, model: TemplateModel, frames: list[KeypointFrame], face_neutral: np.ndarray | None, init: SequenceParams, cfg: RegisterConfig):
        self.model = model
        self.frames = frames
        self.face_neutral = face_neutral
        self.init = init.copy()
        self.cfg = cfg
        self.kp = np.stack([f.keypoints for f in frames])
        self.conf = np.stack([f.confidence for f in frames]).astype(np.float64)
        self.j_slots, self.v_slots, self.lm_index = _landmark_split(model)
        self.face_index = model.face_vertex_index
        self.face_faces = model.face_faces
        self.face_edges = unique_edges(self.face_faces)[0] if len(self.face_faces) else np.zeros((0, 2), dtype=np.int64)
        self.face_table = face_mirror_table(model.vertex_mirror, self.face_index)
        self.visible = np.array([self._visible(t) for t in range(len(frames))], dtype=bool)
        T, K = self.kp.shape[:2]
        self.kp_norm = 1.0 / (T * K * 2)
        self.n_frames = T

    def _visible(self, t: int) -> bool:
        """Face visibility of frame t judged on the full model posed with the initial parameters."""
        m, p = self.model, self.init
        if self.frames[t].face_vertices is None or len(m.face_center) == 0 or len(m.eye_vertices) == 0:
            return False
        rest_v, rest_j = shaped_template(m, p.shape, p.joint_offset, p.face_offset)
        idx = np.arange(m.n_vertices)
        ps = pose_subset(m, rest_v, rest_j, p.pose[t : t + 1], p.expression[t : t + 1], p.translation[t : t + 1], idx)
        return face_visibility(ps.vertices[0], self.frames[t].camera, m.face_center, m.eye_vertices)

    def _keypoints(self, p: SequenceParams, face_offset, want_grad: bool):
        rest_v, rest_j = shaped_template(self.model, p.shape, p.joint_offset, face_offset)
        vidx = self.lm_index[self.v_slots]
        ps = pose_subset(self.model, rest_v, rest_j, p.pose, p.expression, p.translation, vidx)
        pts = np.zeros(self.kp.shape[:2] + (3,))
        pts[:, self.j_slots] = ps.joints[:, self.lm_index[self.j_slots]]
        pts[:, self.v_slots] = ps.vertices
        loss = 0.0
        d_pts = np.zeros_like(pts)
        pix_all = np.zeros(self.kp.shape)
        for t, fr in enumerate(self.frames):
            pix, _, valid = project_points(pts[t], fr.camera)
            r = np.where(valid[:, None], pix - self.kp[t], 0.0)
            pix_all[t] = np.where(valid[:, None], pix, np.nan)
            loss += float((self.conf[t][:, None] * np.abs(r)).sum()) * self.kp_norm
            if want_grad:
                d_pts[t] = project_points_backward(pts[t], fr.camera, self.conf[t][:, None] * np.sign(r) * self.kp_norm)
        if not want_grad:
            return loss, pix_all, None
        d_joints = np.zeros_like(ps.joints)
        np.add.at(d_joints, (slice(None), self.lm_index[self.j_slots]), d_pts[:, self.j_slots])
        dp, de, dt, drv, drj = pose_subset_backward(self.model, ps, rest_j, d_joints, d_pts[:, self.v_slots])
        d_shape, d_jo, d_fo = shaped_template_backward(self.model, drv, drj)
        return loss, pix_all, dict(pose=dp, expression=de, translation=dt, shape=d_shape, joint_offset=d_jo, face_offset=d_fo)

    def _face(self, p: SequenceParams, grads: dict):
        cfg = self.cfg
        if self.face_neutral is None or not self.visible.any():
            return {"vertex": 0.0, "lap": 0.0, "edge": 0.0}
        rest_v, rest_j = shaped_template(self.model, p.shape, p.joint_offset, p.face_offset)
        rest_face = rest_v[self.face_index]
        # unposed: neutral geometry
        diff_n = rest_face - self.face_neutral
        v_unposed, g_unposed = mean_sq(diff_n)
        lap, g_lap = laplacian_reg(rest_face, self.face_neutral, self.face_faces)
        e = self.face_edges
        ed = (rest_face[e[:, 0]] - rest_face[e[:, 1]]) - (self.face_neutral[e[:, 0]] - self.face_neutral[e[:, 1]])
        edge, g_ed = mean_sq(ed)
        g_face = cfg.w_vertex * g_unposed + cfg.w_lap * g_lap
        np.add.at(g_face, e[:, 0], cfg.w_edge * g_ed)
        np.add.at(g_face, e[:, 1], -cfg.w_edge * g_ed)
        # posed: per-frame face geometry on visible frames
        vis = np.flatnonzero(self.visible)
        ps = pose_subset(self.model, rest_v, rest_j, p.pose[vis], p.expression[vis], p.translation[vis], self.face_index)
        targets = np.stack([self.frames[t].face_vertices for t in vis])
        dpos = ps.vertices - targets
        n = dpos.shape[0] * dpos.shape[1]
        v_posed = float((dpos * dpos).sum() / n)
        d_verts = cfg.w_vertex * 2.0 * dpos / n
        dp, de, dt, drv, drj = pose_subset_backward(self.model, ps, rest_j, None, d_verts)
        drv[self.face_index] += g_face
        d_shape, d_jo, d_fo = shaped_template_backward(self.model, drv, drj)
        grads["pose"][vis] += dp
        grads["expression"][vis] += de
        grads["translation"][vis] += dt
        grads["shape"] += d_shape
        grads["joint_offset"] += d_jo
        grads["face_offset"] += d_fo
        return {"vertex": v_unposed + v_posed, "lap": lap, "edge": edge}

    def evaluate(self, p: SequenceParams):
        """Total loss, per-term values and gradients for every parameter group."""
        cfg = self.cfg
        l_with, _, g1 = self._keypoints(p, p.face_offset, True)
        l_without, _, g2 = self._keypoints(p, None, True)
        grads = {k: g1[k] + g2[k] for k in g1}
        grads["face_offset"] = g1["face_offset"]
        terms = {"kpt": l_with + l_without}

        l_init = 0.0
        for name in ("pose", "expression", "shape", "translation"):
            d = getattr(p, name) - getattr(self.init, name)
            n = self.n_frames if name != "shape" else 1
            l_init += float(np.abs(d).sum() / n)
            grads[name] = grads[name] + cfg.w_init * np.sign(d) / n
        terms["init"] = l_init

        f = self._face(p, grads)
        terms.update({f"face_{k}": v for k, v in f.items()})
        terms["face"] = cfg.w_vertex * f["vertex"] + cfg.w_lap * f["lap"] + cfg.w_edge * f["edge"]

        shape_reg = float((p.shape**2).sum())
        grads["shape"] = grads["shape"] + cfg.w_shape * 2.0 * p.shape
        jo, g_jo = mean_sq(p.joint_offset)
        grads["joint_offset"] = grads["joint_offset"] + cfg.w_joint_offset * g_jo
        sym, g_sj, g_sf = symmetry_reg(p.joint_offset, self.model.joint_mirror, p.face_offset, self.face_table)
        grads["joint_offset"] = grads["joint_offset"] + cfg.w_symmetry * g_sj
        grads["face_offset"] = grads["face_offset"] + cfg.w_symmetry * g_sf
        terms.update(shape=shape_reg, joint_offset=jo, symmetry=sym)
        terms["reg"] = cfg.w_shape * shape_reg + cfg.w_joint_offset * jo + cfg.w_symmetry * sym
        total = terms["kpt"] + cfg.w_init * l_init + terms["face"] + terms["reg"]
        terms["total"] = total
        return total, terms, grads

    def reprojection(self, p: SequenceParams) -> float:
        """Mean pixel distance over keypoints with positive confidence (offsets applied)."""
        _, pix, _ = self._keypoints(p, p.face_offset, False)
        err = np.linalg.norm(pix - self.kp, axis=2)
        sel = self.conf > 0
        return float(np.nanmean(err[sel])) if sel.any() else 0.0


def register_sequence(
    model: TemplateModel,
    frames: list[KeypointFrame],
    init: SequenceParams,
    face_neutral: np.ndarray | None = None,
    cfg: RegisterConfig | None = None,
) -> RegistrationResult:
    """Fit per-frame pose/expression/translation and shared shape, joint and face offsets with Adam."""
    cfg = cfg or RegisterConfig()
    init.validate(model)
    if len(init.pose) != len(frames):
        raise ValueError(f"init has {len(init.pose)} frames, data has {len(frames)}")
    problem = RegistrationProblem(model, frames, face_neutral, init, cfg)
    params = init.copy()
    state = AdamState(total_steps=cfg.iterations, group_lr=dict(cfg.lr), frozen=set(cfg.frozen))
    history = []
    arrays = params.arrays()
    for it in range(cfg.iterations):
        total, terms, grads = problem.evaluate(params)
        if not np.isfinite(total):
            raise FloatingPointError(f"registration loss became non-finite at iteration {it}")
        history.append({"iteration": it, **terms})
        adam_step(state, arrays, grads, it)
    texture = None
    if problem.visible.any():
        texture = face_texture(model, params, frames, problem.visible, cfg.texture_size)
    else:
        log.warning("no frame shows the face; face texture unavailable, face loss disabled")
    return RegistrationResult(params, texture, problem.visible, history, problem.reprojection(params))


# --- face texture ------------------------------------------------------------


def unwrap_face(model: TemplateModel, params: SequenceParams, t: int, frame: KeypointFrame, size: int):
    """Per-texel colors and validity from one frame's image."""
    if model.uv is None:
        raise ValueError("model has no UV coordinates")
    rest_v, rest_j = shaped_template(model, params.shape, params.joint_offset, params.face_offset)
    fidx = model.face_vertex_index
    ps = pose_subset(model, rest_v, rest_j, params.pose[t : t + 1], params.expression[t : t + 1], params.translation[t : t + 1], fidx)
    verts = ps.vertices[0]
    faces = model.face_faces
    uv = model.uv[fidx] * (size - 1)
    tid, bary = rasterize_triangles(uv[faces], size, size)
    covered = tid >= 0
    colors = np.zeros((size * size, 3))
    ok = np.zeros(size * size, dtype=bool)
    if not covered.any():
        return colors.reshape(size, size, 3), ok.reshape(size, size)
    f = faces[tid[covered]]
    pts = np.einsum("mk,mkc->mc", bary[covered], verts[f])
    tri = verts[f]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    facing = np.einsum("mc,mc->m", normal, pts - frame.camera.center) < 0
    pix, _, valid = project_points(pts, frame.camera)
    H, W = frame.image.shape[:2]
    inside = valid & (pix[:, 0] >= 0) & (pix[:, 0] <= W - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= H - 1)
    good = inside & facing
    uvq = np.zeros((len(pix), 2))
    uvq[good, 0] = pix[good, 0] / max(W - 1, 1)
    uvq[good, 1] = pix[good, 1] / max(H - 1, 1)
    sampled, _ = sample_texture(frame.image, uvq)
    cov = np.flatnonzero(covered)
    colors[cov[good]] = sampled[good]
    ok[cov[good]] = True
    return colors.reshape(size, size, 3), ok.reshape(size, size)


def face_texture(model: TemplateModel, params: SequenceParams, frames: list[KeypointFrame], visible: np.ndarray, size: int = 64) -> np.ndarray | None:
    """Average of unwrapped face textures over frames where the face is visible."""
    acc = np.zeros((size, size, 3))
    cnt = np.zeros((size, size))
    for t in np.flatnonzero(visible):
        if frames[t].image is None:
            continue
        col, ok = unwrap_face(model, params, int(t), frames[t], size)
        acc[ok] += col[ok]
        cnt += ok
    if not (cnt > 0).any():
        return None
    tex = np.zeros_like(acc)
    seen = cnt > 0
    tex[seen] = acc[seen] / cnt[seen, None]
    tex[~seen] = tex[seen].mean(axis=0)
    return tex
