"""Canonical mesh construction and per-frame animation of the Gaussian avatar."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..field import (
    AvatarField,
    StaticAssets,
    mlp_backward,
    regress_pose_color,
    regress_pose_geometry,
    regress_static_assets,
    regress_static_backward,
)
from ..mesh import Subdivision, laplacian_operator, mean_edge_length, transfer_skinning, vertex_normals
from ..model import (
    BODY,
    FACE,
    TemplateModel,
    forward_kinematics,
    forward_kinematics_backward,
    lbs,
    lbs_backward,
    relative_transforms,
    relative_transforms_backward,
    shaped_template,
    shaped_template_backward,
)
from ..splat import GaussianCloud


@dataclass
class Canonical:
    """Subdivided big-pose mesh shared by every frame."""

    levels: int
    matrix: sparse.csr_matrix  # N×V composite subdivision operator
    faces: np.ndarray
    labels: np.ndarray
    weights: np.ndarray  # N×J
    pos_mesh: np.ndarray  # frozen zero-shape mesh
    vertices: np.ndarray  # canonical mesh at build time
    expr_dirs: np.ndarray  # N×3×E
    uv: np.ndarray | None
    laplacian: sparse.csr_matrix

    @property
    def n_points(self) -> int:
        return len(self.labels)

    @property
    def face_index(self) -> np.ndarray:
        return np.flatnonzero(self.labels == FACE)

    @property
    def face_faces(self) -> np.ndarray:
        is_face = self.labels == FACE
        remap = np.full(self.n_points, -1, dtype=np.int64)
        idx = np.flatnonzero(is_face)
        remap[idx] = np.arange(len(idx))
        return remap[self.faces[is_face[self.faces].all(axis=1)]]

    @property
    def pose_offset_mask(self) -> np.ndarray:
        """Vertices that take learned pose offsets (body only)."""
        return self.labels == BODY

    def mean_edge(self) -> float:
        return mean_edge_length(self.vertices, self.faces)


@dataclass
class CanonicalCache:
    rest_vertices: np.ndarray
    rest_joints: np.ndarray
    big: np.ndarray  # J×4×4
    fk: object
    base: np.ndarray  # posed base-resolution vertices


def subdivision_operator(faces: np.ndarray, n_vertices: int, levels: int):
    """Composite N×V operator, final faces and the per-level steps."""
    mat = sparse.identity(n_vertices, format="csr")
    steps = []
    for _ in range(levels):
        step = Subdivision.build(faces, n_vertices)
        mat = (step.matrix @ mat).tocsr()
        steps.append(step)
        faces, n_vertices = step.faces, step.n_out
    return mat, faces, steps


def canonical_vertices(model: TemplateModel, canon: Canonical, shape, joint_offset=None, face_offset=None):
    """Shaped template posed to the big pose and subdivided (pose first, then subdivide)."""
    rest_v, rest_j = shaped_template(model, shape, joint_offset, face_offset)
    big, fk = forward_kinematics(rest_j, model.parents, model.big_pose, return_cache=True)
    base = lbs(rest_v, big, model.skin_weights)
    return canon.matrix @ base, CanonicalCache(rest_v, rest_j, big, fk, base)


def canonical_backward(model: TemplateModel, canon: Canonical, cache: CanonicalCache, d_vbar, d_big=None, d_rest_joints=None):
    """Gradients (shape, joint_offset, face_offset) from canonical-vertex, big-pose-transform and rest-joint gradients."""
    d_base = canon.matrix.T @ d_vbar
    d_rest_v, d_big_lbs = lbs_backward(cache.rest_vertices, cache.big, model.skin_weights, d_base)
    if d_big is not None:
        d_big_lbs = d_big_lbs + d_big
    _, d_rest_j = forward_kinematics_backward(cache.fk, d_big_lbs)
    if d_rest_joints is not None:
        d_rest_j = d_rest_j + d_rest_joints
    return shaped_template_backward(model, d_rest_v, d_rest_j)


def build_canonical(model: TemplateModel, shape=None, joint_offset=None, face_offset=None, subdivisions: int = 1) -> Canonical:
    """Canonical mesh with transferred skinning; the positional mesh uses zero shape and offsets."""
    shape = np.zeros(model.n_shape) if shape is None else shape
    mat, faces, steps = subdivision_operator(model.faces, model.n_vertices, subdivisions)
    labels = model.part_labels
    for step in steps:
        labels = step.upsample_labels(labels)
    canon = Canonical(
        levels=subdivisions,
        matrix=mat,
        faces=faces,
        labels=labels,
        weights=np.zeros(0),
        pos_mesh=np.zeros(0),
        vertices=np.zeros(0),
        expr_dirs=(mat @ model.expr_dirs.reshape(model.n_vertices, -1)).reshape(-1, 3, model.n_expr),
        uv=None if model.uv is None else mat @ model.uv,
        laplacian=laplacian_operator(faces, mat.shape[0]),
    )
    vbar, cache = canonical_vertices(model, canon, shape, joint_offset, face_offset)
    pbar, _ = canonical_vertices(model, canon, np.zeros(model.n_shape))
    canon.vertices = vbar
    canon.pos_mesh = pbar
    canon.weights = transfer_skinning(vbar, labels, cache.base, model.skin_weights, mat @ model.skin_weights)
    return canon


# --- animation ---------------------------------------------------------------


@dataclass
class Frame:
    pose: np.ndarray  # J×3
    expression: np.ndarray  # E
    translation: np.ndarray  # 3


@dataclass
class AnimationCache:
    canon_cache: CanonicalCache
    vbar: np.ndarray
    vbar_tri: np.ndarray
    vbar_pose: np.ndarray
    transforms: np.ndarray  # J×4×4 relative to the big pose
    posed: np.ndarray  # J×4×4 absolute
    fk: object
    static: StaticAssets
    dv_pose: np.ndarray
    ds_pose: np.ndarray
    dc_pose: np.ndarray
    geo_cache: object
    color_cache: object
    color_pre: np.ndarray  # c_tri + dc_pose before clamping
    pose_input: np.ndarray


def animate(
    field: AvatarField,
    model: TemplateModel,
    canon: Canonical,
    frame: Frame,
    shape,
    joint_offset=None,
    face_offset=None,
    static: StaticAssets | None = None,
):
    """Animated Gaussian clouds for the static path and the pose-dependent path, plus a cache."""
    vbar, ccache = canonical_vertices(model, canon, shape, joint_offset, face_offset)
    static = regress_static_assets(field) if static is None else static
    dv_expr = canon.expr_dirs @ np.asarray(frame.expression, dtype=np.float64)
    vbar_tri = vbar + static.offsets + dv_expr

    pose_in = np.asarray(frame.pose, dtype=np.float64)[1:].ravel()
    feats = static.features
    dv_pose, ds_pose, gcache = regress_pose_geometry(field, feats, pose_in)
    dv_pose = dv_pose * canon.pose_offset_mask[:, None]
    vbar_pose = vbar_tri + dv_pose
    normals = vertex_normals(vbar_pose, canon.faces)[0]
    dc_pose, ccache_col = regress_pose_color(field, feats, pose_in, normals)

    posed, fk = forward_kinematics(ccache.rest_joints, model.parents, frame.pose, return_cache=True)
    rel = relative_transforms(posed, ccache.big)
    t = np.asarray(frame.translation, dtype=np.float64)
    pos_tri = lbs(vbar_tri, rel, canon.weights) + t
    pos_pose = lbs(vbar_pose, rel, canon.weights) + t

    color_pre = static.colors + dc_pose
    tri = GaussianCloud(pos_tri, static.log_scales, static.colors, canon.faces)
    pose = GaussianCloud(pos_pose, static.log_scales + ds_pose, np.clip(color_pre, 0.0, 1.0), canon.faces)
    cache = AnimationCache(
        ccache, vbar, vbar_tri, vbar_pose, rel, posed, fk, static, dv_pose, ds_pose, dc_pose, gcache, ccache_col, color_pre, pose_in
    )
    return tri, pose, cache


@dataclass
class AnimationGrads:
    field: dict[str, np.ndarray]
    pose: np.ndarray
    expression: np.ndarray
    translation: np.ndarray
    shape: np.ndarray
    joint_offset: np.ndarray
    face_offset: np.ndarray


def _get(d: dict, key: str, like: np.ndarray) -> np.ndarray:
    g = d.get(key)
    return np.zeros_like(like) if g is None else g


def animate_backward(field: AvatarField, model: TemplateModel, canon: Canonical, cache: AnimationCache, grads: dict) -> AnimationGrads:
    """Chain named intermediate gradients back to field parameters and frame/identity parameters.

    Recognized keys: tri_positions, pose_positions, tri_log_scales,
    pose_log_scales, tri_colors, pose_colors, vbar, vbar_tri, vbar_pose,
    dv_tri, dv_pose, s_tri, ds_pose, c_tri. Normals fed to the pose-color
    head are treated as constants.
    """
    st = cache.static
    N = canon.n_points
    zeros3 = np.zeros((N, 3))

    g_pose_col = _get(grads, "pose_colors", zeros3)
    inside = (cache.color_pre > 0.0) & (cache.color_pre < 1.0)
    g_pose_col = g_pose_col * inside
    d_c_tri = _get(grads, "tri_colors", zeros3) + g_pose_col + _get(grads, "c_tri", zeros3)
    d_dc_pose = g_pose_col

    g_pls = _get(grads, "pose_log_scales", st.log_scales)
    d_s_tri = _get(grads, "tri_log_scales", st.log_scales) + g_pls + _get(grads, "s_tri", st.log_scales)
    d_ds_pose = g_pls + _get(grads, "ds_pose", st.log_scales)

    g_tri = _get(grads, "tri_positions", zeros3)
    g_pp = _get(grads, "pose_positions", zeros3)
    d_trans = g_tri.sum(axis=0) + g_pp.sum(axis=0)
    dv1, dm1 = lbs_backward(cache.vbar_tri, cache.transforms, canon.weights, g_tri)
    dv2, dm2 = lbs_backward(cache.vbar_pose, cache.transforms, canon.weights, g_pp)
    d_vbar_pose = dv2 + _get(grads, "vbar_pose", zeros3)
    d_vbar_tri = dv1 + _get(grads, "vbar_tri", zeros3) + d_vbar_pose
    d_dv_pose = (d_vbar_pose + _get(grads, "dv_pose", zeros3)) * canon.pose_offset_mask[:, None]
    d_vbar = d_vbar_tri + _get(grads, "vbar", zeros3)
    d_dv_tri = d_vbar_tri + _get(grads, "dv_tri", zeros3)
    d_expr = np.einsum("nce,nc->e", canon.expr_dirs, d_vbar_tri)

    fw = field.feature_width
    d_in_g, g_geo = mlp_backward(field.mlps["geo_pose"], cache.geo_cache, np.concatenate([d_dv_pose, d_ds_pose[:, None]], axis=1), "geo_pose.")
    d_in_c, g_col = mlp_backward(field.mlps["color_pose"], cache.color_cache, d_dc_pose, "color_pose.")
    p = len(cache.pose_input)
    d_feat = d_in_g[:, :fw] + d_in_c[:, :fw]
    d_pose_in = d_in_g[:, fw : fw + p].sum(axis=0) + d_in_c[:, fw : fw + p].sum(axis=0)

    field_grads = regress_static_backward(field, st, d_dv_tri, d_s_tri, d_c_tri, d_features=d_feat)
    field_grads.update(g_geo)
    field_grads.update(g_col)

    d_rel = dm1 + dm2
    d_posed, d_big = relative_transforms_backward(cache.posed, cache.canon_cache.big, d_rel)
    d_theta, d_rest_j = forward_kinematics_backward(cache.fk, d_posed)
    d_theta = d_theta.copy()
    d_theta[1:] += d_pose_in.reshape(-1, 3)
    d_shape, d_jo, d_fo = canonical_backward(model, canon, cache.canon_cache, d_vbar, d_big, d_rest_j)
    return AnimationGrads(field_grads, d_theta, d_expr, d_trans, d_shape, d_jo, d_fo)


def init_log_scale(canon: Canonical) -> float:
    """Log of the mean edge length, so the initial Gaussians tile the surface."""
    return float(np.log(canon.mean_edge()))


def animate_ground_truth(model: TemplateModel, canon: Canonical, frame: Frame, params, colors, log_scales) -> GaussianCloud:
    """Cloud of a field-free avatar: canonical mesh plus expression, skinned and translated."""
    vbar, cc = canonical_vertices(model, canon, params.shape, params.joint_offset, params.face_offset)
    posed = forward_kinematics(cc.rest_joints, model.parents, frame.pose)
    rel = relative_transforms(posed, cc.big)
    pts = lbs(vbar + canon.expr_dirs @ np.asarray(frame.expression, dtype=np.float64), rel, canon.weights)
    return GaussianCloud(pts + np.asarray(frame.translation), log_scales, colors, canon.faces)
