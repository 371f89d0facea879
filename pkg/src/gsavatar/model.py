"""Parametric template body: file format, shaping, kinematics and skinning.

All arrays are float64 in memory. Gradients are written by hand; every
``*_backward`` function takes the upstream gradient of the matching forward
output and returns gradients of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from .camera import NEAR_PLANE, Camera
from .io import FormatError, load_blob, save_blob

BODY, FACE, LEFT_HAND, RIGHT_HAND = 0, 1, 2, 3
PART_NAMES = {BODY: "body", FACE: "face", LEFT_HAND: "left-hand", RIGHT_HAND: "right-hand"}

MODEL_MAGIC = "GSAVATAR-MODEL"
MODEL_VERSION = 1
ROOT_SENTINEL = 0xFFFFFFFF
MAX_INFLUENCES = 4
WEIGHT_TOL = 1e-6


class ModelFormatError(FormatError):
    pass


@dataclass(frozen=True)
class Landmark:
    name: str
    kind: str  # "joint" or "vertex"
    index: int


@dataclass(eq=False)
class TemplateModel:
    vertices: np.ndarray  # V×3
    faces: np.ndarray  # F×3
    joints: np.ndarray  # J×3
    parents: np.ndarray  # J, -1 marks the root
    weight_index: np.ndarray  # V×4
    weight_value: np.ndarray  # V×4
    shape_dirs: np.ndarray  # V×3×S
    expr_dirs: np.ndarray  # V×3×E
    part_labels: np.ndarray  # V
    joint_mirror: np.ndarray  # J
    vertex_mirror: np.ndarray  # V
    big_pose: np.ndarray  # J×3
    landmarks: list[Landmark] = field(default_factory=list)
    face_center: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    eye_vertices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    joint_names: list[str] = field(default_factory=list)
    regressor: np.ndarray | None = None  # J×V
    uv: np.ndarray | None = None  # V×2, meaningful on face vertices

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def n_shape(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def n_expr(self) -> int:
        return self.expr_dirs.shape[2]

    @cached_property
    def skin_weights(self) -> np.ndarray:
        """Dense V×J weights, renormalized in float64."""
        w = np.zeros((self.n_vertices, self.n_joints))
        rows = np.repeat(np.arange(self.n_vertices), self.weight_index.shape[1])
        np.add.at(w, (rows, self.weight_index.ravel()), self.weight_value.ravel())
        return w / w.sum(axis=1, keepdims=True)

    @cached_property
    def face_vertex_index(self) -> np.ndarray:
        return np.flatnonzero(self.part_labels == FACE)

    @cached_property
    def face_faces(self) -> np.ndarray:
        """Triangles whose three corners are face vertices, re-indexed into the face subset."""
        is_face = self.part_labels == FACE
        keep = is_face[self.faces].all(axis=1)
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[self.face_vertex_index] = np.arange(len(self.face_vertex_index))
        return remap[self.faces[keep]]

    @cached_property
    def joint_matrix(self) -> np.ndarray:
        """J×V linear map from rest-vertex displacement to rest-joint displacement."""
        if self.regressor is not None:
            return self.regressor
        w = self.skin_weights
        owner = np.argmax(w, axis=1)
        mat = np.zeros((self.n_joints, self.n_vertices))
        for j in range(self.n_joints):
            members = np.flatnonzero(owner == j)
            if len(members) == 0:
                members = np.flatnonzero(w[:, j] > 0)
            if len(members):
                mat[j, members] = 1.0 / len(members)
        return mat

    @cached_property
    def base_joints(self) -> np.ndarray:
        if self.regressor is not None:
            return self.regressor @ self.vertices
        return self.joints

    @cached_property
    def order(self) -> np.ndarray:
        return topological_order(self.parents)

    def landmark_names(self) -> list[str]:
        return [lm.name for lm in self.landmarks]


def topological_order(parents: np.ndarray) -> np.ndarray:
    """Joints ordered so every parent precedes its children."""
    parents = np.asarray(parents)
    n = len(parents)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise ModelFormatError(f"parents: expected exactly one root, found {len(roots)}")
    children: list[list[int]] = [[] for _ in range(n)]
    for j, p in enumerate(parents):
        if p >= 0:
            if p >= n:
                raise ModelFormatError(f"parents: joint {j} has out-of-range parent {p}")
            children[p].append(j)
    order, stack = [], [int(roots[0])]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        missing = sorted(set(range(n)) - set(order))
        raise ModelFormatError(f"parents: joints {missing} are unreachable from the root (cycle?)")
    return np.asarray(order, dtype=np.int64)


def validate_model(m: TemplateModel) -> None:
    V, J = m.n_vertices, m.n_joints
    if m.vertices.shape != (V, 3) or m.joints.shape != (J, 3):
        raise ModelFormatError("vertices/joints must be N×3")
    if m.faces.ndim != 2 or m.faces.shape[1] != 3:
        raise ModelFormatError("faces: expected F×3")
    if m.faces.size and (m.faces.min() < 0 or m.faces.max() >= V):
        raise ModelFormatError(f"faces: index out of range [0, {V})")
    topological_order(m.parents)
    if m.weight_index.shape != m.weight_value.shape or m.weight_index.shape[0] != V:
        raise ModelFormatError("skin_weights: index/value arrays must both be V×k")
    if m.weight_index.shape[1] > MAX_INFLUENCES:
        raise ModelFormatError(f"skin_weights: at most {MAX_INFLUENCES} influences per vertex")
    if m.weight_index.size and (m.weight_index.min() < 0 or m.weight_index.max() >= J):
        raise ModelFormatError("skin_weights: joint index out of range")
    neg = np.flatnonzero((m.weight_value < 0).any(axis=1))
    if len(neg):
        raise ModelFormatError(f"skin_weights: vertex {int(neg[0])} has a negative weight")
    sums = m.weight_value.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > WEIGHT_TOL)
    if len(bad):
        v = int(bad[0])
        raise ModelFormatError(f"skin_weights: vertex {v} weights sum to {sums[v]:.6g}, expected 1")
    if m.shape_dirs.shape[:2] != (V, 3) or m.expr_dirs.shape[:2] != (V, 3):
        raise ModelFormatError("shape_dirs/expr_dirs must be V×3×k")
    if m.part_labels.shape != (V,) or not np.isin(m.part_labels, list(PART_NAMES)).all():
        raise ModelFormatError("part_labels: expected V labels in {0,1,2,3}")
    off_face = m.part_labels != FACE
    if np.any(m.expr_dirs[off_face] != 0):
        v = int(np.flatnonzero(np.any(m.expr_dirs[off_face] != 0, axis=(1, 2)))[0])
        raise ModelFormatError(f"expr_dirs: non-face vertex {int(np.flatnonzero(off_face)[v])} has a nonzero row")
    if m.joint_mirror.shape != (J,) or m.vertex_mirror.shape != (V,):
        raise ModelFormatError("mirror tables must have lengths J and V")
    if m.big_pose.shape != (J, 3):
        raise ModelFormatError("big_pose: expected J×3")
    if m.regressor is not None and m.regressor.shape != (J, V):
        raise ModelFormatError("regressor: expected J×V")
    if m.uv is not None and m.uv.shape != (V, 2):
        raise ModelFormatError("uv: expected V×2")
    for lm in m.landmarks:
        limit = J if lm.kind == "joint" else V
        if lm.kind not in ("joint", "vertex") or not 0 <= lm.index < limit:
            raise ModelFormatError(f"landmark '{lm.name}': invalid {lm.kind} index {lm.index}")
    for name, idx in (("face_center", m.face_center), ("eyes", m.eye_vertices)):
        if len(idx) and (idx.min() < 0 or idx.max() >= V):
            raise ModelFormatError(f"visibility {name}: vertex index out of range")


# --- file format -------------------------------------------------------------


def _array_layout(m_dims: dict) -> list[tuple[str, str, tuple]]:
    V, F, J, S, E, K = (m_dims[k] for k in ("V", "F", "J", "S", "E", "K"))
    layout = [
        ("vertices", "<f4", (V, 3)),
        ("faces", "<u4", (F, 3)),
        ("joints", "<f4", (J, 3)),
        ("parents", "<u4", (J,)),
        ("weight_index", "<u4", (V, K)),
        ("weight_value", "<f4", (V, K)),
        ("shape_dirs", "<f4", (V, 3, S)),
        ("expr_dirs", "<f4", (V, 3, E)),
        ("part_labels", "<u4", (V,)),
        ("joint_mirror", "<u4", (J,)),
        ("vertex_mirror", "<u4", (V,)),
        ("big_pose", "<f4", (J, 3)),
    ]
    if m_dims["regressor"]:
        layout.append(("regressor", "<f4", (J, V)))
    if m_dims["uv"]:
        layout.append(("uv", "<f4", (V, 2)))
    return layout


def save_model(model: TemplateModel, path) -> None:
    dims = {
        "V": model.n_vertices,
        "F": len(model.faces),
        "J": model.n_joints,
        "S": model.n_shape,
        "E": model.n_expr,
        "K": model.weight_index.shape[1],
        "regressor": int(model.regressor is not None),
        "uv": int(model.uv is not None),
    }
    lines = [f"{MODEL_MAGIC} {MODEL_VERSION}"]
    lines += [f"{k} {v}" for k, v in dims.items()]
    if model.joint_names:
        lines.append("joint_names " + ",".join(model.joint_names))
    for lm in model.landmarks:
        lines.append(f"landmark {lm.name} {lm.kind} {lm.index}")
    if len(model.face_center):
        lines.append("face_center " + ",".join(str(int(i)) for i in model.face_center))
    if len(model.eye_vertices):
        lines.append("eyes " + ",".join(str(int(i)) for i in model.eye_vertices))
    lines.append("END")
    parents = np.where(model.parents < 0, ROOT_SENTINEL, model.parents)
    source = {
        "vertices": model.vertices,
        "faces": model.faces,
        "joints": model.joints,
        "parents": parents,
        "weight_index": model.weight_index,
        "weight_value": model.weight_value,
        "shape_dirs": model.shape_dirs,
        "expr_dirs": model.expr_dirs,
        "part_labels": model.part_labels,
        "joint_mirror": model.joint_mirror,
        "vertex_mirror": model.vertex_mirror,
        "big_pose": model.big_pose,
        "regressor": model.regressor,
        "uv": model.uv,
    }
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        for name, dtype, shape in _array_layout(dims):
            f.write(np.ascontiguousarray(source[name]).astype(dtype).reshape(shape).tobytes())


def load_model(path) -> TemplateModel:
    """Read and validate a model file; raises ModelFormatError with the offending field."""
    data = Path(path).read_bytes()
    end = data.find(b"\nEND\n")
    if end < 0:
        raise ModelFormatError(f"{path}: header has no END marker")
    header = data[:end].decode("ascii", errors="replace").split("\n")
    magic = header[0].split()
    if len(magic) != 2 or magic[0] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: bad magic line '{header[0]}'")
    if magic[1] != str(MODEL_VERSION):
        raise ModelFormatError(f"{path}: unsupported model version {magic[1]}")
    dims: dict = {}
    landmarks, joint_names = [], []
    face_center = np.zeros(0, dtype=np.int64)
    eyes = np.zeros(0, dtype=np.int64)
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        try:
            if key in ("V", "F", "J", "S", "E", "K", "regressor", "uv"):
                dims[key] = int(parts[1])
            elif key == "landmark":
                landmarks.append(Landmark(parts[1], parts[2], int(parts[3])))
            elif key == "joint_names":
                joint_names = parts[1].split(",")
            elif key == "face_center":
                face_center = np.array([int(x) for x in parts[1].split(",")], dtype=np.int64)
            elif key == "eyes":
                eyes = np.array([int(x) for x in parts[1].split(",")], dtype=np.int64)
            else:
                raise ModelFormatError(f"{path}: unknown header field '{key}'")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"{path}: malformed header line '{line}'") from None
    missing = [k for k in ("V", "F", "J", "S", "E", "K", "regressor", "uv") if k not in dims]
    if missing:
        raise ModelFormatError(f"{path}: header missing dims {missing}")
    offset = end + len(b"\nEND\n")
    arrays = {}
    for name, dtype, shape in _array_layout(dims):
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(data):
            raise ModelFormatError(f"{path}: array '{name}' shorter than declared shape {shape}")
        arrays[name] = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(data):
        raise ModelFormatError(f"{path}: {len(data) - offset} bytes beyond declared arrays (shape mismatch)")
    parents = arrays["parents"].astype(np.int64)
    parents[arrays["parents"] == ROOT_SENTINEL] = -1
    model = TemplateModel(
        vertices=arrays["vertices"].astype(np.float64),
        faces=arrays["faces"].astype(np.int64),
        joints=arrays["joints"].astype(np.float64),
        parents=parents,
        weight_index=arrays["weight_index"].astype(np.int64),
        weight_value=arrays["weight_value"].astype(np.float64),
        shape_dirs=arrays["shape_dirs"].astype(np.float64),
        expr_dirs=arrays["expr_dirs"].astype(np.float64),
        part_labels=arrays["part_labels"].astype(np.int64),
        joint_mirror=arrays["joint_mirror"].astype(np.int64),
        vertex_mirror=arrays["vertex_mirror"].astype(np.int64),
        big_pose=arrays["big_pose"].astype(np.float64),
        landmarks=landmarks,
        face_center=face_center,
        eye_vertices=eyes,
        joint_names=joint_names,
        regressor=arrays["regressor"].astype(np.float64) if "regressor" in arrays else None,
        uv=arrays["uv"].astype(np.float64) if "uv" in arrays else None,
    )
    validate_model(model)
    return model


# --- sequence parameters -----------------------------------------------------


@dataclass
class SequenceParams:
    """Per-frame pose/expression/translation plus identity-level shared offsets."""

    pose: np.ndarray  # T×J×3 axis-angle
    expression: np.ndarray  # T×E
    translation: np.ndarray  # T×3
    shape: np.ndarray  # S
    joint_offset: np.ndarray  # J×3
    face_offset: np.ndarray  # Fv×3, rows follow model.face_vertex_index

    @property
    def n_frames(self) -> int:
        return len(self.pose)

    @classmethod
    def zeros(cls, model: TemplateModel, n_frames: int) -> "SequenceParams":
        return cls(
            pose=np.zeros((n_frames, model.n_joints, 3)),
            expression=np.zeros((n_frames, model.n_expr)),
            translation=np.zeros((n_frames, 3)),
            shape=np.zeros(model.n_shape),
            joint_offset=np.zeros((model.n_joints, 3)),
            face_offset=np.zeros((len(model.face_vertex_index), 3)),
        )

    def copy(self) -> "SequenceParams":
        return replace(self, **{k: v.copy() for k, v in self.arrays().items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "pose": self.pose,
            "expression": self.expression,
            "translation": self.translation,
            "shape": self.shape,
            "joint_offset": self.joint_offset,
            "face_offset": self.face_offset,
        }

    def validate(self, model: TemplateModel) -> None:
        T = self.n_frames
        checks = {
            "pose": (T, model.n_joints, 3),
            "expression": (T, model.n_expr),
            "translation": (T, 3),
            "shape": (model.n_shape,),
            "joint_offset": (model.n_joints, 3),
            "face_offset": (len(model.face_vertex_index), 3),
        }
        for name, shape in checks.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"SequenceParams.{name}: expected shape {shape}, got {got}")

    def save(self, path) -> None:
        save_blob(path, self.arrays(), kind="params")

    @classmethod
    def load(cls, path) -> "SequenceParams":
        arrays, _ = load_blob(path, kind="params")
        return cls(**{k: arrays[k] for k in ("pose", "expression", "translation", "shape", "joint_offset", "face_offset")})


# --- shaping ---------------------------------------------------------------


def face_offset_full(model: TemplateModel, face_offset: np.ndarray) -> np.ndarray:
    full = np.zeros((model.n_vertices, 3))
    full[model.face_vertex_index] = face_offset
    return full


def shaped_template(
    model: TemplateModel,
    shape: np.ndarray,
    joint_offset: np.ndarray | None = None,
    face_offset: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Rest vertices and joints after shape blendshapes, face offset and joint offset."""
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (model.n_shape,):
        raise ValueError(f"shape code has length {shape.size}, model expects {model.n_shape}")
    disp = model.shape_dirs @ shape
    if face_offset is not None:
        disp = disp + face_offset_full(model, face_offset)
    rest_vertices = model.vertices + disp
    rest_joints = model.base_joints + model.joint_matrix @ disp
    if joint_offset is not None:
        rest_joints = rest_joints + joint_offset
    return rest_vertices, rest_joints


def shaped_template_backward(
    model: TemplateModel, d_vertices: np.ndarray | None, d_joints: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. (shape, joint_offset, face_offset) of the shaped rest pose."""
    d_disp = np.zeros((model.n_vertices, 3)) if d_vertices is None else np.array(d_vertices, dtype=np.float64)
    d_joint_offset = np.zeros((model.n_joints, 3))
    if d_joints is not None:
        d_disp += model.joint_matrix.T @ d_joints
        d_joint_offset = np.array(d_joints, dtype=np.float64)
    d_shape = np.einsum("vck,vc->k", model.shape_dirs, d_disp)
    return d_shape, d_joint_offset, d_disp[model.face_vertex_index]


def expression_offsets(model: TemplateModel, expression: np.ndarray) -> np.ndarray:
    expression = np.asarray(expression, dtype=np.float64)
    if expression.shape != (model.n_expr,):
        raise ValueError(f"expression code has length {expression.size}, model expects {model.n_expr}")
    return model.expr_dirs @ expression


# --- rotations ---------------------------------------------------------------

_SMALL_ANGLE = 1e-2


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _rodrigues_coeffs(theta: np.ndarray):
    """sin(t)/t, (1-cos t)/t^2 and their derivatives divided by t, series below 1e-2."""
    small = theta < _SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    a = np.where(small, 1 - t2 / 6 + t2 * t2 / 120, s / t)
    b = np.where(small, 0.5 - t2 / 24 + t2 * t2 / 720, (1 - c) / (t * t))
    da = np.where(small, -1 / 3 + t2 / 30 - t2 * t2 / 840, (t * c - s) / t**3)
    db = np.where(small, -1 / 12 + t2 / 180 - t2 * t2 / 6720, (t * s - 2 * (1 - c)) / t**4)
    return a, b, da, db


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (...,3) to rotation matrices (...,3,3) via the exponential map."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    a, b, _, _ = _rodrigues_coeffs(theta)
    K = skew(aa)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def rodrigues_jacobian(aa: np.ndarray) -> np.ndarray:
    """dR/d(aa_i) as an array (..., 3[i], 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)
    a, b, da, db = _rodrigues_coeffs(theta)
    K = skew(aa)
    K2 = K @ K
    E = skew(np.eye(3))  # E[i] = [e_i]x
    out = np.empty(aa.shape[:-1] + (3, 3, 3))
    for i in range(3):
        vi = aa[..., i][..., None, None]
        out[..., i, :, :] = (
            da[..., None, None] * vi * K
            + a[..., None, None] * E[i]
            + db[..., None, None] * vi * K2
            + b[..., None, None] * (E[i] @ K + K @ E[i])
        )
    return out


# --- forward kinematics -------------------------------------------------------


@dataclass
class FKCache:
    rest_joints: np.ndarray
    parents: np.ndarray
    order: np.ndarray
    pose: np.ndarray  # B×J×3
    local: np.ndarray  # B×J×3×3
    glob_r: np.ndarray  # B×J×3×3
    glob_t: np.ndarray  # B×J×3
    batched: bool


def forward_kinematics(rest_joints: np.ndarray, parents: np.ndarray, pose: np.ndarray, return_cache: bool = False):
    """Rest-relative rigid transforms (J×4×4, or B×J×4×4 for batched poses).

    ``transforms[j]`` maps a rest-pose point rigidly into the posed frame of
    joint j; the rest pose (all-zero axis-angles) yields identities.
    """
    rest_joints = np.asarray(rest_joints, dtype=np.float64)
    pose = np.asarray(pose, dtype=np.float64)
    batched = pose.ndim == 3
    P = pose if batched else pose[None]
    order = topological_order(parents)
    B, J = P.shape[:2]
    local = rodrigues(P)
    glob_r = np.empty((B, J, 3, 3))
    glob_t = np.empty((B, J, 3))
    for j in order:
        p = parents[j]
        if p < 0:
            glob_r[:, j] = local[:, j]
            glob_t[:, j] = rest_joints[j]
        else:
            glob_r[:, j] = glob_r[:, p] @ local[:, j]
            glob_t[:, j] = glob_r[:, p] @ (rest_joints[j] - rest_joints[p]) + glob_t[:, p]
    out = np.zeros((B, J, 4, 4))
    out[:, :, :3, :3] = glob_r
    out[:, :, :3, 3] = glob_t - np.einsum("bjkl,jl->bjk", glob_r, rest_joints)
    out[:, :, 3, 3] = 1.0
    if not batched:
        out = out[0]
    if return_cache:
        return out, FKCache(rest_joints, np.asarray(parents), order, P, local, glob_r, glob_t, batched)
    return out


def forward_kinematics_backward(cache: FKCache, d_transforms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (pose, rest_joints); rest-joint gradient is summed over the batch."""
    dT = d_transforms if cache.batched else d_transforms[None]
    J_rest = cache.rest_joints
    dA_r = dT[:, :, :3, :3]
    dA_t = dT[:, :, :3, 3]
    d_gr = dA_r - np.einsum("bjk,jl->bjkl", dA_t, J_rest)
    d_gt = dA_t.copy()
    d_joints = -np.einsum("bjlk,bjl->jk", cache.glob_r, dA_t)
    d_local = np.zeros_like(cache.local)
    for j in cache.order[::-1]:
        p = cache.parents[j]
        if p < 0:
            d_local[:, j] = d_gr[:, j]
            d_joints[j] += d_gt[:, j].sum(axis=0)
            continue
        offset = J_rest[j] - J_rest[p]
        d_gr[:, p] += d_gr[:, j] @ np.swapaxes(cache.local[:, j], -1, -2) + np.einsum("bk,l->bkl", d_gt[:, j], offset)
        d_local[:, j] = np.swapaxes(cache.glob_r[:, p], -1, -2) @ d_gr[:, j]
        d_gt[:, p] += d_gt[:, j]
        g = np.einsum("blk,bl->bk", cache.glob_r[:, p], d_gt[:, j]).sum(axis=0)
        d_joints[j] += g
        d_joints[p] -= g
    jac = rodrigues_jacobian(cache.pose)
    d_pose = np.einsum("bjkl,bjikl->bji", d_local, jac)
    if not cache.batched:
        d_pose = d_pose[0]
    return d_pose, d_joints


def posed_joints(transforms: np.ndarray, rest_joints: np.ndarray) -> np.ndarray:
    return np.einsum("...jkl,jl->...jk", transforms[..., :3, :3], rest_joints) + transforms[..., :3, 3]


def relative_transforms(target: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Transforms taking points posed by ``source`` to points posed by ``target``.

    Joints whose two transforms are bitwise equal get an exact identity.
    """
    rel = target @ np.linalg.inv(source)
    same = np.all(target == source, axis=(-1, -2))
    rel[same] = np.eye(4)
    return rel


def relative_transforms_backward(target: np.ndarray, source: np.ndarray, d_rel: np.ndarray):
    inv_src = np.linalg.inv(source)
    d_target = d_rel @ np.swapaxes(inv_src, -1, -2)
    d_inv = np.swapaxes(target, -1, -2) @ d_rel
    d_source = -np.swapaxes(inv_src, -1, -2) @ d_inv @ np.swapaxes(inv_src, -1, -2)
    return d_target, d_source


# --- skinning ---------------------------------------------------------------


def lbs(vertices: np.ndarray, transforms: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Blend per-joint rigid transforms with per-vertex weights."""
    blended = np.einsum("vj,jab->vab", weights, transforms[:, :3, :])
    return np.einsum("vab,vb->va", blended[:, :, :3], vertices) + blended[:, :, 3]


def lbs_backward(vertices, transforms, weights, d_posed) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. (vertices, transforms) of :func:`lbs`."""
    blended = np.einsum("vj,jab->vab", weights, transforms[:, :3, :3])
    d_vertices = np.einsum("vab,va->vb", blended, d_posed)
    d_tr = np.zeros(transforms.shape)
    d_tr[:, :3, :3] = np.einsum("vj,va,vb->jab", weights, d_posed, vertices, optimize=True)
    d_tr[:, :3, 3] = weights.T @ d_posed
    return d_vertices, d_tr


# --- projection --------------------------------------------------------------


def project_points(points: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pinhole projection returning (pixels N×2, depth N, valid N).

    Points with camera depth <= 1e-4 are flagged invalid and their pixels are NaN.
    """
    pc = camera.to_camera(np.asarray(points, dtype=np.float64))
    z = pc[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    pix = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    pix[~valid] = np.nan
    return pix, z, valid


def project_points_backward(points: np.ndarray, camera: Camera, d_pix: np.ndarray) -> np.ndarray:
    pc = camera.to_camera(np.asarray(points, dtype=np.float64))
    z = pc[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    g = np.where(valid[:, None], d_pix, 0.0)
    d_pc = np.stack(
        [
            g[:, 0] * camera.fx / zs,
            g[:, 1] * camera.fy / zs,
            -(g[:, 0] * camera.fx * pc[:, 0] + g[:, 1] * camera.fy * pc[:, 1]) / zs**2,
        ],
        axis=1,
    )
    return d_pc @ camera.rotation
