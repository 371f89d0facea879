"""Triplane feature fields and MLP heads that regress per-vertex Gaussian assets.

Backward passes are written by hand. Gradients are returned as dictionaries
keyed like :meth:`AvatarField.parameters`.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import sparse

# (first axis -> columns, second axis -> rows) for the xy, xz and yz planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))
GN_EPS = 1e-5
BBOX_MARGIN = 0.10


class OutOfBoundsError(ValueError):
    pass


@dataclass
class Triplane:
    planes: np.ndarray  # 3×C×H×W
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    @classmethod
    def around(cls, points: np.ndarray, channels: int, height: int, width: int, margin: float = BBOX_MARGIN) -> "Triplane":
        """Zero-initialized planes over the points' bounding box grown by ``margin`` per side."""
        lo, hi = points.min(axis=0), points.max(axis=0)
        pad = np.maximum(hi - lo, 1e-3) * margin
        return cls(np.zeros((3, channels, height, width)), lo - pad, hi + pad)

    @property
    def channels(self) -> int:
        return self.planes.shape[1]

    def interpolation(self, points: np.ndarray) -> list[sparse.csr_matrix]:
        """Per-plane N×(H·W) bilinear interpolation matrices."""
        points = np.asarray(points, dtype=np.float64)
        unit = (points - self.bbox_min) / (self.bbox_max - self.bbox_min)
        outside = np.flatnonzero(((unit < 0) | (unit > 1)).any(axis=1))
        if len(outside):
            i = int(outside[0])
            raise OutOfBoundsError(f"point {i} at {points[i].tolist()} lies outside the triplane box")
        _, _, H, W = self.planes.shape
        n = len(points)
        mats = []
        for a, b in PLANE_AXES:
            col = unit[:, a] * (W - 1)
            row = unit[:, b] * (H - 1)
            c0 = np.clip(np.floor(col).astype(np.int64), 0, W - 2)
            r0 = np.clip(np.floor(row).astype(np.int64), 0, H - 2)
            fc, fr = col - c0, row - r0
            idx = np.stack([r0 * W + c0, r0 * W + c0 + 1, (r0 + 1) * W + c0, (r0 + 1) * W + c0 + 1], axis=1)
            wts = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
            mats.append(sparse.csr_matrix((wts.ravel(), (np.repeat(np.arange(n), 4), idx.ravel())), shape=(n, H * W)))
        return mats


def sample_triplane(plane_set: Triplane, points: np.ndarray, interp=None) -> np.ndarray:
    """Bilinear features from the xy, xz and yz planes, concatenated (N×3C)."""
    interp = plane_set.interpolation(points) if interp is None else interp
    C = plane_set.channels
    return np.concatenate([m @ plane_set.planes[k].reshape(C, -1).T for k, m in enumerate(interp)], axis=1)


def sample_triplane_backward(plane_set: Triplane, points: np.ndarray, d_features: np.ndarray, interp=None) -> np.ndarray:
    """Adjoint of :func:`sample_triplane`: scatter feature gradients into the touched texels."""
    interp = plane_set.interpolation(points) if interp is None else interp
    _, C, H, W = plane_set.planes.shape
    out = np.empty_like(plane_set.planes)
    for k, m in enumerate(interp):
        out[k] = (m.T @ d_features[:, k * C : (k + 1) * C]).T.reshape(C, H, W)
    return out


# --- MLP -------------------------------------------------------------------


@dataclass
class Mlp:
    """FC → GN → ReLU, three times, then a final FC."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gn_scale: list[np.ndarray]
    gn_shift: list[np.ndarray]
    groups: int = 8

    @classmethod
    def create(
        cls,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        hidden: int = 128,
        groups: int = 8,
        n_layers: int = 4,
        zero_last: bool = True,
    ) -> "Mlp":
        if hidden % groups:
            raise ValueError(f"group count {groups} does not divide hidden width {hidden}")
        widths = [d_in] + [hidden] * (n_layers - 1) + [d_out]
        weights, biases = [], []
        for i in range(n_layers):
            bound = 1.0 / np.sqrt(widths[i])
            if i == n_layers - 1 and zero_last:
                weights.append(np.zeros((widths[i], widths[i + 1])))
                biases.append(np.zeros(widths[i + 1]))
            else:
                weights.append(rng.uniform(-bound, bound, (widths[i], widths[i + 1])))
                biases.append(rng.uniform(-bound, bound, widths[i + 1]))
        return cls(
            weights,
            biases,
            [np.ones(hidden) for _ in range(n_layers - 1)],
            [np.zeros(hidden) for _ in range(n_layers - 1)],
            groups,
        )

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def d_out(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}w{i}"] = w
            out[f"{prefix}b{i}"] = b
        for i, (g, s) in enumerate(zip(self.gn_scale, self.gn_shift)):
            out[f"{prefix}gn{i}.scale"] = g
            out[f"{prefix}gn{i}.shift"] = s
        return out


@dataclass
class MlpCache:
    inputs: np.ndarray
    xhat: list = dc_field(default_factory=list)
    inv_std: list = dc_field(default_factory=list)
    active: list = dc_field(default_factory=list)
    hidden: list = dc_field(default_factory=list)


def _group_norm(x: np.ndarray, groups: int):
    n, c = x.shape
    m = c // groups
    xg = x.reshape(n, groups, m)
    xc = xg - xg.mean(axis=2, keepdims=True)
    var = np.einsum("ngm,ngm->ng", xc, xc) / m
    inv = (1.0 / np.sqrt(var + GN_EPS))[..., None]
    xc *= inv
    return xc.reshape(n, c), inv


def _group_norm_backward(d_xhat: np.ndarray, xhat: np.ndarray, inv: np.ndarray, groups: int) -> np.ndarray:
    n, c = d_xhat.shape
    m = c // groups
    dg = d_xhat.reshape(n, groups, m)
    xg = xhat.reshape(n, groups, m)
    proj = np.einsum("ngm,ngm->ng", dg, xg)[..., None] / m
    dx = dg - dg.mean(axis=2, keepdims=True)
    dx -= xg * proj
    dx *= inv
    return dx.reshape(n, c)


def mlp_forward(mlp: Mlp, inputs: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != mlp.d_in:
        raise ValueError(f"MLP expects inputs of width {mlp.d_in}, got shape {inputs.shape}")
    cache = MlpCache(inputs)
    h = inputs
    for i in range(len(mlp.weights) - 1):
        pre = h @ mlp.weights[i] + mlp.biases[i]
        xhat, inv = _group_norm(pre, mlp.groups)
        y = xhat * mlp.gn_scale[i] + mlp.gn_shift[i]
        active = y > 0
        h = np.maximum(y, 0.0)
        cache.xhat.append(xhat)
        cache.inv_std.append(inv)
        cache.active.append(active)
        cache.hidden.append(h)
    return h @ mlp.weights[-1] + mlp.biases[-1], cache


def mlp_backward(mlp: Mlp, cache: MlpCache, d_out: np.ndarray, prefix: str = "") -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Exact reverse-mode gradients; the ReLU subgradient at zero is zero."""
    n_layers = len(mlp.weights)
    if d_out.shape != (cache.inputs.shape[0], mlp.d_out):
        raise ValueError(f"stale MLP cache: d_out {d_out.shape} vs forward batch {cache.inputs.shape[0]}×{mlp.d_out}")
    grads: dict[str, np.ndarray] = {}
    last_in = cache.hidden[-1] if n_layers > 1 else cache.inputs
    grads[f"{prefix}w{n_layers - 1}"] = last_in.T @ d_out
    grads[f"{prefix}b{n_layers - 1}"] = d_out.sum(axis=0)
    d_h = d_out @ mlp.weights[-1].T
    for i in range(n_layers - 2, -1, -1):
        d_y = d_h * cache.active[i]
        grads[f"{prefix}gn{i}.scale"] = (d_y * cache.xhat[i]).sum(axis=0)
        grads[f"{prefix}gn{i}.shift"] = d_y.sum(axis=0)
        d_pre = _group_norm_backward(d_y * mlp.gn_scale[i], cache.xhat[i], cache.inv_std[i], mlp.groups)
        layer_in = cache.hidden[i - 1] if i > 0 else cache.inputs
        grads[f"{prefix}w{i}"] = layer_in.T @ d_pre
        grads[f"{prefix}b{i}"] = d_pre.sum(axis=0)
        d_h = d_pre @ mlp.weights[i].T
    return d_h, grads


# --- avatar field ------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


HEADS = ("geo_static", "color_static", "geo_pose", "color_pose")


@dataclass
class AvatarField:
    """Body and face triplanes plus the four shared MLP heads.

    Features are sampled at the frozen positional-encoding mesh; face-labeled
    vertices read only the face triplane, all others only the body triplane.
    """

    body: Triplane
    face: Triplane
    mlps: dict[str, Mlp]
    pos_mesh: np.ndarray
    face_mask: np.ndarray
    _interp: dict = dc_field(default_factory=dict, repr=False)

    @classmethod
    def create(
        cls,
        pos_mesh: np.ndarray,
        face_mask: np.ndarray,
        n_pose: int,
        rng: np.random.Generator,
        channels: int = 32,
        resolution: int = 128,
        face_resolution: int | None = None,
        hidden: int = 128,
        groups: int = 8,
        init_log_scale: float = 0.0,
    ) -> "AvatarField":
        pos_mesh = np.array(pos_mesh, dtype=np.float64)
        face_mask = np.asarray(face_mask, dtype=bool)
        fres = face_resolution or resolution
        body = Triplane.around(pos_mesh, channels, resolution, resolution)
        face_pts = pos_mesh[face_mask] if face_mask.any() else pos_mesh
        face = Triplane.around(face_pts, channels, fres, fres)
        f = 3 * channels
        mlps = {
            "geo_static": Mlp.create(f, 4, rng, hidden, groups),
            "color_static": Mlp.create(f, 3, rng, hidden, groups),
            "geo_pose": Mlp.create(f + n_pose, 4, rng, hidden, groups),
            "color_pose": Mlp.create(f + n_pose + 3, 3, rng, hidden, groups),
        }
        mlps["geo_static"].biases[-1][3] = init_log_scale
        return cls(body, face, mlps, pos_mesh, face_mask)

    @property
    def n_points(self) -> int:
        return len(self.pos_mesh)

    @property
    def feature_width(self) -> int:
        return 3 * self.body.channels

    def parameters(self) -> dict[str, np.ndarray]:
        out = {"body_plane": self.body.planes, "face_plane": self.face.planes}
        for name in HEADS:
            out.update(self.mlps[name].parameters(prefix=f"{name}."))
        return out

    def _interpolation(self):
        if not self._interp:
            body_idx = np.flatnonzero(~self.face_mask)
            face_idx = np.flatnonzero(self.face_mask)
            self._interp["body"] = (body_idx, self.body.interpolation(self.pos_mesh[body_idx]))
            self._interp["face"] = (face_idx, self.face.interpolation(self.pos_mesh[face_idx]))
        return self._interp

    def features(self) -> np.ndarray:
        interp = self._interpolation()
        out = np.zeros((self.n_points, self.feature_width))
        for key, plane in (("body", self.body), ("face", self.face)):
            idx, mats = interp[key]
            if len(idx):
                out[idx] = sample_triplane(plane, self.pos_mesh[idx], mats)
        return out

    def features_backward(self, d_features: np.ndarray) -> dict[str, np.ndarray]:
        interp = self._interpolation()
        grads = {}
        for key, plane in (("body", self.body), ("face", self.face)):
            idx, mats = interp[key]
            if len(idx):
                grads[f"{key}_plane"] = sample_triplane_backward(plane, self.pos_mesh[idx], d_features[idx], mats)
            else:
                grads[f"{key}_plane"] = np.zeros_like(plane.planes)
        return grads


@dataclass
class StaticAssets:
    offsets: np.ndarray  # N×3
    log_scales: np.ndarray  # N
    colors: np.ndarray  # N×3 in [0,1]
    features: np.ndarray
    geo_cache: MlpCache
    color_cache: MlpCache


def regress_static_assets(field: AvatarField) -> StaticAssets:
    feats = field.features()
    geo, gcache = mlp_forward(field.mlps["geo_static"], feats)
    col, ccache = mlp_forward(field.mlps["color_static"], feats)
    return StaticAssets(geo[:, :3], geo[:, 3], sigmoid(col), feats, gcache, ccache)


def regress_static_backward(field: AvatarField, assets: StaticAssets, d_offsets, d_log_scales, d_colors, d_features=None):
    """Gradients for the static heads and triplanes. ``d_features`` adds upstream feature gradients."""
    grads: dict[str, np.ndarray] = {}
    d_geo = np.concatenate([d_offsets, d_log_scales[:, None]], axis=1)
    d_f1, g1 = mlp_backward(field.mlps["geo_static"], assets.geo_cache, d_geo, prefix="geo_static.")
    d_raw = d_colors * assets.colors * (1.0 - assets.colors)
    d_f2, g2 = mlp_backward(field.mlps["color_static"], assets.color_cache, d_raw, prefix="color_static.")
    grads.update(g1)
    grads.update(g2)
    d_feat = d_f1 + d_f2
    if d_features is not None:
        d_feat = d_feat + d_features
    grads.update(field.features_backward(d_feat))
    return grads


@dataclass
class PoseAssets:
    offsets: np.ndarray  # N×3
    log_scale_offsets: np.ndarray  # N
    color_offsets: np.ndarray  # N×3
    geo_cache: MlpCache
    color_cache: MlpCache
    n_pose: int


def _pose_inputs(features: np.ndarray, pose_no_root: np.ndarray) -> np.ndarray:
    theta = np.broadcast_to(np.ravel(pose_no_root), (len(features), np.size(pose_no_root)))
    return np.concatenate([features, theta], axis=1)


def regress_pose_geometry(field: AvatarField, features: np.ndarray, pose_no_root: np.ndarray):
    """Pose-conditioned (offsets N×3, log-scale offsets N, cache)."""
    geo, cache = mlp_forward(field.mlps["geo_pose"], _pose_inputs(features, pose_no_root))
    return geo[:, :3], geo[:, 3], cache


def regress_pose_color(field: AvatarField, features: np.ndarray, pose_no_root: np.ndarray, normals: np.ndarray):
    """Pose-conditioned color offsets (N×3) and cache; the head also sees per-vertex normals."""
    return mlp_forward(field.mlps["color_pose"], np.concatenate([_pose_inputs(features, pose_no_root), normals], axis=1))


def regress_pose_assets(field: AvatarField, features: np.ndarray, pose_no_root: np.ndarray, normals: np.ndarray) -> PoseAssets:
    """Additive pose-dependent offsets for geometry, scale and color."""
    offsets, dlog, gcache = regress_pose_geometry(field, features, pose_no_root)
    col, ccache = regress_pose_color(field, features, pose_no_root, normals)
    return PoseAssets(offsets, dlog, col, gcache, ccache, np.size(pose_no_root))


def regress_pose_backward(field: AvatarField, assets: PoseAssets, d_offsets, d_log_scale_offsets, d_color_offsets):
    """Returns (grads, d_features, d_pose_no_root (flat), d_normals)."""
    grads: dict[str, np.ndarray] = {}
    d_geo = np.concatenate([d_offsets, d_log_scale_offsets[:, None]], axis=1)
    d_in1, g1 = mlp_backward(field.mlps["geo_pose"], assets.geo_cache, d_geo, prefix="geo_pose.")
    d_in2, g2 = mlp_backward(field.mlps["color_pose"], assets.color_cache, d_color_offsets, prefix="color_pose.")
    grads.update(g1)
    grads.update(g2)
    fw = field.feature_width
    p = assets.n_pose
    d_feat = d_in1[:, :fw] + d_in2[:, :fw]
    d_pose = d_in1[:, fw : fw + p].sum(axis=0) + d_in2[:, fw : fw + p].sum(axis=0)
    d_normals = d_in2[:, fw + p :]
    return grads, d_feat, d_pose, d_normals


# --- checkpoints -------------------------------------------------------------


def field_arrays(field: AvatarField) -> dict[str, np.ndarray]:
    arrays = {f"field.{k}": v for k, v in field.parameters().items()}
    arrays["field.pos_mesh"] = field.pos_mesh
    arrays["field.face_mask"] = field.face_mask.astype(np.uint8)
    arrays["field.body_bbox"] = np.stack([field.body.bbox_min, field.body.bbox_max])
    arrays["field.face_bbox"] = np.stack([field.face.bbox_min, field.face.bbox_max])
    return arrays


def field_from_arrays(arrays: dict[str, np.ndarray], groups: int = 8) -> AvatarField:
    def head(name: str) -> Mlp:
        n = sum(1 for k in arrays if k.startswith(f"field.{name}.w"))
        return Mlp(
            [arrays[f"field.{name}.w{i}"] for i in range(n)],
            [arrays[f"field.{name}.b{i}"] for i in range(n)],
            [arrays[f"field.{name}.gn{i}.scale"] for i in range(n - 1)],
            [arrays[f"field.{name}.gn{i}.shift"] for i in range(n - 1)],
            groups,
        )

    bb, fb = arrays["field.body_bbox"], arrays["field.face_bbox"]
    return AvatarField(
        Triplane(arrays["field.body_plane"], bb[0], bb[1]),
        Triplane(arrays["field.face_plane"], fb[0], fb[1]),
        {name: head(name) for name in HEADS},
        arrays["field.pos_mesh"],
        arrays["field.face_mask"].astype(bool),
    )
