"""Central finite-difference checks of every hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera
from .field import Mlp, Triplane, mlp_backward, mlp_forward, sample_triplane, sample_triplane_backward
from .mesh import laplacian_operator
from .objective import laplacian_reg
from .splat import GaussianCloud, render_gaussians, render_gaussians_backward, render_mesh, render_mesh_backward
from .synthetic import icosphere

TOLERANCE = 1e-3
FACE_TOLERANCE = 1e-2


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{status:4s} {self.name:32s} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} n={self.n_checked}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error relative to the numeric gradient's max magnitude."""
    scale = float(np.max(np.abs(numeric))) if numeric.size else 0.0
    diff = float(np.max(np.abs(analytic - numeric))) if numeric.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale


def numeric_gradient(f, x: np.ndarray, index, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f at the listed flat indices of x (x is perturbed in place and restored)."""
    flat = x.reshape(-1)
    out = np.empty(len(index))
    for k, i in enumerate(index):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out


def _subset(size: int, rng: np.random.Generator, limit: int | None) -> np.ndarray:
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, limit, replace=False))


def _toy_camera(size: int = 32) -> Camera:
    c = (size - 1) / 2.0
    return Camera(1.6 * size, 1.6 * size, c, c, size, size)


def check_splat(seed: int = 0, n: int = 8) -> list[CheckResult]:
    """Positions, log-scales and colors through a weighted image-and-alpha loss."""
    rng = np.random.default_rng(seed)
    cam = _toy_camera()
    while True:
        pos = np.column_stack([rng.uniform(-0.25, 0.25, (n, 2)), rng.uniform(2.0, 3.0, n)])
        if np.min(np.diff(np.sort(pos[:, 2]))) > 1e-6:
            break
    logs = np.log(rng.uniform(0.04, 0.09, n))
    cols = rng.uniform(0.0, 1.0, (n, 3))
    wr = rng.normal(size=(cam.height, cam.width, 3))
    wa = rng.normal(size=(cam.height, cam.width))

    def loss():
        r = render_gaussians(GaussianCloud(pos, logs, cols), cam, keep_cache=False)
        return float((wr * r.rgb).sum() + (wa * r.alpha).sum())

    r = render_gaussians(GaussianCloud(pos, logs, cols), cam)
    g = render_gaussians_backward(r.cache, wr, wa)
    out = []
    for name, x, ga in (("splat.positions", pos, g.positions), ("splat.log_scales", logs, g.log_scales), ("splat.colors", cols, g.colors)):
        idx = np.arange(x.size)
        out.append(CheckResult(name, relative_error(ga.reshape(-1)[idx], numeric_gradient(loss, x, idx)), TOLERANCE, len(idx)))
    return out


def check_triplane(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    planes = rng.normal(size=(3, 4, 8, 8))
    tp = Triplane(planes, np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    pts = rng.uniform(-0.9, 0.9, (20, 3))
    wf = rng.normal(size=(20, 12))

    def loss():
        return float((wf * sample_triplane(tp, pts)).sum())

    ga = sample_triplane_backward(tp, pts, wf)
    idx = np.flatnonzero(np.abs(ga.reshape(-1)) > 0)
    idx = np.concatenate([idx, _subset(planes.size, rng, 40)])
    num = numeric_gradient(loss, planes, idx)
    return [CheckResult("triplane.texels", relative_error(ga.reshape(-1)[idx], num), TOLERANCE, len(idx))]


def check_mlp(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    mlp = Mlp.create(5, 3, rng, hidden=8, groups=2, zero_last=False)
    for s, b in zip(mlp.gn_scale, mlp.gn_shift):
        s += rng.normal(0.0, 0.3, s.shape)
        b += rng.normal(0.0, 0.3, b.shape)
    x = rng.normal(size=(6, 5))
    wo = rng.normal(size=(6, 3))

    def loss():
        return float((wo * mlp_forward(mlp, x)[0]).sum())

    _, cache = mlp_forward(mlp, x)
    d_in, grads = mlp_backward(mlp, cache, wo)
    params = mlp.parameters()
    out = []
    for name in sorted(params):
        p = params[name]
        idx = np.arange(p.size)
        out.append(CheckResult(f"mlp.{name}", relative_error(grads[name].reshape(-1), numeric_gradient(loss, p, idx)), TOLERANCE, p.size))
    idx = np.arange(x.size)
    out.append(CheckResult("mlp.inputs", relative_error(d_in.reshape(-1), numeric_gradient(loss, x, idx)), TOLERANCE, x.size))
    return out


def check_laplacian(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    verts, faces = icosphere(1)
    ref = verts.copy()
    x = verts + rng.normal(0.0, 0.05, verts.shape)
    op = laplacian_operator(faces, len(verts))

    def loss():
        return laplacian_reg(x, ref, operator=op)[0]

    _, g = laplacian_reg(x, ref, operator=op)
    idx = np.arange(x.size)
    return [CheckResult("laplacian.positions", relative_error(g.reshape(-1), numeric_gradient(loss, x, idx)), TOLERANCE, x.size)]


def check_face(seed: int = 0, delta: float = 1e-3) -> list[CheckResult]:
    """Mesh-render vertex gradients with the loss restricted to pixels whose triangle stays fixed under ±delta."""
    rng = np.random.default_rng(seed)
    verts, faces = icosphere(1)
    verts = verts * 0.5 + np.array([0.0, 0.0, 2.5])
    uv = np.column_stack([0.5 + 0.5 * np.arctan2(verts[:, 0], -(verts[:, 2] - 2.5)) / np.pi, 0.5 + verts[:, 1]])
    tex = rng.uniform(0.0, 1.0, (16, 16, 3))
    cam = _toy_camera(40)
    base = render_mesh(verts, faces, uv, tex, cam)
    w = rng.normal(size=base.rgb.shape)
    front = np.flatnonzero(np.bincount(base.face_id[base.mask], minlength=len(faces)) > 0)
    cand = np.unique(faces[front])
    cand = cand[_subset(len(cand), rng, 24)]
    analytic, numeric = [], []
    for v in cand:
        for c in range(3):
            plus, minus = verts.copy(), verts.copy()
            plus[v, c] += delta
            minus[v, c] -= delta
            rp = render_mesh(plus, faces, uv, tex, cam)
            rm = render_mesh(minus, faces, uv, tex, cam)
            keep = (rp.face_id == base.face_id) & (rm.face_id == base.face_id) & base.mask
            keep = _interior(keep)
            wk = w * keep[..., None]
            num = float(((rp.rgb - rm.rgb) * wk).sum() / (2.0 * delta))
            g = render_mesh_backward(verts, faces, uv, tex, cam, base, wk)
            analytic.append(g[v, c])
            numeric.append(num)
    a, n = np.array(analytic), np.array(numeric)
    return [CheckResult("face.vertices", relative_error(a, n), FACE_TOLERANCE, len(a))]


def _interior(mask: np.ndarray) -> np.ndarray:
    """Drop pixels next to an excluded pixel, so texture-cell and coverage edges do not leak in."""
    m = mask.copy()
    m[1:] &= mask[:-1]
    m[:-1] &= mask[1:]
    m[:, 1:] &= mask[:, :-1]
    m[:, :-1] &= mask[:, 1:]
    return m


SUITE = {
    "a": check_splat,
    "b": check_triplane,
    "c": check_mlp,
    "d": check_laplacian,
    "e": check_face,
}


def run_suite(seed: int = 0, parts: str = "abcde") -> list[CheckResult]:
    results = []
    for key in parts:
        results.extend(SUITE[key](seed))
    return results
