"""Training losses and regularizers, each returning a value and its gradient."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy import sparse
from scipy.ndimage import correlate1d

from .camera import Camera
from .mesh import laplacian_operator
from .model import LEFT_HAND, RIGHT_HAND
from .splat import render_mesh, render_mesh_backward

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class LossWeights:
    l1: float = 1.0
    ssim: float = 0.2
    face: float = 1.0
    lap_position: float = 1e2
    lap_scale: float = 1e1
    lap_color: float = 1e1
    offset: float = 1e-1
    scale: float = 1e-2
    hand_color: float = 1e-1
    joint_offset: float = 100.0
    symmetry: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown loss weight(s): {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


# --- SSIM --------------------------------------------------------------------


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable window filter keeping only fully-covered ('valid') positions."""
    r = len(k) // 2
    out = correlate1d(correlate1d(img, k, axis=0, mode="constant"), k, axis=1, mode="constant")
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def _blur_adjoint(g: np.ndarray, k: np.ndarray, shape) -> np.ndarray:
    r = len(k) // 2
    full = np.zeros(shape)
    full[r : shape[0] - r, r : shape[1] - r] = g
    return correlate1d(correlate1d(full, k[::-1], axis=0, mode="constant"), k[::-1], axis=1, mode="constant")


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[:, :, None] if img.ndim == 2 else img


def _ssim_parts(x, y, window):
    k = gaussian_window(window)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _blur(x, k), _blur(y, k)
    mxx, myy, mxy = _blur(x * x, k), _blur(y * y, k), _blur(x * y, k)
    a1 = 2 * mx * my + c1
    a2 = 2 * (mxy - mx * my) + c2
    b1 = mx * mx + my * my + c1
    b2 = (mxx - mx * mx) + (myy - my * my) + c2
    return k, mx, my, a1, a2, b1, b2, (a1 * a2) / (b1 * b2)


def ssim(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over all full windows and channels (data range 1)."""
    x, y = _as_hwc(x), _as_hwc(y)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < window:
        raise ValueError(f"image {x.shape[:2]} smaller than the {window}×{window} SSIM window")
    return float(np.mean([_ssim_parts(x[..., c], y[..., c], window)[-1].mean() for c in range(x.shape[2])]))


def ssim_backward(x: np.ndarray, y: np.ndarray, window: int = SSIM_WINDOW) -> tuple[float, np.ndarray]:
    """SSIM value and its gradient with respect to ``x``."""
    x, y = _as_hwc(x), _as_hwc(y)
    C = x.shape[2]
    grad = np.zeros_like(x)
    total = 0.0
    for c in range(C):
        xc, yc = x[..., c], y[..., c]
        k, mx, my, a1, a2, b1, b2, s = _ssim_parts(xc, yc, window)
        scale = 1.0 / (s.size * C)
        total += s.mean() / C
        g_mx = s * (2 * my / a1 - 2 * my / a2 - 2 * mx / b1 + 2 * mx / b2) * scale
        g_mxx = -s / b2 * scale
        g_mxy = 2 * s / a2 * scale
        shape = xc.shape
        grad[..., c] = (
            _blur_adjoint(g_mx, k, shape) + 2 * xc * _blur_adjoint(g_mxx, k, shape) + yc * _blur_adjoint(g_mxy, k, shape)
        )
    return float(total), grad


# --- image loss --------------------------------------------------------------


def crop_box(mask: np.ndarray, dilate: float = 0.10, min_size: int = SSIM_WINDOW) -> tuple[int, int, int, int]:
    """Tight bounding box (y0, y1, x0, x1) of a mask, grown by ``dilate`` of its size per side.

    The box is widened if needed so that it can hold one SSIM window.
    """
    H, W = mask.shape
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask: no human region to crop")

    def span(lo, hi, n):
        pad = int(np.ceil(dilate * (hi - lo + 1)))
        lo, hi = max(lo - pad, 0), min(hi + 1 + pad, n)
        while hi - lo < min(min_size, n):
            lo, hi = max(lo - 1, 0), min(hi + 1, n)
        return lo, hi

    y0, y1 = span(ys.min(), ys.max(), H)
    x0, x1 = span(xs.min(), xs.max(), W)
    return y0, y1, x0, x1


def image_loss(rendered: np.ndarray, target: np.ndarray, crop, w_l1: float = 1.0, w_ssim: float = 0.2) -> tuple[float, dict, np.ndarray]:
    """w_l1·mean|r − t| + w_ssim·(1 − SSIM) over the crop; returns (loss, terms, d loss / d rendered)."""
    y0, y1, x0, x1 = crop
    if y1 <= y0 or x1 <= x0:
        raise ValueError(f"empty crop {crop}")
    r = rendered[y0:y1, x0:x1]
    t = target[y0:y1, x0:x1]
    diff = r - t
    l1 = float(np.abs(diff).mean())
    s, d_ssim = ssim_backward(r, t)
    grad = np.zeros_like(rendered)
    grad[y0:y1, x0:x1] = w_l1 * np.sign(diff) / diff.size - w_ssim * d_ssim.reshape(r.shape)
    return w_l1 * l1 + w_ssim * (1.0 - s), {"l1": l1, "ssim": s}, grad


# --- face loss ---------------------------------------------------------------


def face_loss(
    face_vertices: np.ndarray,
    face_faces: np.ndarray,
    face_uv: np.ndarray,
    texture: np.ndarray | None,
    target: np.ndarray,
    camera: Camera,
    visible: bool,
) -> tuple[float, np.ndarray]:
    """Masked mean-L1 between the textured face render and the target; zero when the face is hidden."""
    if not visible:
        return 0.0, np.zeros((len(face_vertices), 3))
    if texture is None:
        raise ValueError("face loss requires a face texture")
    res = render_mesh(face_vertices, face_faces, face_uv, texture, camera)
    n = int(res.mask.sum())
    if n == 0:
        return 0.0, np.zeros((len(face_vertices), 3))
    diff = (res.rgb - target) * res.mask[..., None]
    loss = float(np.abs(diff).sum() / (3 * n))
    d_rgb = np.sign(diff) / (3 * n)
    return loss, render_mesh_backward(face_vertices, face_faces, face_uv, texture, camera, res, d_rgb)


# --- Laplacian ---------------------------------------------------------------


def laplacian_reg(
    deformed: np.ndarray, reference: np.ndarray | None, faces: np.ndarray | None = None, operator: sparse.spmatrix | None = None
) -> tuple[float, np.ndarray]:
    """Mean over vertices of ‖L·deformed − L·reference‖²; a None reference targets zero Laplacian."""
    deformed = np.asarray(deformed, dtype=np.float64)
    flat = deformed.reshape(len(deformed), -1)
    if operator is None:
        operator = laplacian_operator(faces, len(deformed))
    if operator.shape[0] != len(deformed):
        raise ValueError(f"topology has {operator.shape[0]} vertices, field has {len(deformed)}")
    r = operator @ flat
    if reference is not None:
        reference = np.asarray(reference, dtype=np.float64).reshape(len(deformed), -1)
        if reference.shape != flat.shape:
            raise ValueError(f"reference shape {reference.shape} does not match {flat.shape}")
        r = r - operator @ reference
    n = len(deformed)
    return float((r * r).sum() / n), (2.0 / n * (operator.T @ r)).reshape(deformed.shape)


# --- asset regularizers ------------------------------------------------------


def mean_sq(x: np.ndarray) -> tuple[float, np.ndarray]:
    """mean over rows of the squared row norm."""
    x = np.asarray(x, dtype=np.float64)
    n = max(len(x), 1)
    return float((x * x).sum() / n), 2.0 * x / n


def offset_reg(dv_tri: np.ndarray, dv_pose: np.ndarray):
    a, ga = mean_sq(dv_tri)
    b, gb = mean_sq(dv_pose)
    return a + b, ga, gb


def scale_reg(log_scales: np.ndarray) -> tuple[float, np.ndarray]:
    e2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    n = max(len(e2), 1)
    return float(e2.sum() / n), 2.0 * e2 / n


def hand_color_reg(colors: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Per hand, mean squared deviation from that hand's mean color (the mean is a constant)."""
    total, grad = 0.0, np.zeros_like(colors)
    for lab in (LEFT_HAND, RIGHT_HAND):
        idx = np.flatnonzero(labels == lab)
        if len(idx) == 0:
            continue
        dev = colors[idx] - colors[idx].mean(axis=0)
        total += float((dev * dev).sum() / len(idx))
        grad[idx] = 2.0 * dev / len(idx)
    return total, grad


def mirror(values: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Reflect through the x=0 plane and swap left/right entries."""
    out = np.asarray(values, dtype=np.float64)[table].copy()
    out[:, 0] *= -1.0
    return out


def symmetry_term(values: np.ndarray, table: np.ndarray) -> tuple[float, np.ndarray]:
    """mean‖mirror(x) − x‖² and its gradient."""
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return 0.0, np.zeros_like(values)
    d = mirror(values, table) - values
    n = len(values)
    g_d = 2.0 * d / n
    g = -g_d
    back = g_d.copy()
    back[:, 0] *= -1.0
    np.add.at(g, table, back)
    return float((d * d).sum() / n), g


def face_mirror_table(vertex_mirror: np.ndarray, face_index: np.ndarray) -> np.ndarray:
    """Mirror table restricted to the face subset, in subset indices."""
    remap = np.full(len(vertex_mirror), -1, dtype=np.int64)
    remap[face_index] = np.arange(len(face_index))
    table = remap[vertex_mirror[face_index]]
    if (table < 0).any():
        raise ValueError("vertex mirror table maps a face vertex outside the face region")
    return table


def symmetry_reg(joint_offset, joint_mirror, face_offset=None, face_table=None):
    """Symmetry of the joint offset and face offset; returns (value, d joint_offset, d face_offset)."""
    if joint_mirror is None:
        raise ValueError("symmetry regularizer needs a joint mirror table")
    a, ga = symmetry_term(joint_offset, joint_mirror)
    if face_offset is None:
        return a, ga, None
    if face_table is None:
        raise ValueError("symmetry regularizer needs a vertex mirror table")
    b, gb = symmetry_term(face_offset, face_table)
    return a + b, ga, gb


def asset_regs(dv_tri, dv_pose, log_scales, hand_colors, hand_labels, joint_offset, face_offset, joint_mirror, face_table):
    """All asset regularizers as {name: value} plus {name: {input: grad}}."""
    off, g_tri, g_pose = offset_reg(dv_tri, dv_pose)
    sc, g_sc = scale_reg(log_scales)
    hc, g_hc = hand_color_reg(hand_colors, hand_labels)
    jo, g_jo = mean_sq(joint_offset)
    sym, g_sj, g_sf = symmetry_reg(joint_offset, joint_mirror, face_offset, face_table)
    values = {"offset": off, "scale": sc, "hand_color": hc, "joint_offset": jo, "symmetry": sym}
    grads = {
        "offset": {"dv_tri": g_tri, "dv_pose": g_pose},
        "scale": {"log_scales": g_sc},
        "hand_color": {"colors": g_hc},
        "joint_offset": {"joint_offset": g_jo},
        "symmetry": {"joint_offset": g_sj, "face_offset": g_sf},
    }
    return values, grads
