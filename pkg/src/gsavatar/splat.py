"""Differentiable isotropic Gaussian rasterizer and a hard z-buffer mesh rasterizer.

The splat kernel is an isotropic Gaussian projected with per-axis focal
lengths, truncated at three standard deviations, with opacity one and the
per-pixel weight clamped to 0.99. Pixels composite front to back in depth
order (ties broken by index) and stop once transmittance drops below 1e-4.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import NEAR_PLANE, Camera
from .mesh import vertex_normals
from .model import project_points_backward

TILE = 16
CUTOFF = 3.0
MAX_WEIGHT = 0.99
MIN_TRANSMITTANCE = 1e-4


@dataclass
class GaussianCloud:
    positions: np.ndarray  # N×3
    log_scales: np.ndarray  # N
    colors: np.ndarray  # N×3
    faces: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        if len(self.log_scales) != n or len(self.colors) != n:
            raise ValueError("positions, log_scales and colors must have the same length")

    def __len__(self) -> int:
        return len(self.positions)

    def check_finite(self) -> None:
        for name in ("positions", "log_scales", "colors"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"GaussianCloud.{name} contains non-finite values")


@dataclass
class Projection:
    cam_points: np.ndarray
    u: np.ndarray
    v: np.ndarray
    sx: np.ndarray
    sy: np.ndarray
    scale: np.ndarray
    valid: np.ndarray


def project_cloud(cloud: GaussianCloud, camera: Camera) -> Projection:
    pc = camera.to_camera(cloud.positions)
    z = pc[:, 2]
    valid = z > NEAR_PLANE
    zs = np.where(valid, z, 1.0)
    s = np.exp(cloud.log_scales)
    return Projection(
        pc,
        camera.fx * pc[:, 0] / zs + camera.cx,
        camera.fy * pc[:, 1] / zs + camera.cy,
        s * camera.fx / zs,
        s * camera.fy / zs,
        s,
        valid,
    )


def depth_order(z: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate indices sorted front to back, ties broken by index."""
    return candidates[np.lexsort((candidates, z[candidates]))]


def _splat_weights(px, py, u, v, sx, sy):
    """Clamped weights, raw Gaussian values and normalized squared distance (K×P)."""
    dx = px[None, :] - u[:, None]
    dy = py[None, :] - v[:, None]
    q = (dx / sx[:, None]) ** 2 + (dy / sy[:, None]) ** 2
    g = np.where(q <= CUTOFF * CUTOFF, np.exp(-0.5 * q), 0.0)
    return np.minimum(g, MAX_WEIGHT), g, q, dx, dy


@dataclass
class TileBins:
    tiles: list[tuple[int, int, int, int]]  # (y0, y1, x0, x1)
    members: list[np.ndarray]  # per tile, Gaussian ids front to back


def bin_gaussians(proj: Projection, width: int, height: int) -> TileBins:
    """Assign each visible Gaussian to every tile its 3-sigma box touches."""
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    ids = np.flatnonzero(proj.valid)
    u, v, sx, sy = proj.u[ids], proj.v[ids], proj.sx[ids], proj.sy[ids]
    x0 = np.maximum(np.ceil(u - CUTOFF * sx), 0)
    x1 = np.minimum(np.floor(u + CUTOFF * sx), width - 1)
    y0 = np.maximum(np.ceil(v - CUTOFF * sy), 0)
    y1 = np.minimum(np.floor(v + CUTOFF * sy), height - 1)
    keep = (x0 <= x1) & (y0 <= y1) & np.isfinite(x0) & np.isfinite(y0)
    ids, x0, x1, y0, y1 = ids[keep], x0[keep], x1[keep], y0[keep], y1[keep]
    tx0, tx1 = (x0 // TILE).astype(np.int64), (x1 // TILE).astype(np.int64)
    ty0, ty1 = (y0 // TILE).astype(np.int64), (y1 // TILE).astype(np.int64)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    gid = np.repeat(ids, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = np.repeat(tx0, counts) + local % np.repeat(nx, counts)
    ty = np.repeat(ty0, counts) + local // np.repeat(nx, counts)
    tile_id = ty * ntx + tx
    z = proj.cam_points[:, 2]
    order = np.lexsort((gid, z[gid], tile_id))
    gid, tile_id = gid[order], tile_id[order]
    bounds = np.searchsorted(tile_id, np.arange(ntx * nty + 1))
    tiles, members = [], []
    for t in range(ntx * nty):
        ty_, tx_ = divmod(t, ntx)
        tiles.append((ty_ * TILE, min((ty_ + 1) * TILE, height), tx_ * TILE, min((tx_ + 1) * TILE, width)))
        members.append(gid[bounds[t] : bounds[t + 1]])
    return TileBins(tiles, members)


@dataclass
class RenderCache:
    cloud: GaussianCloud
    camera: Camera
    proj: Projection
    bins: TileBins
    normals: np.ndarray
    rgb: np.ndarray
    alpha: np.ndarray
    tile_state: list | None = None  # per tile (weights, transmittance before, included)


@dataclass
class RenderResult:
    rgb: np.ndarray  # H×W×3
    alpha: np.ndarray  # H×W
    depth: np.ndarray  # H×W
    normal: np.ndarray  # H×W×3
    cache: RenderCache | None = None
    weight_sum: np.ndarray | None = None  # Σ w·T per pixel
    transmittance: np.ndarray | None = None  # final T per pixel


def _composite_tile(tile, ids, proj: Projection, colors, normals):
    y0, y1, x0, x1 = tile
    py, px = np.mgrid[y0:y1, x0:x1]
    px, py = px.ravel().astype(np.float64), py.ravel().astype(np.float64)
    P = len(px)
    if len(ids) == 0:
        zeros = np.zeros(P)
        return np.zeros((P, 3)), zeros, zeros, np.zeros((P, 3)), zeros, np.ones(P), None
    w, _, _, _, _ = _splat_weights(px, py, proj.u[ids], proj.v[ids], proj.sx[ids], proj.sy[ids])
    t_after = np.cumprod(1.0 - w, axis=0)
    t_before = np.vstack([np.ones((1, P)), t_after[:-1]])
    inc = t_before >= MIN_TRANSMITTANCE
    a = np.where(inc, w * t_before, 0.0)
    n_inc = inc.sum(axis=0)
    t_final = np.where(n_inc > 0, t_after[np.maximum(n_inc - 1, 0), np.arange(P)], 1.0)
    rgb = a.T @ colors[ids]
    depth = a.T @ proj.cam_points[ids, 2]
    normal = a.T @ normals[ids]
    return rgb, 1.0 - t_final, depth, normal, a.sum(axis=0), t_final, (w, t_before, inc, t_final)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def _cloud_normals(cloud: GaussianCloud) -> np.ndarray:
    if cloud.faces is None or len(cloud.faces) == 0:
        return np.zeros_like(cloud.positions)
    return vertex_normals(cloud.positions, cloud.faces)[0]


def render_gaussians(cloud: GaussianCloud, camera: Camera, workers: int = 1, keep_cache: bool = True) -> RenderResult:
    """Tile-based front-to-back compositing of an isotropic Gaussian cloud."""
    cloud.check_finite()
    H, W = camera.height, camera.width
    proj = project_cloud(cloud, camera)
    bins = bin_gaussians(proj, W, H)
    normals = _cloud_normals(cloud)
    outs = _map(
        lambda tile, ids: _composite_tile(tile, ids, proj, cloud.colors, normals),
        list(zip(bins.tiles, bins.members)),
        workers,
    )
    rgb = np.zeros((H, W, 3))
    alpha = np.zeros((H, W))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    wsum = np.zeros((H, W))
    tfin = np.ones((H, W))
    for (y0, y1, x0, x1), (c, al, d, n, ws, tf, _) in zip(bins.tiles, outs):
        h, w = y1 - y0, x1 - x0
        rgb[y0:y1, x0:x1] = c.reshape(h, w, 3)
        alpha[y0:y1, x0:x1] = al.reshape(h, w)
        depth[y0:y1, x0:x1] = d.reshape(h, w)
        normal[y0:y1, x0:x1] = n.reshape(h, w, 3)
        wsum[y0:y1, x0:x1] = ws.reshape(h, w)
        tfin[y0:y1, x0:x1] = tf.reshape(h, w)
    cache = RenderCache(cloud, camera, proj, bins, normals, rgb, alpha, [o[-1] for o in outs]) if keep_cache else None
    return RenderResult(rgb, alpha, depth, normal, cache, wsum, tfin)


def brute_force_render(cloud: GaussianCloud, camera: Camera) -> RenderResult:
    """Reference renderer: every Gaussian at every pixel, composited sequentially."""
    cloud.check_finite()
    H, W = camera.height, camera.width
    proj = project_cloud(cloud, camera)
    normals = _cloud_normals(cloud)
    py, px = np.mgrid[0:H, 0:W]
    px, py = px.ravel().astype(np.float64), py.ravel().astype(np.float64)
    T = np.ones(H * W)
    rgb = np.zeros((H * W, 3))
    depth = np.zeros(H * W)
    normal = np.zeros((H * W, 3))
    wsum = np.zeros(H * W)
    z = proj.cam_points[:, 2]
    for i in depth_order(z, np.flatnonzero(proj.valid)):
        w = _splat_weights(px, py, proj.u[i : i + 1], proj.v[i : i + 1], proj.sx[i : i + 1], proj.sy[i : i + 1])[0][0]
        live = T >= MIN_TRANSMITTANCE
        a = np.where(live, w * T, 0.0)
        rgb += a[:, None] * cloud.colors[i]
        depth += a * z[i]
        normal += a[:, None] * normals[i]
        wsum += a
        T = np.where(live, T * (1.0 - w), T)
    return RenderResult(
        rgb.reshape(H, W, 3),
        (1.0 - T).reshape(H, W),
        depth.reshape(H, W),
        normal.reshape(H, W, 3),
        None,
        wsum.reshape(H, W),
        T.reshape(H, W),
    )


@dataclass
class CloudGradients:
    positions: np.ndarray
    log_scales: np.ndarray
    colors: np.ndarray


def _backward_tile(tile, ids, proj: Projection, colors, d_rgb, d_alpha, state=None):
    y0, y1, x0, x1 = tile
    K = len(ids)
    if K == 0:
        return ids, np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0)
    py, px = np.mgrid[y0:y1, x0:x1]
    px, py = px.ravel().astype(np.float64), py.ravel().astype(np.float64)
    P = len(px)
    dC = d_rgb[y0:y1, x0:x1].reshape(P, 3)
    dA = d_alpha[y0:y1, x0:x1].reshape(P)
    sx, sy = proj.sx[ids], proj.sy[ids]
    dx = px[None, :] - proj.u[ids][:, None]
    dy = py[None, :] - proj.v[ids][:, None]
    if state is None:
        w, _, _, _, _ = _splat_weights(px, py, proj.u[ids], proj.v[ids], sx, sy)
        t_after = np.cumprod(1.0 - w, axis=0)
        t_before = np.vstack([np.ones((1, P)), t_after[:-1]])
        inc = t_before >= MIN_TRANSMITTANCE
        n_inc = inc.sum(axis=0)
        t_final = np.where(n_inc > 0, t_after[np.maximum(n_inc - 1, 0), np.arange(P)], 1.0)
    else:
        w, t_before, inc, t_final = state
    one_minus = 1.0 - w
    a = np.where(inc, w * t_before, 0.0)

    c = colors[ids]
    d_colors = a @ dC
    cd = c @ dC.T  # K×P
    contrib = a * cd
    behind = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib  # Σ_{i>k}
    behind -= dA[None, :] * t_final[None, :]
    behind /= one_minus
    dw = t_before * cd
    dw -= behind
    # unclamped, inside the cutoff: w = g > 0 and d w / d q = −g/2
    live = inc & (w > 0.0) & (w < MAX_WEIGHT)
    dq = np.where(live, dw * (-0.5 * w), 0.0)
    dqx = dq * dx
    dqy = dq * dy
    du = -2.0 * dqx.sum(axis=1) / sx**2
    dv = -2.0 * dqy.sum(axis=1) / sy**2
    dsx = -2.0 * np.einsum("kp,kp->k", dqx, dx) / sx**3
    dsy = -2.0 * np.einsum("kp,kp->k", dqy, dy) / sy**3
    return ids, d_colors, du, dv, dsx, dsy


def render_gaussians_backward(cache: RenderCache, d_rgb: np.ndarray, d_alpha: np.ndarray | None = None, workers: int = 1) -> CloudGradients:
    """Reverse of the compositing sum; the depth order is held fixed."""
    cam, proj = cache.camera, cache.proj
    H, W = cam.height, cam.width
    if d_rgb.shape != (H, W, 3) or cache.rgb.shape != (H, W, 3):
        raise ValueError(f"stale render cache: gradient {d_rgb.shape} vs image {cache.rgb.shape}")
    if d_alpha is None:
        d_alpha = np.zeros((H, W))
    N = len(cache.cloud)
    outs = _map(
        lambda tile, ids, state: _backward_tile(tile, ids, proj, cache.cloud.colors, d_rgb, d_alpha, state),
        list(zip(cache.bins.tiles, cache.bins.members, cache.tile_state or [None] * len(cache.bins.tiles))),
        workers,
    )
    d_colors = np.zeros((N, 3))
    du, dv, dsx, dsy = (np.zeros(N) for _ in range(4))
    for ids, dc, a, b, c, d in outs:  # fixed tile order
        d_colors[ids] += dc
        du[ids] += a
        dv[ids] += b
        dsx[ids] += c
        dsy[ids] += d
    pc = proj.cam_points
    z = np.where(proj.valid, pc[:, 2], 1.0)
    fx, fy, s = cam.fx, cam.fy, proj.scale
    d_log = (dsx * fx / z + dsy * fy / z) * s
    d_pc = np.stack(
        [
            du * fx / z,
            dv * fy / z,
            -(du * fx * pc[:, 0] + dv * fy * pc[:, 1] + (dsx * fx + dsy * fy) * s) / z**2,
        ],
        axis=1,
    )
    d_pc[~proj.valid] = 0.0
    d_log[~proj.valid] = 0.0
    return CloudGradients(d_pc @ cam.rotation, d_log, d_colors)


# --- mesh rasterizer -----------------------------------------------------------


def _edge(ax, ay, bx, by, cx, cy):
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)


def rasterize_triangles(
    tri: np.ndarray, width: int, height: int, depth: np.ndarray | None = None, live: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Cover integer pixel centers with 2D triangles (F×3×2).

    Returns per-pixel face id (H·W, -1 where empty) and screen-space
    barycentrics (H·W×3). With ``depth`` (F×3) the nearest face wins,
    ties going to the lower face id; otherwise the lower face id wins.
    """
    F = len(tri)
    fid_out = np.full(height * width, -1, dtype=np.int64)
    bary_out = np.zeros((height * width, 3))
    if F == 0:
        return fid_out, bary_out
    area = _edge(tri[:, 0, 0], tri[:, 0, 1], tri[:, 1, 0], tri[:, 1, 1], tri[:, 2, 0], tri[:, 2, 1])
    with np.errstate(invalid="ignore"):
        x0 = np.maximum(np.ceil(tri[:, :, 0].min(axis=1)), 0)
        x1 = np.minimum(np.floor(tri[:, :, 0].max(axis=1)), width - 1)
        y0 = np.maximum(np.ceil(tri[:, :, 1].min(axis=1)), 0)
        y1 = np.minimum(np.floor(tri[:, :, 1].max(axis=1)), height - 1)
    ok = (np.abs(area) > 1e-12) & (x1 >= x0) & (y1 >= y0) & np.isfinite(area)
    if live is not None:
        ok &= live
    f_idx = np.flatnonzero(ok)
    x0, x1, y0, y1 = (a[f_idx].astype(np.int64) for a in (x0, x1, y0, y1))
    nx, ny = x1 - x0 + 1, y1 - y0 + 1
    counts = nx * ny
    pf = np.repeat(f_idx, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = (np.repeat(x0, counts) + local % np.repeat(nx, counts)).astype(np.float64)
    py = (np.repeat(y0, counts) + local // np.repeat(nx, counts)).astype(np.float64)
    t = tri[pf]
    b0 = _edge(px, py, t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1]) / area[pf]
    b1 = _edge(t[:, 0, 0], t[:, 0, 1], px, py, t[:, 2, 0], t[:, 2, 1]) / area[pf]
    b2 = 1.0 - b0 - b1
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    pf, px, py = pf[inside], px[inside], py[inside]
    bary = np.stack([b0[inside], b1[inside], b2[inside]], axis=1)
    pix = py.astype(np.int64) * width + px.astype(np.int64)
    key = (bary * depth[pf]).sum(axis=1) if depth is not None else np.zeros(len(pf))
    order = np.lexsort((pf, key, pix))
    pix, pf, bary = pix[order], pf[order], bary[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    fid_out[pix[first]] = pf[first]
    bary_out[pix[first]] = bary[first]
    return fid_out, bary_out


def sample_texture(texture: np.ndarray, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup at texel (u·(W−1), v·(H−1)), clamped to the edges.

    Returns colors (M×C) and the Jacobian d color / d uv (M×C×2).
    """
    texture = np.asarray(texture, dtype=np.float64)
    if texture.ndim == 2:
        texture = texture[:, :, None]
    Ht, Wt = texture.shape[:2]
    x = np.clip(uv[:, 0], 0.0, 1.0) * (Wt - 1)
    y = np.clip(uv[:, 1], 0.0, 1.0) * (Ht - 1)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(Wt - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(Ht - 2, 0))
    x1, y1 = np.minimum(x0 + 1, Wt - 1), np.minimum(y0 + 1, Ht - 1)
    fx, fy = (x - x0)[:, None], (y - y0)[:, None]
    c00, c01 = texture[y0, x0], texture[y0, x1]
    c10, c11 = texture[y1, x0], texture[y1, x1]
    col = (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)
    d_dx = ((1 - fy) * (c01 - c00) + fy * (c11 - c10)) * (Wt - 1)
    d_dy = ((1 - fx) * (c10 - c00) + fx * (c11 - c01)) * (Ht - 1)
    inside_u = ((uv[:, 0] > 0) & (uv[:, 0] < 1))[:, None]
    inside_v = ((uv[:, 1] > 0) & (uv[:, 1] < 1))[:, None]
    return col, np.stack([d_dx * inside_u, d_dy * inside_v], axis=2)


@dataclass
class MeshRender:
    rgb: np.ndarray  # H×W×3
    mask: np.ndarray  # H×W bool
    face_id: np.ndarray  # H×W, -1 where empty
    bary: np.ndarray  # H×W×3
    uv: np.ndarray  # H×W×2
    screen: np.ndarray  # V×2 projected vertices


def _screen(vertices: np.ndarray, camera: Camera) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pc = camera.to_camera(np.asarray(vertices, dtype=np.float64))
    z = pc[:, 2]
    ok = z > NEAR_PLANE
    zs = np.where(ok, z, 1.0)
    scr = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    return scr, z, ok


def render_mesh(vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray, texture: np.ndarray, camera: Camera) -> MeshRender:
    """Hard z-buffered rasterization; color is the bilinear texture sample at the interpolated UV."""
    H, W = camera.height, camera.width
    faces = np.asarray(faces, dtype=np.int64)
    scr, z, ok = _screen(vertices, camera)
    fid, bary = rasterize_triangles(scr[faces], W, H, depth=z[faces], live=ok[faces].all(axis=1))
    mask = fid >= 0
    uv_pix = np.zeros((H * W, 2))
    rgb = np.zeros((H * W, 3))
    if mask.any():
        uv_pix[mask] = np.einsum("mk,mkc->mc", bary[mask], np.asarray(uv)[faces[fid[mask]]])
        rgb[mask] = sample_texture(texture, uv_pix[mask])[0]
    return MeshRender(
        rgb.reshape(H, W, 3), mask.reshape(H, W), fid.reshape(H, W), bary.reshape(H, W, 3), uv_pix.reshape(H, W, 2), scr
    )


def render_mesh_backward(
    vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray, texture: np.ndarray, camera: Camera, result: MeshRender, d_rgb: np.ndarray
) -> np.ndarray:
    """Vertex gradients through texture sampling, barycentrics and projection; coverage is held fixed."""
    faces = np.asarray(faces, dtype=np.int64)
    uv = np.asarray(uv, dtype=np.float64)
    mask = result.mask.ravel()
    d_vertices = np.zeros((len(vertices), 3))
    if not mask.any():
        return d_vertices
    H, W = camera.height, camera.width
    pix = np.flatnonzero(mask)
    fid = result.face_id.ravel()[pix]
    f = faces[fid]
    _, jac = sample_texture(texture, result.uv.reshape(-1, 2)[pix])
    g_uv = np.einsum("mc,mcd->md", d_rgb.reshape(-1, 3)[pix], jac)
    g_b = np.einsum("md,mkd->mk", g_uv, uv[f])
    g0 = g_b[:, 0] - g_b[:, 2]
    g1 = g_b[:, 1] - g_b[:, 2]

    t = result.screen[f]  # M×3×2
    ax, ay, bx, by, cx, cy = t[:, 0, 0], t[:, 0, 1], t[:, 1, 0], t[:, 1, 1], t[:, 2, 0], t[:, 2, 1]
    px = (pix % W).astype(np.float64)
    py = (pix // W).astype(np.float64)
    area = _edge(ax, ay, bx, by, cx, cy)
    b0 = _edge(px, py, bx, by, cx, cy) / area
    b1 = _edge(ax, ay, px, py, cx, cy) / area
    # d(area)/d(corner k) = (next.y − prev.y, prev.x − next.x)
    d_area = np.stack([np.stack([by - cy, cx - bx], 1), np.stack([cy - ay, ax - cx], 1), np.stack([ay - by, bx - ax], 1)], 1)
    d_n0 = np.zeros_like(t)
    d_n0[:, 1] = np.stack([cy - py, px - cx], 1)
    d_n0[:, 2] = np.stack([py - by, bx - px], 1)
    d_n1 = np.zeros_like(t)
    d_n1[:, 0] = np.stack([py - cy, cx - px], 1)
    d_n1[:, 2] = np.stack([ay - py, px - ax], 1)
    d_b0 = (d_n0 - b0[:, None, None] * d_area) / area[:, None, None]
    d_b1 = (d_n1 - b1[:, None, None] * d_area) / area[:, None, None]
    d_screen_corner = g0[:, None, None] * d_b0 + g1[:, None, None] * d_b1
    d_screen = np.zeros((len(vertices), 2))
    np.add.at(d_screen, f.ravel(), d_screen_corner.reshape(-1, 2))
    touched = np.unique(f)
    d_vertices[touched] = project_points_backward(np.asarray(vertices)[touched], camera, d_screen[touched])
    return d_vertices
