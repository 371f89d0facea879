"""Topology utilities on the shared triangle connectivity."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .camera import Camera
from .model import BODY, FACE, LEFT_HAND, RIGHT_HAND

# midpoint label priority: face > hands > body
_LABEL_RANK = np.zeros(4, dtype=np.int64)
_LABEL_RANK[[BODY, LEFT_HAND, RIGHT_HAND, FACE]] = [0, 1, 1, 2]


class NonManifoldError(ValueError):
    pass


def unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sorted unique undirected edges (E×2, i<j) and, per face corner-edge, its edge id (F×3).

    Corner-edge k of a face joins corners k and (k+1) % 3.
    """
    faces = np.asarray(faces, dtype=np.int64)
    pairs = np.stack([faces, np.roll(faces, -1, axis=1)], axis=2).reshape(-1, 2)
    pairs.sort(axis=1)
    edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
    if len(counts) and counts.max() > 2:
        e = edges[np.argmax(counts)]
        raise NonManifoldError(f"edge ({e[0]}, {e[1]}) is shared by {counts.max()} faces")
    return edges, inverse.reshape(-1, 3)


@dataclass
class Subdivision:
    """One level of midpoint subdivision, reusable for any per-vertex asset."""

    n_vertices: int
    edges: np.ndarray
    faces: np.ndarray  # subdivided faces

    @classmethod
    def build(cls, faces: np.ndarray, n_vertices: int) -> "Subdivision":
        faces = np.asarray(faces, dtype=np.int64)
        edges, edge_of = unique_edges(faces)
        mid = n_vertices + edge_of  # F×3, midpoint of corner-edge k
        a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
        ab, bc, ca = mid[:, 0], mid[:, 1], mid[:, 2]
        new_faces = np.concatenate(
            [np.stack(t, axis=1) for t in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))],
            axis=0,
        )
        # keep the four children of each face adjacent
        F = len(faces)
        new_faces = new_faces.reshape(4, F, 3).transpose(1, 0, 2).reshape(-1, 3)
        return cls(n_vertices, edges, new_faces)

    @property
    def n_out(self) -> int:
        return self.n_vertices + len(self.edges)

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """V'×V averaging operator: identity rows then 0.5/0.5 edge rows."""
        V, E = self.n_vertices, len(self.edges)
        rows = np.concatenate([np.arange(V), np.repeat(np.arange(V, V + E), 2)])
        cols = np.concatenate([np.arange(V), self.edges.ravel()])
        vals = np.concatenate([np.ones(V), np.full(2 * E, 0.5)])
        return sparse.csr_matrix((vals, (rows, cols)), shape=(V + E, V))

    def upsample(self, asset: np.ndarray) -> np.ndarray:
        asset = np.asarray(asset)
        if asset.shape[0] != self.n_vertices:
            raise ValueError(f"asset has leading dimension {asset.shape[0]}, expected {self.n_vertices}")
        if asset.dtype.kind in "iub":
            return self.upsample_labels(asset)
        mids = 0.5 * (asset[self.edges[:, 0]] + asset[self.edges[:, 1]])
        return np.concatenate([asset, mids], axis=0)

    def upsample_labels(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        la, lb = labels[self.edges[:, 0]], labels[self.edges[:, 1]]
        ra, rb = _LABEL_RANK[la], _LABEL_RANK[lb]
        mids = np.where((ra > rb) | ((ra == rb) & (la >= lb)), la, lb)
        return np.concatenate([labels, mids.astype(labels.dtype)])

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        return self.matrix.T @ d_out


def subdivide(vertices: np.ndarray, faces: np.ndarray, assets=()) -> tuple[np.ndarray, np.ndarray, list]:
    """Midpoint subdivision: one new vertex per unique edge, every triangle split in four.

    Float assets are averaged at edge midpoints exactly like the positions;
    integer assets are treated as part labels and use the donor rule.
    """
    sub = Subdivision.build(faces, len(vertices))
    return sub.upsample(np.asarray(vertices, dtype=np.float64)), sub.faces, [sub.upsample(a) for a in assets]


# --- Laplacian ---------------------------------------------------------------


def adjacency(faces: np.ndarray, n_vertices: int) -> sparse.csr_matrix:
    edges, _ = unique_edges(faces)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    return sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n_vertices, n_vertices))


def laplacian_operator(faces: np.ndarray, n_vertices: int) -> sparse.csr_matrix:
    """Uniform umbrella operator L = I - D^-1 A; isolated vertices map to zero."""
    adj = adjacency(faces, n_vertices)
    deg = np.asarray(adj.sum(axis=1)).ravel()
    referenced = deg > 0
    inv = np.where(referenced, 1.0 / np.maximum(deg, 1), 0.0)
    return (sparse.diags(referenced.astype(np.float64)) - sparse.diags(inv) @ adj).tocsr()


def laplacian(field: np.ndarray, faces: np.ndarray) -> np.ndarray:
    field = np.asarray(field, dtype=np.float64)
    return laplacian_operator(faces, len(field)) @ field


# --- normals -----------------------------------------------------------------


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Un-normalized (area-weighted) face normals."""
    v = vertices[faces]
    return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit vertex normals and a validity mask (False where incident normals cancel)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    fn = face_normals(vertices, faces)
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    valid = norm > 1e-20
    out = np.zeros_like(acc)
    out[valid] = acc[valid] / norm[valid, None]
    return out, valid


def mean_edge_length(vertices: np.ndarray, faces: np.ndarray) -> float:
    edges, _ = unique_edges(faces)
    return float(np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1).mean())


# --- skinning transfer -------------------------------------------------------


def transfer_skinning(
    upsampled_vertices: np.ndarray,
    part_labels: np.ndarray,
    base_vertices: np.ndarray,
    base_weights: np.ndarray,
    upsampled_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Body vertices copy the weights of their nearest base vertex; hands and face keep interpolated weights.

    ``upsampled_weights`` are the subdivision-interpolated weights; when
    omitted, every vertex takes its nearest base vertex's weights.
    """
    _, nearest = cKDTree(base_vertices).query(upsampled_vertices, k=1)
    out = np.asarray(base_weights, dtype=np.float64)[nearest]
    if upsampled_weights is not None:
        keep = np.asarray(part_labels) != BODY
        out[keep] = upsampled_weights[keep]
    return out / out.sum(axis=1, keepdims=True)


# --- face visibility ---------------------------------------------------------

COS_135 = np.cos(np.deg2rad(135.0))


def face_visibility(vertices: np.ndarray, camera: Camera, face_center_idx, eye_mid_idxs) -> bool:
    """Whether the face looks toward the camera, judged in the camera xz-plane.

    The face-center → eye-midpoint direction must oppose the camera → face-center
    direction by more than 135 degrees (strict).
    """
    dot = facing_dot(vertices, camera, face_center_idx, eye_mid_idxs)
    return dot is not None and bool(dot < COS_135)


def facing_dot(vertices, camera: Camera, face_center_idx, eye_mid_idxs) -> float | None:
    """Cosine between the xz face direction and the xz viewing ray; None when degenerate."""
    pc = camera.to_camera(np.asarray(vertices, dtype=np.float64))
    center = pc[np.atleast_1d(face_center_idx)].mean(axis=0)[[0, 2]]
    eyes = pc[np.atleast_1d(eye_mid_idxs)].mean(axis=0)[[0, 2]]
    u = eyes - center
    nu, nw = np.linalg.norm(u), np.linalg.norm(center)
    if nu < 1e-12 or nw < 1e-12:
        return None
    return float(np.dot(u / nu, center / nw))
