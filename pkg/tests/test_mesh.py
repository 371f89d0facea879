import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial import Delaunay

from conftest import brute_laplacian, random_mesh, smplx_sized_mesh
from gsavatar.camera import Camera
from gsavatar.mesh import (
    COS_135,
    NonManifoldError,
    Subdivision,
    face_visibility,
    facing_dot,
    laplacian,
    subdivide,
    transfer_skinning,
    unique_edges,
    vertex_normals,
)
from gsavatar.model import BODY, FACE, LEFT_HAND


# --- subdivision ----------------------------------------------------------------------


def test_single_triangle_splits_in_four():
    v, f, _ = subdivide(np.eye(3), np.array([[0, 1, 2]]))
    assert v.shape == (6, 3) and f.shape == (4, 3)


def test_template_sized_mesh_counts():
    v, f = smplx_sized_mesh()
    assert (len(v), len(f)) == (10475, 20908)
    for _ in range(2):
        v, f, _ = subdivide(v, f)
    assert len(f) == 334_528
    assert len(v) == 167_285


def test_new_vertices_are_edge_midpoints():
    v, f = random_mesh(30, 0)
    out, _, (asset,) = subdivide(v, f, [v.copy()])
    edges, _ = unique_edges(f)
    np.testing.assert_array_equal(out[len(v) :], 0.5 * (v[edges[:, 0]] + v[edges[:, 1]]))
    np.testing.assert_array_equal(asset, out)


@settings(max_examples=20, deadline=None)
@given(st.integers(6, 40), st.integers(0, 10_000))
def test_subdivision_counts_follow_euler(n, seed):
    v, f = random_mesh(n, seed)
    E = len(unique_edges(f)[0])
    v2, f2, _ = subdivide(v, f)
    assert len(v2) == len(v) + E and len(f2) == 4 * len(f)
    assert len(unique_edges(f2)[0]) == 2 * E + 3 * len(f)


def test_labels_prefer_face_then_hands():
    sub = Subdivision.build(np.array([[0, 1, 2]]), 3)
    out = sub.upsample(np.array([BODY, FACE, LEFT_HAND]))
    mids = dict(zip(map(tuple, sub.edges), out[3:]))
    assert mids[(0, 1)] == FACE and mids[(1, 2)] == FACE and mids[(0, 2)] == LEFT_HAND


def test_subdivision_backward_is_the_transpose():
    v, f = random_mesh(15, 3)
    sub = Subdivision.build(f, len(v))
    g = np.random.default_rng(0).normal(size=(sub.n_out, 3))
    x = np.random.default_rng(1).normal(size=(len(v), 3))
    assert (g * sub.upsample(x)).sum() == pytest.approx((sub.backward(g) * x).sum(), rel=1e-12)


def test_non_manifold_edge_is_rejected():
    with pytest.raises(NonManifoldError):
        unique_edges(np.array([[0, 1, 2], [1, 0, 3], [0, 1, 4]]))


# --- Laplacian --------------------------------------------------------------------------


def test_centroid_of_symmetric_ring_is_zero():
    ang = np.linspace(0, 2 * np.pi, 7)[:-1]
    v = np.vstack([[0.0, 0, 0], np.column_stack([np.cos(ang), np.sin(ang), np.zeros(6)])])
    f = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    np.testing.assert_allclose(laplacian(v, f)[0], 0.0, atol=1e-15)


@settings(max_examples=20)
@given(arrays(np.float64, 3, elements=st.floats(-100, 100)))
def test_laplacian_ignores_translation(t):
    v, f = random_mesh(20, 5)
    np.testing.assert_allclose(laplacian(v + t, f), laplacian(v, f), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_laplacian_matches_neighbor_averaging(seed):
    v, f = random_mesh(20, seed)
    np.testing.assert_allclose(laplacian(v, f), brute_laplacian(v, f), atol=1e-6)


# --- normals ------------------------------------------------------------------------------


def test_flat_square_normals():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]])
    n, ok = vertex_normals(v, np.array([[0, 1, 2], [0, 2, 3]]))
    assert ok.all()
    np.testing.assert_allclose(np.abs(n), np.tile([0.0, 0.0, 1.0], (4, 1)), atol=1e-15)


def test_cube_corner_normal():
    # three unit squares meeting at the origin corner, outward normals -x, -y, -z
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1]])
    f = np.array([[0, 2, 1], [1, 2, 4], [0, 1, 3], [1, 6, 3], [0, 3, 2], [2, 3, 5]])
    n, _ = vertex_normals(v, f)
    np.testing.assert_allclose(n[0], -np.ones(3) / np.sqrt(3), atol=1e-12)


def test_degenerate_triangle_keeps_normals_finite():
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [2, 0, 0]])
    n, _ = vertex_normals(v, np.array([[0, 1, 2], [0, 1, 3]]))
    assert np.isfinite(n).all()


# --- skinning transfer ----------------------------------------------------------------------


def test_transfer_skinning_rules(rng):
    base = rng.normal(size=(12, 3))
    faces = Delaunay(base[:, :2]).simplices
    w = rng.dirichlet(np.ones(4), size=12)
    labels = np.full(12, BODY)
    labels[:4] = FACE
    sub = Subdivision.build(faces, 12)
    up_v = sub.upsample(base)
    up_labels = sub.upsample_labels(labels)
    out = transfer_skinning(up_v, up_labels, base, w, sub.upsample(w))
    np.testing.assert_array_equal(out[:12], w / w.sum(1, keepdims=True))
    for e, (a, b) in enumerate(sub.edges):
        k = 12 + e
        if up_labels[k] == FACE:
            np.testing.assert_allclose(out[k], 0.5 * (w[a] + w[b]), atol=1e-12)
        else:
            nearest = np.argmin(((base - up_v[k]) ** 2).sum(1))
            np.testing.assert_allclose(out[k], w[nearest], atol=1e-12)


# --- face visibility ----------------------------------------------------------------------------


def _face_at(eye_dx: float, eye_dz: float):
    cam = Camera(1.0, 1.0, 0.0, 0.0, 8, 8)
    return np.array([[0.0, 0.0, 1.0], [eye_dx, 0.3, 1.0 + eye_dz]]), cam


def test_facing_camera_is_visible():
    v, cam = _face_at(0.0, -0.1)
    assert facing_dot(v, cam, [0], [1]) == pytest.approx(-1.0)
    assert face_visibility(v, cam, [0], [1])


def test_facing_away_is_hidden():
    v, cam = _face_at(0.0, 0.1)
    assert facing_dot(v, cam, [0], [1]) == pytest.approx(1.0)
    assert not face_visibility(v, cam, [0], [1])


def test_exactly_135_degrees_is_hidden():
    v, cam = _face_at(1.0, -1.0)
    assert facing_dot(v, cam, [0], [1]) == COS_135
    assert not face_visibility(v, cam, [0], [1])
    v2, _ = _face_at(0.99, -1.0)
    assert face_visibility(v2, cam, [0], [1])
