import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from duplexfit.geom import (Bvh, SelfIntersectionWarning, SurfaceHit, TriMesh, barycentric_of_point,
                            barycentric_transport, extrude_shell, grid_plane, icosphere, ray_mesh_intersect,
                            read_obj, unit_cube, vertex_normals, write_obj)


def brute_force(mesh, o, d):
    """Independent all-face Möller–Trumbore oracle (vectorised numpy)."""
    tri = mesh.vertices[mesh.faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(d, e2)
    det = (e1 * p).sum(1)
    ok = np.abs(det) > 1e-300
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - tri[:, 0]
    u = (s * p).sum(1) * inv
    q = np.cross(s, e1)
    v = (q @ d) * inv
    t = (e2 * q).sum(1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0)
    idx = np.flatnonzero(hit)
    order = np.lexsort((idx, t[idx]))
    return idx[order], t[idx][order]


def random_soup(rng, n_faces=200):
    v = rng.uniform(-1, 1, (3 * n_faces, 3))
    return TriMesh(v, np.arange(3 * n_faces).reshape(-1, 3))


# -- vertex normals ----------------------------------------------------------

def test_cube_corner_normals():
    m = unit_cube()
    n = vertex_normals(m)[:8]
    assert np.allclose(n, m.vertices[:8] / np.sqrt(3), atol=1e-12)


def test_single_triangle_normal():
    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    assert np.allclose(vertex_normals(m), [[0, 0, 1]] * 3)


def area_weighted_oracle(mesh):
    out = np.zeros_like(mesh.vertices)
    for f in mesh.faces:
        a, b, c = mesh.vertices[f]
        out[f] += 0.5 * np.cross(b - a, c - a)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def test_icosphere_normals_radial():
    m = icosphere(1.0, 2)
    n = vertex_normals(m)
    assert np.allclose(n, area_weighted_oracle(m), atol=1e-12)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    ang = np.arccos(np.clip((n * radial).sum(1), -1, 1))
    # area weighting on a level-2 icosphere deviates up to ~0.0236 rad from radial
    assert ang.max() < 2.5e-2
    assert np.allclose(np.linalg.norm(n, axis=1), 1.0)


def test_isolated_vertex_flagged():
    m = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5.0]]), np.array([[0, 1, 2]]))
    with pytest.warns(UserWarning):
        n, flags = vertex_normals(m, return_flags=True)
    assert flags.tolist() == [False, False, False, True]
    assert np.isclose(np.linalg.norm(n[3]), 1.0)


# -- shell extrusion ---------------------------------------------------------

def test_icosphere_shell_radii():
    m = icosphere(1.0, 2)
    outer, inner = extrude_shell(m, vertex_normals(m), 0.1)
    assert np.allclose(np.linalg.norm(outer.vertices, axis=1), 1.1, atol=1e-2)
    assert np.allclose(np.linalg.norm(inner.vertices, axis=1), 0.9, atol=1e-2)
    assert np.array_equal(outer.faces, m.faces) and np.array_equal(inner.faces, m.faces)


def test_shell_vanishing_epsilon():
    m = icosphere(1.0, 1)
    outer, inner = extrude_shell(m, vertex_normals(m), 1e-12)
    assert np.allclose(outer.vertices, m.vertices, atol=1e-9)
    assert np.allclose(inner.vertices, m.vertices, atol=1e-9)


def test_plane_shell():
    m = grid_plane(1.0, 2)
    outer, inner = extrude_shell(m, vertex_normals(m), 0.5)
    assert np.allclose(outer.vertices[:, 2], 0.5)
    assert np.allclose(inner.vertices[:, 2], -0.5)


def test_inverted_inner_shell_warns():
    sph = icosphere(1.0, 2)
    m = TriMesh(sph.vertices * [3.0, 0.2, 0.2], sph.faces)
    with pytest.warns(SelfIntersectionWarning):
        extrude_shell(m, vertex_normals(m), 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        extrude_shell(sph, vertex_normals(sph), 0.1)


def test_epsilon_must_be_positive():
    m = icosphere(1.0, 0)
    with pytest.raises(ValueError):
        extrude_shell(m, vertex_normals(m), 0.0)


# -- intersection ------------------------------------------------------------

def test_single_triangle_hit():
    m = TriMesh(np.array([[-1, -1, 0], [1, -1, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    hits = ray_mesh_intersect(Bvh(m), m, [0, 0, -5], [0, 0, 1])
    assert len(hits) == 1
    assert hits[0].ray_parameter == pytest.approx(5.0, abs=1e-12)
    expected = barycentric_of_point([0, 0, 0], m.vertices)
    assert np.allclose(hits[0].barycentric, expected, atol=1e-12)
    assert np.allclose(expected, [0.25, 0.25, 0.5])


def test_parallel_ray_misses():
    m = TriMesh(np.array([[-1, -1, 0], [1, -1, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    assert ray_mesh_intersect(Bvh(m), m, [0, 0, 1], [1, 0, 0]) == []


def test_icosphere_two_hits():
    m = icosphere(1.0, 2)
    hits = ray_mesh_intersect(Bvh(m), m, [0.01, 0.02, -5], [0, 0, 1], mode="all_sorted")
    assert len(hits) == 2
    assert hits[1].ray_parameter - hits[0].ray_parameter == pytest.approx(2.0, abs=1e-2)
    assert len(ray_mesh_intersect(Bvh(m), m, [0.01, 0.02, -5], [0, 0, 1])) == 1


def test_zero_direction_rejected():
    m = icosphere(1.0, 0)
    with pytest.raises(ValueError):
        ray_mesh_intersect(Bvh(m), m, [0, 0, 0], [0, 0, 0])


def test_bvh_matches_brute_force_random_rays():
    rng = np.random.default_rng(7)
    m = random_soup(rng)
    bvh = Bvh(m)
    n_agree = 0
    for _ in range(1000):
        o = rng.uniform(-2, 2, 3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        hits = ray_mesh_intersect(bvh, m, o, d, mode="all_sorted")
        f_ref, t_ref = brute_force(m, o, d)
        got_f = np.array([h.face_index for h in hits], dtype=np.int64)
        got_t = np.array([h.ray_parameter for h in hits])
        if np.array_equal(got_f, f_ref) and np.allclose(got_t, t_ref, atol=1e-9, rtol=0):
            n_agree += 1
    assert n_agree == 1000


def test_bvh_leaves_partition_faces():
    rng = np.random.default_rng(3)
    m = random_soup(rng, 97)
    bvh = Bvh(m)
    allf = np.concatenate(bvh.leaves())
    assert np.array_equal(np.sort(allf), np.arange(m.n_faces))


def test_bvh_parent_boxes_contain_children():
    bvh = Bvh(icosphere(1.0, 2))
    for i in range(len(bvh.left)):
        for c in (bvh.left[i], bvh.right[i]):
            if c >= 0:
                assert np.all(bvh.node_lo[i] <= bvh.node_lo[c]) and np.all(bvh.node_hi[i] >= bvh.node_hi[c])


def test_batched_trace_k_sorted():
    m = icosphere(1.0, 2)
    rng = np.random.default_rng(0)
    o = rng.uniform(-3, 3, (64, 3))
    d = -o / np.linalg.norm(o, axis=1, keepdims=True)
    f, t, b = Bvh(m).trace(o, d, k=2)
    assert np.all(f >= 0)
    assert np.all(t[:, 0] <= t[:, 1])
    assert np.allclose(b.sum(-1), 1.0)


# -- transport ---------------------------------------------------------------

def test_transport_vertex_and_centroid():
    faces = np.array([[0, 1, 2]])
    tgt = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0.0]])
    assert np.allclose(barycentric_transport(SurfaceHit(0, np.array([1.0, 0, 0]), 1.0), tgt, faces), tgt[0])
    assert np.allclose(barycentric_transport(SurfaceHit(0, np.full(3, 1 / 3), 1.0), tgt, faces), [1, 1, 0])


def test_transport_topology_mismatch():
    m = icosphere(1.0, 0)
    with pytest.raises(IndexError):
        barycentric_transport(SurfaceHit(m.n_faces + 3, np.full(3, 1 / 3), 1.0), m)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.0, 0.9), st.floats(0.0, 2 * np.pi))
def test_transport_identity_roundtrip(r, phi):
    m = icosphere(1.0, 2)
    o = np.array([r * np.cos(phi), r * np.sin(phi), -5.0])
    hits = ray_mesh_intersect(Bvh(m), m, o, [0, 0, 1])
    assert hits
    p = o + hits[0].ray_parameter * np.array([0, 0, 1.0])
    q = barycentric_transport(hits[0], m)
    assert np.allclose(p, q, atol=1e-9)
    b = barycentric_of_point(q, m.vertices[m.faces[hits[0].face_index]])
    assert np.allclose(b, hits[0].barycentric, atol=1e-9)


# -- mesh validation / IO ----------------------------------------------------

def test_trimesh_rejects_bad_input():
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))
    with pytest.raises(ValueError):
        TriMesh(np.zeros((3, 3)), np.array([[0, 1, 1]]))
    with pytest.raises(ValueError):
        TriMesh(np.zeros((2, 3)), np.zeros((0, 3), int))


def test_obj_roundtrip(tmp_path):
    m = icosphere(1.0, 1)
    write_obj(tmp_path / "m.obj", m)
    r = read_obj(tmp_path / "m.obj")
    assert np.array_equal(r.faces, m.faces)
    assert np.array_equal(r.vertices, m.vertices)
