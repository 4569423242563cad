import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from duplexfit.camera import Rigid3, random_rotation, so3_exp
from duplexfit.diff import ParamVector, finite_diff_check
from duplexfit.geom import TriMesh
from duplexfit.template import (ConfigError, DimensionMismatch, PoseParams, ShapeParams, SkinnedTemplate,
                                build_synthetic_quadruped, embedding_nn, lbs_deform, load_template,
                                regress_joints, save_template, shaped_vertices)


def toy_chain():
    """Two joints: root at the origin, elbow at (1,0,0); binary skin weights."""
    V = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [2, 1, 0], [0, 1, 0.0]])
    F = np.array([[0, 1, 4], [1, 2, 3]])
    W = np.array([[1, 0], [0, 1], [0, 1], [0, 1], [1, 0.0]])
    reg = np.zeros((2, 5))
    reg[0, 0] = reg[1, 1] = 1.0
    basis = np.zeros((1, 5, 3))
    basis[0, :, 0] = 1.0
    return SkinnedTemplate(TriMesh(V, F), basis, np.array([-1, 0]), W, reg, V[:, :2].copy(), reg.copy(),
                           joint_names=["root", "elbow"], keypoint_names=["root", "elbow"])


def pose(R=None, t=None, angles=None, J=2):
    return PoseParams(torch.as_tensor(np.eye(3) if R is None else R),
                      torch.as_tensor(np.zeros(3) if t is None else t, dtype=torch.float64),
                      torch.as_tensor(np.zeros((J - 1, 3)) if angles is None else angles, dtype=torch.float64))


def test_identity_pose_returns_rest(tpl):
    V = lbs_deform(tpl, np.zeros(tpl.d_beta), pose(J=tpl.n_joints))
    assert torch.equal(V, torch.as_tensor(tpl.rest_mesh.vertices))


def test_root_translation_translates(tpl):
    t = np.array([0.3, -1.2, 2.0])
    V = lbs_deform(tpl, np.zeros(tpl.d_beta), pose(t=t, J=tpl.n_joints)).numpy()
    assert np.allclose(V, tpl.rest_mesh.vertices + t, atol=1e-12)


def test_toy_chain_elbow_bend():
    tpl = toy_chain()
    V = lbs_deform(tpl, np.zeros(1), pose(angles=[[0, 0, np.pi / 2]])).numpy()
    expected = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 1, 0.0]])
    assert np.allclose(V, expected, atol=1e-9)


def test_toy_chain_shape_moves_joints():
    tpl = toy_chain()
    # basis shifts every vertex by +x; joints follow, so the bend pivots about (1.5, 0, 0)
    V = lbs_deform(tpl, np.array([0.5]), pose(angles=[[0, 0, np.pi / 2]])).numpy()
    assert np.allclose(V[2], [1.5, 1.0, 0.0], atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_rigid_root_equals_rigid_motion(tpl, seed):
    rng = np.random.default_rng(seed)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    beta = rng.normal(0, 0.5, tpl.d_beta)
    V = lbs_deform(tpl, beta, pose(R, t, J=tpl.n_joints)).numpy()
    ref = Rigid3(R, t).apply(shaped_vertices(tpl, beta).numpy())
    assert np.abs(V - ref).max() < 1e-9


def test_regress_joints_one_hot_and_ring():
    tpl = toy_chain()
    V = np.random.default_rng(0).normal(size=(5, 3))
    assert np.allclose(regress_joints(tpl, V), V[[0, 1]])
    ring = toy_chain()
    ring.joint_regressor[:] = 0
    ring.joint_regressor[0, [0, 1, 4]] = 1 / 3
    assert np.allclose(regress_joints(ring, V)[0], V[[0, 1, 4]].mean(0))


def test_regress_joints_matches_matrix_product(tpl, rng):
    V = rng.normal(size=(tpl.n_vertices, 3))
    ref = np.einsum("jn,nc->jc", tpl.joint_regressor, V)
    assert np.allclose(regress_joints(tpl, V), ref, atol=1e-12)
    assert np.allclose(regress_joints(tpl, torch.as_tensor(V)).numpy(), ref, atol=1e-12)
    with pytest.raises(DimensionMismatch):
        regress_joints(tpl, V[:-1])


def test_dimension_mismatch(tpl):
    with pytest.raises(DimensionMismatch):
        lbs_deform(tpl, np.zeros(tpl.d_beta + 1), pose(J=tpl.n_joints))
    with pytest.raises(DimensionMismatch):
        lbs_deform(tpl, np.zeros(tpl.d_beta), pose(J=tpl.n_joints + 1))


def test_lbs_gradients_match_finite_differences(tpl):
    rng = np.random.default_rng(5)
    worst = 0.0
    for k in range(20):
        w = rng.normal(size=tpl.n_vertices * 3)
        at = ParamVector({"beta": rng.normal(0, 0.5, tpl.d_beta),
                          "angles": rng.normal(0, 0.3, (tpl.n_joints - 1, 3)),
                          "root_w": rng.normal(0, 0.5, 3), "root_t": rng.normal(0, 0.5, 3)})
        wt = torch.as_tensor(w)

        def objective(b):
            from duplexfit.camera import rodrigues
            th = PoseParams(rodrigues(b["root_w"]), b["root_t"], b["angles"])
            return (lbs_deform(tpl, b["beta"], th).reshape(-1) * wt).sum()

        rep = finite_diff_check(objective, at, h=1e-5, tolerance=1e-5, n_probes=4, seed=k)
        worst = max(worst, rep.worst)
    assert worst < 1e-5


def test_embedding_nn_exact_and_perturbed(tpl):
    E = tpl.embedding_atlas
    idx = np.arange(0, tpl.n_vertices, 7)
    assert np.array_equal(embedding_nn(tpl, E[idx]), idx)
    D = np.linalg.norm(E[:, None] - E[None], axis=-1)
    np.fill_diagonal(D, np.inf)
    gap = D.min()
    assert gap > 0
    rng = np.random.default_rng(0)
    noise = rng.normal(size=(len(idx), E.shape[1]))
    noise *= 0.49 * gap / np.linalg.norm(noise, axis=1, keepdims=True)
    assert np.array_equal(embedding_nn(tpl, E[idx] + noise), idx)
    assert embedding_nn(tpl, E[5]) == 5


def test_embedding_nn_matches_linear_scan(tpl):
    E = tpl.embedding_atlas
    rng = np.random.default_rng(1)
    q = E[rng.integers(0, len(E), 10_000)] + rng.normal(0, 0.05, (10_000, E.shape[1]))
    ref = np.empty(len(q), np.int64)
    for s in range(0, len(q), 500):
        d = ((q[s:s + 500, None, :] - E[None]) ** 2).sum(-1)
        ref[s:s + 500] = d.argmin(1)  # argmin returns the lowest index on ties
    assert np.array_equal(embedding_nn(tpl, q), ref)


def test_embedding_nn_ties_lowest_index():
    tpl = toy_chain()
    tpl.embedding_atlas[:] = [[0, 0], [1, 0], [-1, 0], [0, 5], [0, -5]]
    assert embedding_nn(tpl, np.array([0.0, 0.0])) == 0
    assert embedding_nn(tpl, np.array([0.0, 2.5])) in (0, 3)
    assert embedding_nn(tpl, np.array([0.0, 2.5])) == 0


def test_default_template_invariants(tpl):
    W = tpl.skin_weights
    assert (W >= 0).all() and np.allclose(W.sum(1), 1.0, atol=1e-6)
    p = tpl.parents
    assert p[0] == -1 and all(0 <= p[j] < j for j in range(1, len(p)))
    f = tpl.faces
    assert not np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2]))
    assert tpl.shape_basis.shape[0] == tpl.d_beta >= 3
    assert 12 <= tpl.n_joints <= 20 and 10 <= len(tpl.keypoint_names) <= 18
    assert len(tpl.embedding_atlas) == tpl.n_vertices


def test_template_deterministic():
    a = build_synthetic_quadruped({"grid_spacing": 0.08, "seed": 3})
    b = build_synthetic_quadruped({"grid_spacing": 0.08, "seed": 3})
    for name in ("shape_basis", "skin_weights", "joint_regressor", "embedding_atlas", "keypoint_regressor"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    assert np.array_equal(a.rest_mesh.vertices, b.rest_mesh.vertices)


def test_descriptors_smooth_over_edges(tpl):
    E = tpl.embedding_atlas
    e = tpl.edges()
    adj = np.linalg.norm(E[e[:, 0]] - E[e[:, 1]], axis=1).mean()
    rng = np.random.default_rng(0)
    i, j = rng.integers(0, len(E), (2, 20_000))
    rand = np.linalg.norm(E[i] - E[j], axis=1).mean()
    assert adj < rand


def test_bad_config_rejected():
    with pytest.raises(ConfigError):
        build_synthetic_quadruped({"d_beta": 0})
    with pytest.raises(ConfigError):
        build_synthetic_quadruped({"d_embed": 1})
    with pytest.raises(ConfigError):
        build_synthetic_quadruped({"no_such_key": 1})


def test_shape_params_bounds():
    ShapeParams(np.array([2.9, -3.0]))
    with pytest.raises(ValueError):
        ShapeParams(np.array([3.5]))
    with pytest.raises(ValueError):
        ShapeParams(np.array([np.nan]))


def test_template_roundtrip(tmp_path, tpl):
    save_template(tpl, tmp_path / "t.zip")
    r = load_template(tmp_path / "t.zip")
    assert np.array_equal(r.rest_mesh.vertices, tpl.rest_mesh.vertices)
    assert np.array_equal(r.faces, tpl.faces)
    assert np.array_equal(r.skin_weights, tpl.skin_weights)
    assert np.allclose(r.embedding_atlas, tpl.embedding_atlas, atol=1e-6)
    assert r.joint_names == tpl.joint_names
