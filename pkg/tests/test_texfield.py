import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from duplexfit.diff import ParamVector, finite_diff_check
from duplexfit.texfield import (TextureField, TriplaneGrid, field_eval, load_field, save_field,
                                triplane_sample)


def make_grid(R=5, C=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return TriplaneGrid([-1, -2, -0.5], [1, 2, 0.5], R, C, init_std=1.0, generator=g, dtype=torch.float64)


def node_coord(grid, axis, k):
    lo, hi = grid.bbox_min[axis].item(), grid.bbox_max[axis].item()
    return lo + (hi - lo) * k / (grid.resolution - 1)


def bilinear_oracle(grid, p):
    """Hand-written bilinear interpolation per plane, node-aligned."""
    P = grid.planes.detach().numpy()
    lo, hi = grid.bbox_min.numpy(), grid.bbox_max.numpy()
    R = grid.resolution
    out = []
    for k, (a, b) in enumerate(TriplaneGrid.PLANE_AXES):
        x = (p[a] - lo[a]) / (hi[a] - lo[a]) * (R - 1)
        y = (p[b] - lo[b]) / (hi[b] - lo[b]) * (R - 1)
        x0, y0 = min(int(np.floor(x)), R - 2), min(int(np.floor(y)), R - 2)
        fx, fy = x - x0, y - y0
        f = ((1 - fx) * (1 - fy) * P[k, :, y0, x0] + fx * (1 - fy) * P[k, :, y0, x0 + 1]
             + (1 - fx) * fy * P[k, :, y0 + 1, x0] + fx * fy * P[k, :, y0 + 1, x0 + 1])
        out.append(f)
    return np.concatenate(out)


def test_node_returns_stored_feature():
    grid = make_grid()
    i, j, k = 1, 3, 2
    p = torch.tensor([[node_coord(grid, 0, i), node_coord(grid, 1, j), node_coord(grid, 2, k)]],
                     dtype=torch.float64)
    f = triplane_sample(grid, p)[0].detach()
    P = grid.planes.detach()
    C = grid.channels
    # plane (a, b): column index along a, row index along b
    assert torch.equal(f[:C], P[0, :, j, i])
    assert torch.equal(f[C:2 * C], P[1, :, k, i])
    assert torch.equal(f[2 * C:], P[2, :, k, j])


def test_midpoint_is_mean():
    grid = make_grid()
    a = [node_coord(grid, 0, 1), node_coord(grid, 1, 2), node_coord(grid, 2, 3)]
    b = [node_coord(grid, 0, 2), node_coord(grid, 1, 2), node_coord(grid, 2, 3)]
    pts = torch.tensor([a, b, list((np.array(a) + np.array(b)) / 2)], dtype=torch.float64)
    f = triplane_sample(grid, pts).detach()
    assert torch.allclose(f[2], 0.5 * (f[0] + f[1]), atol=1e-14)


def test_bilinear_matches_oracle(rng):
    grid = make_grid(R=7, C=4)
    lo, hi = grid.bbox_min.numpy(), grid.bbox_max.numpy()
    pts = rng.uniform(lo, hi, (200, 3))
    f = triplane_sample(grid, torch.as_tensor(pts)).detach().numpy()
    ref = np.stack([bilinear_oracle(grid, p) for p in pts])
    assert np.abs(f - ref).max() < 1e-12


def test_outside_points_clamped_and_flagged():
    grid = make_grid()
    pts = torch.tensor([[5.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], dtype=torch.float64)
    f, flags = triplane_sample(grid, pts, return_flags=True)
    assert flags.tolist() == [True, False, False]
    assert torch.allclose(f[0], f[1])


def test_sample_differentiable_in_point_and_grid():
    grid = make_grid()
    p = torch.tensor([[0.13, -0.4, 0.21]], dtype=torch.float64, requires_grad=True)
    triplane_sample(grid, p).sum().backward()
    assert p.grad.abs().sum() > 0
    assert grid.planes.grad.abs().sum() > 0


def test_zero_init_outputs():
    psi = TextureField([-1] * 3, [1] * 3, resolution=8, dtype=torch.float64, sigma_scale=1.0)
    pts = torch.rand(50, 3, dtype=torch.float64) * 2 - 1
    d = torch.nn.functional.normalize(torch.randn(50, 3, dtype=torch.float64), dim=-1)
    sigma, rgb = field_eval(psi, pts, d)
    assert torch.allclose(sigma, torch.full_like(sigma, np.log(2.0)), atol=1e-12)
    assert torch.allclose(rgb, torch.full_like(rgb, 0.5), atol=1e-12)


def test_sigma_scale_multiplies_opacity():
    psi = TextureField([-1] * 3, [1] * 3, resolution=8, dtype=torch.float64, sigma_scale=20.0)
    sigma, _ = field_eval(psi, torch.zeros(1, 3, dtype=torch.float64), torch.tensor([[0, 0, 1.0]], dtype=torch.float64))
    assert abs(sigma.item() - 20 * np.log(2.0)) < 1e-10
    with pytest.raises(ValueError):
        TextureField([-1] * 3, [1] * 3, sigma_scale=0.0)


def randomized_field(seed=0, scale=1.0):
    psi = TextureField([-1] * 3, [1] * 3, resolution=6, channels=3, width=8, dtype=torch.float64, seed=seed)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in psi.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=torch.float64))
    return psi


def test_sigma_direction_independent(rng):
    psi = randomized_field()
    pts = torch.as_tensor(rng.uniform(-1, 1, (100, 3)))
    d1 = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(100, 3))), dim=-1)
    d2 = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(100, 3))), dim=-1)
    s1, c1 = field_eval(psi, pts, d1)
    s2, _ = field_eval(psi, pts, d2)
    s3, _ = field_eval(psi, pts, -d1)
    assert torch.equal(s1, s2) and torch.equal(s1, s3)
    assert ((c1 >= 0) & (c1 <= 1)).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1e3))
def test_outputs_finite_for_any_parameters(seed, scale):
    psi = randomized_field(seed, scale)
    pts = torch.rand(32, 3, dtype=torch.float64) * 4 - 2
    d = torch.nn.functional.normalize(torch.randn(32, 3, dtype=torch.float64), dim=-1)
    sigma, rgb = field_eval(psi, pts, d)
    assert torch.isfinite(sigma).all() and (sigma >= 0).all()
    assert torch.isfinite(rgb).all() and ((rgb >= 0) & (rgb <= 1)).all()


def test_gradient_check_all_inputs():
    psi = randomized_field(3, 0.5)
    names = [n for n, _ in psi.named_parameters()]
    g = torch.Generator().manual_seed(7)
    point = (torch.rand(1, 3, generator=g, dtype=torch.float64) * 1.6 - 0.8)
    direction = torch.nn.functional.normalize(torch.randn(1, 3, generator=g, dtype=torch.float64), dim=-1)
    at = ParamVector({**dict(psi.named_parameters()), "point": point, "dir": direction})

    def objective(b):
        params = {n: b[n] for n in names}
        feat_psi = torch.func.functional_call(psi, params, (b["point"], b["dir"]))
        sigma, rgb = feat_psi
        return sigma.sum() + (rgb * torch.tensor([0.3, -0.7, 1.1], dtype=torch.float64)).sum()

    rep = finite_diff_check(objective, at, h=1e-5, tolerance=1e-5, n_probes=20)
    assert rep.passed, rep.max_rel_error


def test_sigma_grad_wrt_grid_feature():
    psi = randomized_field(5, 0.5)
    pt = torch.tensor([[0.11, -0.27, 0.35]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    idx = (0, 1, 2, 3)  # a node adjacent to the point on the XY plane
    sigma, _ = field_eval(psi, pt, d)
    sigma.sum().backward()
    analytic = psi.grid.planes.grad[idx].item()
    h = 1e-5
    with torch.no_grad():
        psi.grid.planes[idx] += h
        fp = field_eval(psi, pt, d)[0].item()
        psi.grid.planes[idx] -= 2 * h
        fm = field_eval(psi, pt, d)[0].item()
        psi.grid.planes[idx] += h
    numeric = (fp - fm) / (2 * h)
    assert abs(analytic) > 1e-8
    assert abs(analytic - numeric) / abs(analytic) < 1e-5


def test_checkpoint_roundtrip(tmp_path):
    psi = randomized_field(2, 0.3)
    psi = psi.float()
    save_field(psi, tmp_path / "tex")
    back = load_field(tmp_path / "tex")
    pts = torch.rand(20, 3) * 2 - 1
    d = torch.nn.functional.normalize(torch.randn(20, 3), dim=-1)
    for a, b in zip(field_eval(psi, pts, d), field_eval(back, pts, d)):
        assert torch.equal(a, b)
    assert back.config() == psi.config()
