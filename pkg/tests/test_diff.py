import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from duplexfit.diff import (GradCheckReport, NonFiniteGradient, ParamVector, finite_diff_check, grad,
                            gradient_suite, relative_error)


def quad(b):
    return 0.5 * sum((v * v).sum() for v in b.values())


@pytest.fixture
def pv(rng):
    return ParamVector({"a": rng.normal(size=(3, 2)), "b": torch.tensor(rng.normal(size=4)), "c": rng.normal(size=1)})


def test_quadratic_gradient_is_identity(pv):
    g = grad(quad, pv)
    assert torch.equal(g.data, pv.data)
    assert g.names == pv.names and g.shapes == pv.shapes


def test_constant_gradient_is_zero(pv):
    g = grad(lambda b: torch.tensor(3.0, dtype=torch.float64) + 0 * b["a"].sum(), pv)
    assert torch.all(g.data == 0)
    g = grad(lambda b: b["a"].sum() * 0 + 1.0, pv)
    assert torch.all(g.data == 0)


def test_unused_block_gets_zero(pv):
    g = grad(lambda b: (b["a"] ** 2).sum(), pv)
    assert torch.all(g.block("b") == 0) and torch.all(g.block("c") == 0)


def test_non_finite_gradient_names_block(pv):
    with pytest.raises(NonFiniteGradient) as e:
        grad(lambda b: b["a"].sum() + torch.sqrt(b["b"] * 0).sum(), pv)
    assert e.value.blocks == ["b"]
    with pytest.raises(FloatingPointError):
        grad(lambda b: b["a"].sum() / 0.0, pv)


def test_quadratic_check_is_tight(pv):
    rep = finite_diff_check(quad, pv, h=1e-5, n_probes=5)
    assert rep.passed and rep.worst < 1e-9
    assert set(rep.n_probes) == {"a", "b", "c"}
    assert rep.n_probes["c"] == 1


def test_wrong_gradient_is_caught(pv):
    wrong = ParamVector.from_flat(pv, 2 * pv.data)
    rep = finite_diff_check(quad, pv, gradient=wrong)
    assert not rep.passed
    assert all(abs(e - 0.5) < 1e-6 for e in rep.max_rel_error.values())


def test_report_json(tmp_path, pv):
    import json

    rep = finite_diff_check(quad, pv, n_probes=2)
    rep.save(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["passed"] is True and len(d["probes"]) == 5
    assert all(e >= 0 for e in d["max_rel_error"].values())


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1e-12, 0.0) == pytest.approx(1e-4)
    assert relative_error(2.0, 1.0) == 0.5
    with pytest.raises(ValueError):
        finite_diff_check(quad, ParamVector({"x": np.ones(2)}), h=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=5))
def test_offsets_partition_vector(shapes):
    blocks = {f"b{i}": np.zeros(s) for i, s in enumerate(shapes)}
    pv = ParamVector(blocks)
    pos = 0
    for n in pv.names:
        a, b = pv.offsets[n]
        assert a == pos and b - a == int(np.prod(pv.shapes[n]))
        pos = b
    assert pos == pv.size
    flat = torch.arange(pv.size, dtype=torch.float64)
    back = ParamVector.from_flat(pv, flat)
    assert torch.equal(torch.cat([back.block(n).reshape(-1) for n in back.names]), flat) if pv.size else True
    with pytest.raises(ValueError):
        ParamVector.from_flat(pv, torch.zeros(pv.size + 1))


def test_gradient_of_sum_is_sum_of_gradients(pv):
    f1 = lambda b: (torch.sin(b["a"]) * b["b"][:2].sum()).sum()
    f2 = lambda b: (b["c"] ** 3).sum() + torch.exp(b["b"]).sum()
    g = grad(lambda b: f1(b) + f2(b), pv)
    g12 = grad(f1, pv).data + grad(f2, pv).data
    assert (g.data - g12).abs().max() < 1e-12


def test_grad_is_deterministic(pv):
    f = lambda b: torch.tanh(b["a"] @ b["a"].T).sum() + b["b"].prod()
    assert torch.equal(grad(f, pv).data, grad(f, pv).data)


def test_from_module_names_parameters():
    m = torch.nn.Linear(3, 2, dtype=torch.float64)
    pv = ParamVector.from_module(m, "lin.")
    assert pv.names == ["lin.weight", "lin.bias"] and pv.size == 8


def test_pixel_and_field_checks_pass():
    reps = gradient_suite(names=["render_pixel", "field_eval"])
    for name, rep in reps.items():
        assert isinstance(rep, GradCheckReport)
        assert rep.passed, (name, rep.max_rel_error)
