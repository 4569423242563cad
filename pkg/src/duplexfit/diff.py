"""Flat parameter vectors, reverse-mode gradients and a finite-difference checker."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch


class NonFiniteGradient(FloatingPointError):
    def __init__(self, blocks):
        super().__init__(f"non-finite gradient in block(s): {', '.join(blocks)}")
        self.blocks = list(blocks)


class ParamVector:
    """Named, shaped blocks flattened into one float64 vector.

    ``offsets[name] = (start, stop)``; the slices partition ``[0, size)``
    in insertion order.
    """

    def __init__(self, blocks: dict):
        self.names = list(blocks)
        self.shapes = {}
        self.offsets = {}
        chunks = []
        pos = 0
        for name, value in blocks.items():
            a = value.detach().cpu().double() if isinstance(value, torch.Tensor) else torch.as_tensor(
                np.asarray(value, dtype=np.float64))
            self.shapes[name] = tuple(a.shape)
            n = a.numel()
            self.offsets[name] = (pos, pos + n)
            pos += n
            chunks.append(a.reshape(-1))
        self.data = torch.cat(chunks) if chunks else torch.zeros(0, dtype=torch.float64)

    @classmethod
    def from_flat(cls, template: "ParamVector", flat) -> "ParamVector":
        out = cls.__new__(cls)
        out.names = list(template.names)
        out.shapes = dict(template.shapes)
        out.offsets = dict(template.offsets)
        out.data = torch.as_tensor(flat, dtype=torch.float64).reshape(-1).clone()
        if out.data.numel() != template.size:
            raise ValueError("flat vector size does not match block layout")
        return out

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParamVector":
        return cls({prefix + k: v for k, v in module.named_parameters()})

    @property
    def size(self) -> int:
        return int(self.data.numel())

    def __len__(self):
        return self.size

    def block(self, name) -> torch.Tensor:
        a, b = self.offsets[name]
        return self.data[a:b].reshape(self.shapes[name])

    def blocks(self) -> dict:
        return {n: self.block(n) for n in self.names}

    def copy(self) -> "ParamVector":
        return ParamVector.from_flat(self, self.data)

    def numpy(self) -> np.ndarray:
        return self.data.numpy().copy()


def grad(objective: Callable[[dict], torch.Tensor], at: ParamVector, check_finite: bool = True) -> ParamVector:
    """Reverse-mode gradient of ``objective(blocks) -> scalar`` at ``at``.

    ``objective`` receives a dict of leaf tensors (float64, requires_grad)
    shaped like the blocks of ``at``.
    """
    leaves = {n: at.block(n).clone().requires_grad_(True) for n in at.names}
    value = objective(leaves)
    if not torch.isfinite(value):
        raise FloatingPointError("objective is not finite at the evaluation point")
    gs = torch.autograd.grad(value, [leaves[n] for n in at.names], allow_unused=True)
    out = []
    bad = []
    for n, g in zip(at.names, gs):
        g = torch.zeros_like(leaves[n]) if g is None else g.detach()
        if check_finite and not torch.isfinite(g).all():
            bad.append(n)
        out.append(g.reshape(-1).double())
    if bad:
        raise NonFiniteGradient(bad)
    flat = torch.cat(out) if out else torch.zeros(0, dtype=torch.float64)
    return ParamVector.from_flat(at, flat)


@dataclass
class GradCheckReport:
    tolerance: float
    h: float
    max_rel_error: dict = field(default_factory=dict)
    n_probes: dict = field(default_factory=dict)
    probes: list = field(default_factory=list)  # (block, index, analytic, numeric, rel)

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    def to_dict(self) -> dict:
        return {"tolerance": self.tolerance, "h": self.h, "passed": self.passed,
                "max_rel_error": self.max_rel_error, "n_probes": self.n_probes,
                "probes": [list(p) for p in self.probes]}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def relative_error(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def finite_diff_check(objective, at: ParamVector, h: float = 1e-5, tolerance: float = 1e-4,
                      n_probes: int = 10, gradient: ParamVector | None = None,
                      seed: int = 0, skip_below: float = 0.0) -> GradCheckReport:
    """Central differences on ``n_probes`` random coordinates of every block.

    ``gradient`` may be passed to check an externally computed gradient
    (otherwise ``grad`` is used). With ``skip_below`` > 0, probes are drawn
    only from coordinates whose analytic gradient reaches that magnitude
    (falling back to all coordinates of a block when none does): below the
    roundoff level of a central difference the comparison is meaningless.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    g = gradient if gradient is not None else grad(objective, at)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance, h=h)

    def f(flat):
        pv = ParamVector.from_flat(at, flat)
        with torch.no_grad():
            return float(objective(pv.blocks()))

    for name in at.names:
        a, b = at.offsets[name]
        n = b - a
        if n == 0:
            continue
        pool = np.arange(n)
        if skip_below > 0:
            big = np.flatnonzero(np.abs(g.data[a:b].numpy()) >= skip_below)
            pool = big if len(big) else pool
        idx = np.sort(rng.choice(pool, size=min(n_probes, len(pool)), replace=False))
        worst = 0.0
        for i in idx:
            k = a + int(i)
            xp = at.data.clone()
            xm = at.data.clone()
            xp[k] += h
            xm[k] -= h
            num = (f(xp) - f(xm)) / (2 * h)
            ana = float(g.data[k])
            rel = relative_error(ana, num)
            worst = max(worst, rel)
            report.probes.append((name, int(i), ana, num, rel))
        report.max_rel_error[name] = worst
        report.n_probes[name] = len(idx)
    return report


# --------------------------------------------------------------------------
# gradient suite over the fitting graph
# --------------------------------------------------------------------------

def _toy_problem(cfg):
    """Two-frame synthetic scene at low resolution, with a perturbed pose as evaluation point."""
    from .harness import generate_scene

    scene, obs = generate_scene(cfg)
    return scene, obs


def _pose_from_blocks(base, b):
    from .camera import rodrigues
    from .template import PoseParams

    R0 = torch.as_tensor(np.asarray(base.root_rotation, float))
    t0 = torch.as_tensor(np.asarray(base.root_translation, float))
    if b["root"].numel() == 0:
        return PoseParams(R0, t0, b["angles"])
    return PoseParams(rodrigues(b["root"][:3]) @ R0, t0 + b["root"][3:], b["angles"])


def _randomize(module, gen, scale):
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def gradient_suite(cfg=None, h: float = 1e-5, tolerance: float = 1e-4, n_probes: int = 10,
                   seed: int = 0, names=None) -> dict:
    """Finite-difference checks of every loss term, skinning, the pose network,
    the texture field, a rendered pixel and the full objective (float64).

    Returns ``{name: GradCheckReport}``. ``names`` restricts the suite.
    """
    from .config import RunConfig
    from .fit import (LossWeights, SceneState, TemporalPoseModel, eval_pose, loss_arap, loss_cse,
                      loss_edge, loss_kp, loss_mask, loss_photo, mask_points, prepare_frames,
                      total_objective)
    from .renderer import march_shells, pose_shells, render_shells
    from .template import lbs_deform
    from .texfield import TextureField, field_eval

    cfg = cfg or RunConfig(n_frames=2, image_size=24, grid_spacing=0.08, tex_resolution=8,
                           tex_width=8, n_samples=6, pose_width=16, seed=seed)
    scene, obs = _toy_problem(cfg)
    tpl = scene.tpl
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    fr = obs[0]
    gt = scene.poses[0]
    beta0 = torch.as_tensor(scene.beta) + 0.05 * torch.randn(tpl.d_beta, generator=gen, dtype=torch.float64)
    ang0 = torch.as_tensor(np.asarray(gt.joint_angles, float)) + 0.05 * torch.randn(
        tpl.n_joints - 1, 3, generator=gen, dtype=torch.float64)
    geo = ParamVector({"beta": beta0, "root": 0.02 * torch.randn(6, generator=gen, dtype=torch.float64),
                       "angles": ang0})
    # the regularisers are exactly invariant to the root, so their root gradient is
    # identically zero and a finite difference there would only measure roundoff
    geo_local = ParamVector({"beta": beta0, "root": torch.zeros(0, dtype=torch.float64), "angles": ang0})
    corr = prepare_frames([fr], tpl, stride=2)[0].correspondences
    pts = mask_points(fr.mask)

    psi = TextureField(tpl.rest_mesh.vertices.min(0) - 0.1, tpl.rest_mesh.vertices.max(0) + 0.1,
                       cfg.tex_resolution, cfg.tex_channels, cfg.tex_width, seed=seed, dtype=torch.float64,
                       sigma_scale=cfg.sigma_scale)
    _randomize(psi, gen, 0.3)
    psi_names = [n for n, _ in psi.named_parameters()]

    def psi_call(b, *args):
        return torch.func.functional_call(psi, {n: b[n] for n in psi_names}, args)

    def geo_loss(fn):
        def objective(b):
            theta = _pose_from_blocks(gt, b)
            return fn(b["beta"], theta)
        return objective

    w_lbs = torch.as_tensor(rng.normal(size=(tpl.n_vertices, 3)))
    suite = {
        "loss_cse": (geo_loss(lambda be, th: loss_cse(fr, tpl, be, th, fr.camera, corr)), geo),
        "loss_kp": (geo_loss(lambda be, th: loss_kp(fr, tpl, be, th, fr.camera)), geo),
        "loss_mask": (geo_loss(lambda be, th: loss_mask(fr, tpl, be, th, fr.camera, points=pts)), geo),
        "loss_arap": (geo_loss(lambda be, th: loss_arap(tpl, be, th)), geo_local),
        "loss_edge": (geo_loss(lambda be, th: loss_edge(tpl, be, th)), geo_local),
        "lbs_deform": (geo_loss(lambda be, th: (lbs_deform(tpl, be, th) * w_lbs).sum()), geo),
    }

    # photometric term through a full render, differentiable in geometry and texture
    photo_at = ParamVector({**geo.blocks(), **dict(psi.named_parameters())})

    def photo_obj(b):
        theta = _pose_from_blocks(gt, b)
        shells = pose_shells(tpl, b["beta"], theta, cfg.epsilon, torch.float64)
        field = lambda p, d: psi_call(b, p, d)
        return loss_photo(fr, render_shells(fr.camera, shells, field, cfg.n_samples, seed=1))

    # a whole-image objective is only piecewise smooth (mesh facets, triplane cells,
    # the L1 kink); a tenfold smaller step keeps the stencil inside one smooth piece,
    # and coordinates with |gradient| < 1e-6 sit near that step's roundoff level (~3e-11)
    suite["loss_photo"] = (photo_obj, photo_at, h / 10, 1e-6)

    # one interior pixel of the render
    rows, cols = np.nonzero(fr.mask)
    k = int(np.argmin((rows - rows.mean()) ** 2 + (cols - cols.mean()) ** 2))
    pixel = np.array([[cols[k] + 0.5, rows[k] + 0.5]])
    wrgb = torch.tensor([0.2, 0.5, 0.3], dtype=torch.float64)

    def pixel_obj(b):
        theta = _pose_from_blocks(gt, b)
        shells = pose_shells(tpl, b["beta"], theta, cfg.epsilon, torch.float64)
        out = march_shells(shells, fr.camera, lambda p, d: psi_call(b, p, d), cfg.n_samples, seed=1,
                           pixels=pixel)
        return out["rgb"][0] @ wrgb

    suite["render_pixel"] = (pixel_obj, photo_at)

    # texture field alone
    p0 = torch.as_tensor(rng.uniform(-0.3, 0.3, (4, 3))) + torch.as_tensor(tpl.rest_mesh.vertices.mean(0))
    d0 = torch.nn.functional.normalize(torch.as_tensor(rng.normal(size=(4, 3))), dim=-1)
    field_at = ParamVector({**dict(psi.named_parameters()), "point": p0, "dir": d0})

    def field_obj(b):
        sigma, rgb = psi_call(b, b["point"], b["dir"])
        return (sigma * 0.1).sum() + (rgb @ wrgb).sum()

    suite["field_eval"] = (field_obj, field_at)

    # pose network
    pm = TemporalPoseModel(tpl.n_joints, gt.root, cfg.pose_width, cfg.pose_freqs, seed=seed)
    _randomize(pm.out, gen, 0.05)
    pm_names = [n for n, _ in pm.named_parameters()]
    w_out = torch.as_tensor(rng.normal(size=12 + 3 * (tpl.n_joints - 1)))

    class _Pose(torch.nn.Module):
        def __init__(self, m):
            super().__init__()
            self.m = m

        def forward(self, tau):
            th = eval_pose(self.m, tau)
            return torch.cat([th.root_rotation.reshape(-1), th.root_translation, th.joint_angles.reshape(-1)])

    pose_wrapper = _Pose(pm)

    def pose_obj(b):
        params = {"m." + n: b[n] for n in pm_names}
        v = sum(torch.func.functional_call(pose_wrapper, params, (tau,)) for tau in (0.13, 0.71))
        return (v * w_out).sum()

    suite["eval_pose"] = (pose_obj, ParamVector(dict(pm.named_parameters())))

    # full weighted objective over both frames
    state = SceneState.create(tpl, cfg, gt.root)
    state.psi = psi
    _randomize(state.pose_model.out, gen, 0.02)
    preps = prepare_frames(obs.frames, tpl, stride=2)
    weights = LossWeights.from_config(cfg)
    st_names = [n for n, _ in state.named_parameters()]

    class _Objective(torch.nn.Module):
        def __init__(self, s):
            super().__init__()
            self.s = s

        def forward(self):
            return total_objective(self.s, preps, weights, delta=cfg.huber_delta)

    wrapper = _Objective(state)

    def total_obj(b):
        return torch.func.functional_call(wrapper, {"s." + n: b[n] for n in st_names}, ())

    suite["total_objective"] = (total_obj, ParamVector(dict(state.named_parameters())))

    reports = {}
    for name, (obj, at, *extra) in suite.items():
        if names is not None and name not in names:
            continue
        step, floor = extra if extra else (h, 0.0)
        reports[name] = finite_diff_check(obj, at, h=step, tolerance=tolerance, n_probes=n_probes,
                                          seed=seed, skip_below=floor)
    return reports

