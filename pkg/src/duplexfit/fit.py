"""Stage-two joint optimisation: temporal pose network, loss terms and the fitting loop."""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_erosion
from scipy.spatial import cKDTree
from torch import nn

from .camera import Camera, Rigid3, project, se3_exp
from .config import RunConfig
from .data import Frame, ObservationSet
from .poseinit import CorrespondenceSet, InitResult, init_root_poses, match_dense
from .renderer import DuplexShellPosed, RenderOutput, pose_shells, render_shells
from .template import (PoseParams, SkinnedTemplate, apply_skinning, posed_keypoints,
                       skinning_transforms)
from .texfield import TextureField, load_field, save_field


class DivergenceError(RuntimeError):
    pass


class ResolutionMismatch(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


# --------------------------------------------------------------------------
# pose network
# --------------------------------------------------------------------------

def positional_encoding(tau, L: int) -> torch.Tensor:
    """[sin(2^0 pi tau), cos(2^0 pi tau), ..., sin(2^{L-1} pi tau), cos(2^{L-1} pi tau)]."""
    if L < 1:
        raise ValueError("L must be >= 1")
    tau = torch.as_tensor(tau, dtype=torch.float64)
    freqs = (2.0 ** torch.arange(L, dtype=torch.float64)) * np.pi
    ang = tau[..., None] * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], -1).reshape(*tau.shape, 2 * L)


class TemporalPoseModel(nn.Module):
    """tau -> (se(3) root increment, joint angles); root = exp(increment) @ g_pnp."""

    def __init__(self, n_joints: int, g_pnp: Rigid3 | None = None, width: int = 64, L: int = 6,
                 seed: int = 0, dtype=torch.float64):
        super().__init__()
        self.n_joints = n_joints
        self.L = L
        self.width = width
        gen = torch.Generator().manual_seed(seed)
        self.l1 = nn.Linear(2 * L, width, dtype=dtype)
        self.l2 = nn.Linear(width, width, dtype=dtype)
        self.out = nn.Linear(width, 6 + 3 * (n_joints - 1), dtype=dtype)
        for layer in (self.l1, self.l2):
            bound = 1.0 / np.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=gen, dtype=dtype) * 2 - 1) * bound)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        g = g_pnp or Rigid3.identity()
        self.register_buffer("g_rot", torch.as_tensor(g.rotation, dtype=dtype))
        self.register_buffer("g_trans", torch.as_tensor(g.translation, dtype=dtype))

    @property
    def out_dim(self) -> int:
        return self.out.out_features

    def set_base(self, g: Rigid3):
        dtype = self.g_rot.dtype
        self.g_rot.copy_(torch.as_tensor(g.rotation, dtype=dtype))
        self.g_trans.copy_(torch.as_tensor(g.translation, dtype=dtype))

    def forward(self, tau) -> torch.Tensor:
        x = positional_encoding(tau, self.L).to(self.l1.weight.dtype)
        h = torch.nn.functional.silu(self.l1(x))
        h = torch.nn.functional.silu(self.l2(h))
        return self.out(h)


def eval_pose(model: TemporalPoseModel, tau) -> PoseParams:
    """Pose at one timestamp; differentiable in the model weights."""
    y = model(torch.as_tensor(float(tau), dtype=torch.float64)[None])[0]
    dR, dt = se3_exp(y[:6])
    R = dR @ model.g_rot
    t = dR @ model.g_trans + dt
    return PoseParams(R, t, y[6:].reshape(model.n_joints - 1, 3))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def huber_norm(diff: torch.Tensor, delta: float) -> torch.Tensor:
    """Huber penalty of the Euclidean norm of the last axis."""
    s = (diff * diff).sum(-1)
    r = torch.sqrt(s.clamp_min(1e-30))
    return torch.where(s <= delta * delta, 0.5 * s, delta * (r - 0.5 * delta))


def huber_scalar(r: float, delta: float) -> float:
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def _posed(tpl, beta, theta):
    AR, At, shaped = skinning_transforms(tpl, beta, theta)
    return apply_skinning(tpl, AR, At, shaped), shaped


def loss_cse(obs_t: Frame, tpl: SkinnedTemplate, beta, theta_t, cam_t: Camera,
             correspondences, delta: float = 4.0, posed=None) -> torch.Tensor:
    """Mean Huber reprojection distance of dense pixel->vertex matches."""
    corr = correspondences
    if posed is None:
        posed, _ = _posed(tpl, beta, theta_t)
    if len(corr) == 0:
        warnings.warn("empty correspondence set; L_cse = 0")
        return posed.sum() * 0.0
    idx = torch.as_tensor(corr.vertex_index)
    pix = torch.as_tensor(corr.pixels, dtype=posed.dtype)
    proj = project(cam_t, posed[idx])
    keep = proj.in_front
    if not bool(keep.any()):
        warnings.warn("all matched vertices behind the camera; L_cse = 0")
        return posed.sum() * 0.0
    return huber_norm(proj.uv[keep] - pix[keep], delta).mean()


def loss_kp(obs_t: Frame, tpl: SkinnedTemplate, beta, theta_t, cam_t: Camera,
            delta: float = 4.0, posed=None) -> torch.Tensor:
    """Mean Huber distance between detected and projected keypoints (visible only)."""
    if posed is None:
        posed, _ = _posed(tpl, beta, theta_t)
    vis = torch.as_tensor(np.asarray(obs_t.kp_visible, bool))
    if not bool(vis.any()):
        warnings.warn("no visible keypoints; L_kp = 0")
        return posed.sum() * 0.0
    kp = posed_keypoints(tpl, posed)
    proj = project(cam_t, kp)
    det = torch.as_tensor(np.asarray(obs_t.keypoints, float), dtype=posed.dtype)
    return huber_norm(proj.uv[vis] - det[vis], delta).mean()


def _image_hw3(img, dtype):
    t = torch.as_tensor(img) if not isinstance(img, torch.Tensor) else img
    t = t.to(dtype)
    if t.dim() == 3 and t.shape[0] == 3 and t.shape[-1] != 3:
        t = t.permute(1, 2, 0)
    return t


def loss_photo(obs_t: Frame, render, grad_weight: float = 0.5) -> torch.Tensor:
    """Masked L1 plus ``grad_weight`` x L1 of forward image differences.

    The L1 term averages over pixels inside the observed mask; the gradient
    term averages over forward-difference pairs whose both pixels lie inside
    the eroded mask (so silhouette edges do not contribute).
    """
    pred = render.rgb if isinstance(render, RenderOutput) else render
    pred = _image_hw3(pred, torch.float64 if not isinstance(pred, torch.Tensor) else pred.dtype)
    target = _image_hw3(obs_t.rgb, pred.dtype)
    mask = torch.as_tensor(np.asarray(obs_t.mask, bool))
    if pred.shape != target.shape or pred.shape[:2] != mask.shape:
        raise ResolutionMismatch(f"render {tuple(pred.shape)} vs observation {tuple(target.shape)}")
    if not bool(mask.any()):
        return pred.sum() * 0.0
    diff = pred - target
    l1 = diff[mask].abs().mean()
    gx = diff[:, 1:] - diff[:, :-1]
    gy = diff[1:] - diff[:-1]
    inner = torch.as_tensor(binary_erosion(np.asarray(obs_t.mask, bool)))
    mx = inner[:, 1:] & inner[:, :-1]
    my = inner[1:] & inner[:-1]
    terms = []
    if bool(mx.any()):
        terms.append(gx[mx].abs().mean())
    if bool(my.any()):
        terms.append(gy[my].abs().mean())
    grad_term = sum(terms) if terms else l1 * 0.0
    return l1 + grad_weight * grad_term


def mask_points(mask, max_points: int = 4096, seed: int = 0) -> np.ndarray:
    """Pixel centres of the foreground, uniformly subsampled to at most ``max_points``."""
    rows, cols = np.nonzero(np.asarray(mask, bool))
    pts = np.stack([cols + 0.5, rows + 0.5], -1).astype(np.float64)
    if len(pts) > max_points:
        sel = np.sort(np.random.default_rng(seed).choice(len(pts), max_points, replace=False))
        pts = pts[sel]
    return pts


def chamfer_2d(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Symmetric Chamfer: mean of the two directed mean nearest-neighbour distances."""
    an = a.detach().cpu().numpy()
    bn = b.detach().cpu().numpy()
    _, ia = cKDTree(bn).query(an)
    _, ib = cKDTree(an).query(bn)
    da = a - b[torch.as_tensor(ia)]
    db = b - a[torch.as_tensor(ib)]
    dist_a = torch.sqrt((da * da).sum(-1).clamp_min(1e-30))
    dist_b = torch.sqrt((db * db).sum(-1).clamp_min(1e-30))
    return 0.5 * (dist_a.mean() + dist_b.mean())


def loss_mask(obs_t: Frame, tpl: SkinnedTemplate, beta, theta_t, cam_t: Camera,
              max_points: int = 4096, posed=None, points=None) -> torch.Tensor:
    """2D Chamfer between foreground pixels and projected posed vertices (pixels)."""
    if points is None:
        if not np.asarray(obs_t.mask, bool).any():
            raise EmptyMaskError("observation mask is empty")
        points = mask_points(obs_t.mask, max_points)
    if posed is None:
        posed, _ = _posed(tpl, beta, theta_t)
    uv = project(cam_t, posed).uv
    return chamfer_2d(torch.as_tensor(points, dtype=uv.dtype), uv)


def _directed_edges(tpl_or_edges):
    e = tpl_or_edges.edges() if hasattr(tpl_or_edges, "edges") else np.asarray(tpl_or_edges)
    return np.concatenate([e, e[:, ::-1]], 0)


def arap_energy(rest: torch.Tensor, posed: torch.Tensor, edges) -> torch.Tensor:
    """Sum over vertices i and 1-ring neighbours j of |(p_i - p_j) - R_i (q_i - q_j)|^2.

    R_i is the best-fit rotation of the 1-ring (SVD, reflection-corrected),
    held constant for differentiation.
    """
    de = torch.as_tensor(_directed_edges(edges))
    i, j = de[:, 0], de[:, 1]
    e_rest = rest[i] - rest[j]
    e_pose = posed[i] - posed[j]
    n = len(rest)
    with torch.no_grad():
        cov = torch.zeros(n, 3, 3, dtype=rest.dtype)
        cov.index_add_(0, i, e_rest[:, :, None] * e_pose[:, None, :])
        U, _, Vh = torch.linalg.svd(cov)
        V = Vh.transpose(-1, -2)
        d = torch.sign(torch.linalg.det(V @ U.transpose(-1, -2)))
        d = torch.where(d == 0, torch.ones_like(d), d)
        D = torch.diag_embed(torch.stack([torch.ones_like(d), torch.ones_like(d), d], -1))
        R = V @ D @ U.transpose(-1, -2)
    res = e_pose - (R[i] @ e_rest[..., None])[..., 0]
    return (res * res).sum()


def loss_arap(tpl: SkinnedTemplate, beta, theta_t, posed=None, shaped=None) -> torch.Tensor:
    if posed is None or shaped is None:
        posed, shaped = _posed(tpl, beta, theta_t)
    return arap_energy(shaped, posed, tpl.edges())


def edge_energy(rest: torch.Tensor, posed: torch.Tensor, edges) -> torch.Tensor:
    e = torch.as_tensor(np.asarray(edges))
    l = torch.linalg.norm(posed[e[:, 0]] - posed[e[:, 1]], dim=-1)
    l0 = torch.linalg.norm(rest[e[:, 0]] - rest[e[:, 1]], dim=-1)
    return ((l - l0) ** 2).sum()


def loss_edge(tpl: SkinnedTemplate, beta, theta_t, posed=None, shaped=None) -> torch.Tensor:
    if posed is None or shaped is None:
        posed, shaped = _posed(tpl, beta, theta_t)
    return edge_energy(shaped, posed, tpl.edges())


@dataclass
class LossWeights:
    w_cse: float = 1.0
    w_kp: float = 0.1
    w_photo: float = 1.0
    w_mask: float = 0.1
    w_arap: float = 0.05
    w_edge: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "LossWeights":
        return cls(**{f.name: getattr(cfg, f.name) for f in fields(cls)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


LOSS_NAMES = ("cse", "kp", "photo", "mask", "arap", "edge")


# --------------------------------------------------------------------------
# scene state
# --------------------------------------------------------------------------

class SceneState(nn.Module):
    """Everything optimised in stage two plus the fixed inputs needed to render."""

    def __init__(self, tpl: SkinnedTemplate, pose_model: TemporalPoseModel, psi: TextureField,
                 epsilon: float, n_samples: int = 16, factorized: bool = True, beta=None):
        super().__init__()
        self.tpl = tpl
        self.pose_model = pose_model
        self.psi = psi
        self.beta = nn.Parameter(torch.zeros(tpl.d_beta, dtype=torch.float64) if beta is None
                                 else torch.as_tensor(beta, dtype=torch.float64).clone())
        self.epsilon = float(epsilon)
        self.n_samples = int(n_samples)
        self.factorized = bool(factorized)

    @classmethod
    def create(cls, tpl: SkinnedTemplate, cfg: RunConfig, g_pnp: Rigid3 | None = None) -> "SceneState":
        pm = TemporalPoseModel(tpl.n_joints, g_pnp, cfg.pose_width, cfg.pose_freqs, seed=cfg.seed)
        V = tpl.rest_mesh.vertices
        pad = cfg.epsilon + 0.05
        psi = TextureField(V.min(0) - pad, V.max(0) + pad, cfg.tex_resolution, cfg.tex_channels,
                           cfg.tex_width, seed=cfg.seed + 1, sigma_scale=cfg.sigma_scale)
        return cls(tpl, pm, psi, cfg.epsilon, cfg.n_samples, cfg.factorized)

    def camera(self, frame_or_cam) -> Camera:
        """Camera used to view the animal: the SfM camera, or identity extrinsics in the ablation."""
        cam = frame_or_cam.camera if isinstance(frame_or_cam, Frame) else frame_or_cam
        if self.factorized:
            return cam
        return cam.with_extrinsics(Rigid3.identity())

    def pose(self, tau) -> PoseParams:
        return eval_pose(self.pose_model, tau)

    def posed(self, tau):
        """(posed vertices, shaped rest vertices, pose) at timestamp ``tau``."""
        theta = self.pose(tau)
        AR, At, shaped = skinning_transforms(self.tpl, self.beta, theta)
        return apply_skinning(self.tpl, AR, At, shaped), shaped, theta

    def shells(self, tau, dtype=None) -> DuplexShellPosed:
        theta = self.pose(tau)
        return pose_shells(self.tpl, self.beta, theta, self.epsilon, dtype)

    def render(self, cam: Camera, tau, seed: int = 0) -> RenderOutput:
        cam = self.camera(cam)
        return render_shells(cam, self.shells(tau), self.psi, self.n_samples, seed)

    # -- checkpoint ------------------------------------------------------------
    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        pm = self.pose_model
        blob = {k: v.detach().numpy().astype("<f8") for k, v in pm.state_dict().items()}
        np.savez(d / "pose_model.npz", **blob)
        save_field(self.psi, d / "texture")
        meta = {"beta": self.beta.detach().tolist(), "epsilon": self.epsilon,
                "n_samples": self.n_samples, "factorized": self.factorized,
                "pose_model": {"n_joints": pm.n_joints, "width": pm.width, "L": pm.L},
                "template": dict(self.tpl.config)}
        (d / "scene_state.json").write_text(json.dumps(meta, indent=1))
        return d

    @classmethod
    def load(cls, directory, tpl: SkinnedTemplate | None = None) -> "SceneState":
        d = Path(directory)
        meta = json.loads((d / "scene_state.json").read_text())
        if tpl is None:
            from .template import build_synthetic_quadruped
            tpl = build_synthetic_quadruped(meta["template"])
        p = meta["pose_model"]
        pm = TemporalPoseModel(p["n_joints"], None, p["width"], p["L"])
        with np.load(d / "pose_model.npz") as z:
            pm.load_state_dict({k: torch.as_tensor(z[k]) for k in z.files})
        psi = load_field(d / "texture")
        return cls(tpl, pm, psi, meta["epsilon"], meta["n_samples"], meta["factorized"], meta["beta"])


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------

@dataclass
class FramePrep:
    frame: Frame
    correspondences: CorrespondenceSet
    mask_pts: np.ndarray


def prepare_frames(frames, tpl: SkinnedTemplate, stride: int = 2, max_points: int = 4096):
    out = []
    for f in frames:
        if np.asarray(f.mask, bool).any():
            corr = match_dense(f.embedding, f.mask, tpl, stride).filtered(0.9)
        else:
            corr = CorrespondenceSet(np.zeros((0, 2)), [], [])
        out.append(FramePrep(f, corr, mask_points(f.mask, max_points, seed=f.index)))
    return out


def frame_losses(scene: SceneState, prep: FramePrep, with_photo: bool, delta: float = 4.0,
                 render_seed: int = 0) -> dict:
    fr = prep.frame
    cam = scene.camera(fr)
    posed, shaped, theta = scene.posed(fr.timestamp)
    tpl = scene.tpl
    out = {
        "cse": loss_cse(fr, tpl, scene.beta, theta, cam, prep.correspondences, delta, posed=posed),
        "kp": loss_kp(fr, tpl, scene.beta, theta, cam, delta, posed=posed),
        "mask": loss_mask(fr, tpl, scene.beta, theta, cam, posed=posed, points=prep.mask_pts)
        if len(prep.mask_pts) else posed.sum() * 0.0,
        "arap": loss_arap(tpl, scene.beta, theta, posed=posed, shaped=shaped),
        "edge": loss_edge(tpl, scene.beta, theta, posed=posed, shaped=shaped),
    }
    if with_photo:
        shells = pose_shells(tpl, scene.beta, theta, scene.epsilon)
        rend = render_shells(cam, shells, scene.psi, scene.n_samples, seed=render_seed + fr.index)
        out["photo"] = loss_photo(fr, rend)
    return out


def total_objective(scene: SceneState, observations, weights: LossWeights, frames=None,
                    delta: float = 4.0, photo_frames=None, return_terms: bool = False):
    """Weighted sum of all per-frame terms over ``frames`` (default: every frame).

    ``photo_frames`` restricts the rendered photometric term to a subset
    (default: all frames in the sum when ``w_photo`` > 0).
    """
    preps = observations if isinstance(observations, list) and observations and \
        isinstance(observations[0], FramePrep) else prepare_frames(
            observations.frames if isinstance(observations, ObservationSet) else observations, scene.tpl)
    sel = range(len(preps)) if frames is None else frames
    w = weights.as_dict()
    total = torch.zeros((), dtype=torch.float64)
    terms = {k: 0.0 for k in LOSS_NAMES}
    for k in sel:
        use_photo = weights.w_photo > 0 and (photo_frames is None or k in photo_frames)
        if not any(w[f"w_{n}"] > 0 for n in LOSS_NAMES if n != "photo") and not use_photo:
            continue
        L = frame_losses(scene, preps[k], use_photo, delta)
        for name, val in L.items():
            if w[f"w_{name}"] > 0:
                total = total + w[f"w_{name}"] * val.double()
            terms[name] += float(val.detach())
    return (total, terms) if return_terms else total


# --------------------------------------------------------------------------
# fitting loop
# --------------------------------------------------------------------------

@dataclass
class FitReport:
    history: list = field(default_factory=list)   # per-iteration dicts
    wall_time: float = 0.0
    checkpoint: str = ""
    stage1: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def losses(self, key: str = "total") -> np.ndarray:
        return np.array([h[key] for h in self.history])

    def to_dict(self) -> dict:
        return {"wall_time": self.wall_time, "checkpoint": self.checkpoint, "stage1": self.stage1,
                "config": self.config, "history": self.history}

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "fit_report.json").write_text(json.dumps(self.to_dict(), indent=1))
        cols = ["iteration", "total"] + list(LOSS_NAMES)
        with open(d / "losses.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for h in self.history:
                w.writerow(h)


def stage_one(observations: ObservationSet, tpl: SkinnedTemplate, cfg: RunConfig) -> InitResult:
    frames = observations.subset("train")
    if not cfg.factorized:
        frames = [Frame(f.index, f.camera.with_extrinsics(Rigid3.identity()), f.timestamp, f.rgb, f.mask,
                        f.embedding, f.keypoints, f.kp_visible) for f in frames]
    return init_root_poses(frames, tpl, stride=cfg.match_stride, iters=cfg.pnp_iters,
                           threshold_px=cfg.pnp_threshold_px, seed=cfg.seed)


def fit_scene(observations: ObservationSet, tpl: SkinnedTemplate, cfg: RunConfig | None = None,
              out_dir=None, log_every: int = 0, init: InitResult | None = None):
    """Stage one (root initialisation) then stage two (Adam on pose net, beta, texture)."""
    cfg = cfg or RunConfig()
    torch.manual_seed(cfg.seed)
    t0 = time.time()
    init = init or stage_one(observations, tpl, cfg)
    scene = SceneState.create(tpl, cfg, init.g_pnp)
    report = FitReport(stage1=init.to_dict(), config=cfg.to_dict())
    train = observations.subset("train")
    preps = prepare_frames(train, tpl, cfg.match_stride, cfg.chamfer_max_points)

    opt = torch.optim.Adam([
        {"params": list(scene.pose_model.parameters()), "lr": cfg.lr_pose},
        {"params": [scene.beta], "lr": cfg.lr_beta},
        {"params": list(scene.psi.parameters()), "lr": cfg.lr_psi},
    ], betas=(0.9, 0.999))
    base_lrs = [g["lr"] for g in opt.param_groups]
    weights = LossWeights.from_config(cfg)
    warm = LossWeights(**{**weights.as_dict(), "w_photo": 0.0})
    n_warm = int(round(cfg.warmup_frac * cfg.iterations))
    rng = np.random.default_rng(cfg.seed)
    ema = None
    ref = None
    if cfg.iterations:
        with torch.no_grad():
            ref = float(total_objective(scene, preps, weights, frames=list(range(min(cfg.minibatch, len(preps)))),
                                        delta=cfg.huber_delta, photo_frames={0})) / min(cfg.minibatch, len(preps))
    out = Path(out_dir) if out_dir is not None else None

    for it in range(cfg.iterations):
        batch = sorted(rng.choice(len(preps), size=min(cfg.minibatch, len(preps)), replace=False).tolist())
        w = warm if it < n_warm else weights
        photo = set(batch[:cfg.photo_frames]) if w.w_photo > 0 else set()
        decay = cfg.lr_final_factor ** (it / max(cfg.iterations - 1, 1))
        for g, lr in zip(opt.param_groups, base_lrs):
            g["lr"] = lr * decay
        opt.zero_grad(set_to_none=True)
        total, terms = total_objective(scene, preps, w, frames=batch, delta=cfg.huber_delta,
                                       photo_frames=photo, return_terms=True)
        total = total / len(batch)
        value = float(total.detach())
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite objective at iteration {it}")
        ema = value if ema is None else 0.9 * ema + 0.1 * value
        if ema > 10.0 * max(ref, 1e-12):
            raise DivergenceError(f"objective {ema:.4g} exceeds 10x its initial value {ref:.4g}")
        total.backward()
        opt.step()
        row = {"iteration": it, "total": value}
        row.update({k: terms[k] / len(batch) for k in LOSS_NAMES})
        report.history.append(row)
        if log_every and it % log_every == 0:
            print(" ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                  flush=True)
        if out is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            scene.save(out / f"checkpoint_{it + 1:06d}")

    report.wall_time = time.time() - t0
    if out is not None:
        report.checkpoint = str(scene.save(out / "scene"))
        report.save(out)
    return scene, report
