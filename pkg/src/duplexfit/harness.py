"""Synthetic scenes with known ground truth, dataset I/O and evaluation metrics."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .camera import Camera, Rigid3, geodesic_angle, look_at, project, rodrigues, so3_exp
from .config import ConfigError, RunConfig
from .data import Frame, ObservationSet
from .renderer import (pose_shells, posed_mesh, read_f32, render_embedding_map, render_shells,
                       render_silhouette, write_f32, write_png)
from .template import (PoseParams, ShapeParams, SkinnedTemplate, QuadrupedShape,
                       default_quadruped, lbs_deform, posed_keypoints)
from .geom import TriMesh


class EmptyUnion(UserWarning):
    pass


class ZeroMSE(UserWarning):
    pass


class NoVisibleVertex(UserWarning):
    pass


PSNR_CAP = 60.0


# --------------------------------------------------------------------------
# ground-truth texture
# --------------------------------------------------------------------------

class ProceduralTexture:
    """Canonical colour and opacity defined analytically around the template surface.

    Opacity rises sharply across the template's rest surface (sigmoid of a
    signed distance to the mesh, so images agree with the mesh silhouette);
    colour is a base coat, lighter belly, soft dark spots and a
    pale blaze on the muzzle.
    """

    def __init__(self, tpl: SkinnedTemplate, kind: str = "spots", seed: int = 0,
                 sigma_max: float = 400.0, width: float = 0.006):
        self.kind = kind
        self.seed = seed
        self.sigma_max = sigma_max
        self.width = width
        self.shape = QuadrupedShape(tpl.config)
        rng = np.random.default_rng(seed + 17)
        L = tpl.config["torso_length"]
        ty = self.shape.torso[0][1]
        n = 9
        self.spots = np.stack([rng.uniform(-0.9 * L, 0.9 * L, n), ty + rng.uniform(-0.02, 0.2, n),
                               rng.choice([-1, 1], n) * rng.uniform(0.05, 0.2, n)], 1)
        self.spot_radius = rng.uniform(0.07, 0.11, n)
        self.belly_y = ty - 0.05
        self.blaze = np.asarray(self.shape.snout[1], float)
        self._verts = tpl.rest_mesh.vertices
        self._normals = tpl.normals()
        self._tree = cKDTree(self._verts)

    def sdf(self, p: np.ndarray, k: int = 4) -> np.ndarray:
        """Signed distance to the rest mesh: inverse-distance blend of the tangent planes of the k nearest vertices."""
        d, idx = self._tree.query(p, k=k)
        w = 1.0 / np.maximum(d, 1e-9)
        w /= w.sum(1, keepdims=True)
        plane = ((p[:, None, :] - self._verts[idx]) * self._normals[idx]).sum(-1)
        return (w * plane).sum(1)

    def params(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "sigma_max": self.sigma_max, "width": self.width}

    def color(self, p: np.ndarray) -> np.ndarray:
        if self.kind == "red":
            return np.broadcast_to(np.array([0.9, 0.1, 0.1]), p.shape).copy()
        base = np.array([0.62, 0.42, 0.24])
        belly = np.array([0.88, 0.8, 0.66])
        dark = np.array([0.22, 0.14, 0.09])
        pale = np.array([0.95, 0.92, 0.86])
        wb = 1.0 / (1.0 + np.exp((p[:, 1] - self.belly_y) / 0.04))
        c = base * (1 - wb[:, None]) + belly * wb[:, None]
        d2 = ((p[:, None, :] - self.spots[None]) ** 2).sum(-1)
        ws = np.clip(np.exp(-d2 / (2 * self.spot_radius ** 2)).sum(1), 0, 1) * 0.9
        c = c * (1 - ws[:, None]) + dark * ws[:, None]
        wz = np.exp(-((p - self.blaze) ** 2).sum(-1) / (2 * 0.08 ** 2))
        return c * (1 - wz[:, None]) + pale * wz[:, None]

    def surface_image(self, tpl: SkinnedTemplate, buf, mask: np.ndarray) -> np.ndarray:
        """Colour of the first mesh hit per pixel, looked up at its canonical rest position."""
        H, W = mask.shape
        img = np.zeros((H, W, 3))
        if mask.any():
            tri = tpl.rest_mesh.vertices[tpl.faces[buf.face[mask]]]
            p = (buf.barycentric[mask][:, :, None] * tri).sum(1)
            img[mask] = self.color(p)
        return img

    def __call__(self, points: torch.Tensor, dirs: torch.Tensor):
        p = points.detach().cpu().double().numpy()
        sdf = self.sdf(p)
        sigma = self.sigma_max / (1.0 + np.exp(np.clip(sdf / self.width, -60, 60)))
        rgb = self.color(p)
        return (torch.as_tensor(sigma, dtype=points.dtype),
                torch.as_tensor(rgb, dtype=points.dtype))


# --------------------------------------------------------------------------
# scene generation
# --------------------------------------------------------------------------

def split_frames(n_frames: int, train_block: int = 15, test_block: int = 5):
    """Contiguous train blocks interleaved with test blocks: i is test iff i mod (a+b) >= a."""
    period = train_block + test_block
    test = [i for i in range(n_frames) if i % period >= train_block]
    train = [i for i in range(n_frames) if i % period < train_block]
    return train, test


def intrinsics_for(cfg: RunConfig):
    f = 0.5 * cfg.image_size / np.tan(np.deg2rad(cfg.fov_deg) / 2)
    c = 0.5 * cfg.image_size
    return f, c


def gt_motion(tpl: SkinnedTemplate, cfg: RunConfig, taus: np.ndarray):
    """Smooth procedural root wander plus trot gait and head turn."""
    J = tpl.n_joints
    names = tpl.joint_names
    amp = np.deg2rad(cfg.gait_amplitude_deg)
    head = np.deg2rad(cfg.head_turn_deg)
    poses = []
    for tau in taus:
        ph = 2 * np.pi * cfg.gait_cycles * tau
        ang = np.zeros((J, 3))
        for leg, phase in (("fl", 0.0), ("br", 0.0), ("fr", np.pi), ("bl", np.pi)):
            upper = names.index(f"{leg}_shoulder" if leg[0] == "f" else f"{leg}_hip")
            lower = names.index(f"{leg}_elbow" if leg[0] == "f" else f"{leg}_knee")
            ang[upper, 2] = amp * np.sin(ph + phase)
            bend = -1.0 if leg[0] == "f" else 1.0
            ang[lower, 2] = bend * 0.5 * amp * (1 + np.sin(ph + phase + np.pi / 2))
        ang[names.index("neck"), 1] = 0.5 * head * np.sin(2 * np.pi * tau)
        ang[names.index("head"), 1] = 0.5 * head * np.sin(2 * np.pi * tau)
        ang[names.index("head"), 2] = 0.15 * head * np.sin(4 * np.pi * tau)
        ang[names.index("tail_base"), 1] = 0.5 * amp * np.sin(2 * ph)
        ang[names.index("spine"), 1] = 0.15 * amp * np.sin(ph)
        yaw = np.deg2rad(8.0) * np.sin(2 * np.pi * tau)
        R = so3_exp(np.array([0.0, yaw, 0.0]))
        t = cfg.root_drift * np.array([np.sin(2 * np.pi * tau), 0.0, np.cos(2 * np.pi * tau) - 1.0])
        poses.append(PoseParams.from_rigid(Rigid3(R, t), ang[1:]))
    return poses


def orbit_cameras(cfg: RunConfig, rng: np.random.Generator, target=(0.1, 0.5, 0.0)):
    f, c = intrinsics_for(cfg)
    T = cfg.n_frames
    cams = []
    phi0 = np.deg2rad(30.0)
    for i in range(T):
        phi = phi0 + np.deg2rad(cfg.orbit_degrees) * i / T
        eye = np.array([cfg.orbit_radius * np.cos(phi), cfg.orbit_height, cfg.orbit_radius * np.sin(phi)])
        eye = eye + rng.normal(0, cfg.camera_jitter_trans, 3)
        g = look_at(eye, target)
        jit = so3_exp(rng.normal(0, np.deg2rad(cfg.camera_jitter_deg), 3))
        g = Rigid3(jit, np.zeros(3)) @ g
        cams.append(Camera(f, f, c, c, cfg.image_size, cfg.image_size, g, i / max(T - 1, 1)))
    return cams


@dataclass
class SyntheticScene:
    tpl: SkinnedTemplate
    beta: np.ndarray
    poses: list
    texture: ProceduralTexture
    cameras: list
    timestamps: np.ndarray
    config: RunConfig
    seed: int
    gt_keypoints: np.ndarray = None   # (T, K, 2) exact projections
    gt_visible: np.ndarray = None     # (T, K)

    def posed_vertices(self, i: int) -> np.ndarray:
        with torch.no_grad():
            return lbs_deform(self.tpl, self.beta, self.poses[i], dtype=torch.float64).numpy()


def _visibility(tpl, posed, cam, buf, mask, kp_uv, kp_depth):
    """Surface keypoints: depth test against the hit buffer; internal ones: inside the mask."""
    H, W = mask.shape
    vis = np.zeros(len(kp_uv), bool)
    surf = set(np.asarray(tpl.surface_keypoints).tolist())
    for k, (uv, z) in enumerate(zip(kp_uv, kp_depth)):
        c, r = int(np.floor(uv[0])), int(np.floor(uv[1]))
        if not (0 <= c < W and 0 <= r < H) or z <= 0:
            continue
        if k in surf:
            vis[k] = bool(mask[r, c]) and z <= buf.depth[r, c] + 0.03
        else:
            vis[k] = bool(mask[r, c])
    return vis


def generate_scene(config: RunConfig | None = None, seed: int | None = None, out_dir=None,
                   tpl: SkinnedTemplate | None = None):
    """Render a synthetic observation set from procedural ground truth."""
    cfg = config or RunConfig()
    if not isinstance(cfg, RunConfig):
        raise ConfigError("<config>", "expected a RunConfig")
    seed = cfg.seed if seed is None else seed
    tpl = tpl or default_quadruped(cfg.grid_spacing)
    rng = np.random.default_rng(seed)
    T = cfg.n_frames
    taus = np.arange(T) / max(T - 1, 1)
    beta = rng.normal(0, cfg.shape_std, tpl.d_beta)
    poses = gt_motion(tpl, cfg, taus)
    cams = orbit_cameras(cfg, rng)
    tex = ProceduralTexture(tpl, cfg.texture, seed)
    train, test = split_frames(T, *cfg.split_blocks)

    E = tpl.embedding_atlas
    escale = float(E.std())
    frames, gt_kps, gt_vis = [], [], []
    for i in range(T):
        cam = cams[i]
        theta = poses[i]
        emb, mask, buf = render_embedding_map(cam, tpl, beta, theta)
        shells = pose_shells(tpl, beta, theta, cfg.epsilon, torch.float64)
        rgb = tex.surface_image(tpl, buf, mask).astype(np.float32)
        # descriptor noise and outliers
        fg = np.flatnonzero(mask.ravel())
        e = emb.reshape(-1, E.shape[1])
        if cfg.emb_noise > 0:
            e[fg] += rng.normal(0, cfg.emb_noise * escale, (len(fg), E.shape[1]))
        n_out = int(round(cfg.emb_outlier_frac * len(fg)))
        if n_out:
            pick = rng.choice(fg, n_out, replace=False)
            e[pick] = E.mean(0) + E.std(0) * rng.normal(0, 1, (n_out, E.shape[1]))
        emb = e.reshape(emb.shape).astype(np.float32)
        # keypoints
        posed = torch.as_tensor(shells.posed_body_t.detach().numpy())
        kp3 = posed_keypoints(tpl, posed).numpy()
        pr = project(cam, kp3)
        vis = _visibility(tpl, posed, cam, buf, mask, pr.uv, pr.depth)
        kp = pr.uv + rng.normal(0, cfg.kp_noise_px, pr.uv.shape)
        gt_kps.append(pr.uv)
        gt_vis.append(vis)
        frames.append(Frame(i, cam, float(taus[i]), rgb, mask, emb, kp, vis))

    scene = SyntheticScene(tpl, beta, poses, tex, cams, taus, cfg, seed,
                           np.stack(gt_kps), np.stack(gt_vis))
    obs = ObservationSet(frames, train, test, {"config": cfg.to_dict(), "seed": seed})
    if out_dir is not None:
        save_dataset(out_dir, scene, obs)
    return scene, obs


# --------------------------------------------------------------------------
# dataset directory
# --------------------------------------------------------------------------

def save_dataset(out_dir, scene: SyntheticScene, obs: ObservationSet):
    d = Path(out_dir)
    for sub in ("cams", "rgb", "mask", "emb", "kp", "gt"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    meta = {"config": scene.config.to_dict(), "seed": scene.seed, "n_frames": len(obs),
            "train": obs.train, "test": obs.test,
            "timestamps": [f.timestamp for f in obs.frames],
            "resolution": list(obs.resolution), "template": scene.tpl.config}
    (d / "scene.json").write_text(json.dumps(meta, indent=1))
    for f in obs.frames:
        name = f"{f.index:04d}"
        f.camera.save(d / "cams" / f"{name}.json")
        write_png(d / "rgb" / f"{name}.png", f.rgb)
        write_f32(d / "rgb" / f"{name}.f32", f.rgb)
        write_png(d / "mask" / f"{name}.png", f.mask.astype(float))
        write_f32(d / "emb" / f"{name}.f32", f.embedding)
        (d / "kp" / f"{name}.json").write_text(json.dumps({
            "names": list(scene.tpl.keypoint_names),
            "keypoints": np.asarray(f.keypoints).tolist(),
            "visible": np.asarray(f.kp_visible).tolist()}))
    gt = {"beta": scene.beta.tolist(),
          "poses": [{"root": p.root.to_dict(), "joint_angles": np.asarray(p.joint_angles).tolist()}
                    for p in scene.poses],
          "texture": scene.texture.params(),
          "keypoints": scene.gt_keypoints.tolist(), "visible": scene.gt_visible.tolist()}
    (d / "gt" / "ground_truth.json").write_text(json.dumps(gt))


def load_dataset(data_dir, tpl: SkinnedTemplate | None = None):
    """Read an observation set; ground truth is returned separately (None if absent)."""
    d = Path(data_dir)
    meta = json.loads((d / "scene.json").read_text())
    frames = []
    for i in range(meta["n_frames"]):
        name = f"{i:04d}"
        cam = Camera.load(d / "cams" / f"{name}.json")
        rgb = read_f32(d / "rgb" / f"{name}.f32")
        emb = read_f32(d / "emb" / f"{name}.f32")
        from PIL import Image
        mask = np.asarray(Image.open(d / "mask" / f"{name}.png")) > 127
        kp = json.loads((d / "kp" / f"{name}.json").read_text())
        frames.append(Frame(i, cam, float(meta["timestamps"][i]), rgb, mask, emb,
                            np.asarray(kp["keypoints"], float), np.asarray(kp["visible"], bool)))
    obs = ObservationSet(frames, list(meta["train"]), list(meta["test"]),
                         {"config": meta["config"], "seed": meta["seed"]})
    gt = None
    gpath = d / "gt" / "ground_truth.json"
    if gpath.exists():
        g = json.loads(gpath.read_text())
        from .template import build_synthetic_quadruped
        tpl = tpl or build_synthetic_quadruped(meta["template"])
        cfg = RunConfig(**meta["config"])
        poses = [PoseParams.from_rigid(Rigid3.from_dict(p["root"]), p["joint_angles"]) for p in g["poses"]]
        tex = ProceduralTexture(tpl, g["texture"]["kind"], g["texture"]["seed"],
                                g["texture"]["sigma_max"], g["texture"]["width"])
        gt = SyntheticScene(tpl, np.asarray(g["beta"]), poses, tex, [f.camera for f in frames],
                            np.asarray(meta["timestamps"]), cfg, meta["seed"],
                            np.asarray(g["keypoints"]), np.asarray(g["visible"], bool))
    return obs, gt


# --------------------------------------------------------------------------
# scene adapters used by evaluation
# --------------------------------------------------------------------------

class GroundTruthScene:
    """Evaluation adapter exposing ground truth through the fitted-scene interface."""

    def __init__(self, scene: SyntheticScene):
        self.scene = scene

    def frame_camera(self, frame: Frame) -> Camera:
        return frame.camera

    def frame_pose(self, frame: Frame) -> PoseParams:
        return self.scene.poses[frame.index]

    def frame_vertices(self, frame: Frame) -> np.ndarray:
        return self.scene.posed_vertices(frame.index)

    def frame_rgb(self, frame: Frame) -> np.ndarray:
        s = self.scene
        mask, buf = render_silhouette(frame.camera, posed_mesh(s.tpl, s.beta, s.poses[frame.index]))
        return s.texture.surface_image(s.tpl, buf, mask)


class FittedScene:
    """Evaluation adapter over a fitted ``SceneState``."""

    def __init__(self, state, render_seed: int = 0):
        self.state = state
        self.render_seed = render_seed

    def frame_camera(self, frame: Frame) -> Camera:
        return self.state.camera(frame)

    def frame_pose(self, frame: Frame) -> PoseParams:
        with torch.no_grad():
            return self.state.pose(frame.timestamp).detach()

    def frame_vertices(self, frame: Frame) -> np.ndarray:
        with torch.no_grad():
            return self.state.posed(frame.timestamp)[0].numpy()

    def frame_rgb(self, frame: Frame) -> np.ndarray:
        with torch.no_grad():
            r = self.state.render(frame, frame.timestamp, seed=self.render_seed + frame.index)
        return r.rgb.permute(1, 2, 0).double().numpy()


def as_eval_scene(scene):
    if hasattr(scene, "frame_vertices"):
        return scene
    if isinstance(scene, SyntheticScene):
        return GroundTruthScene(scene)
    return FittedScene(scene)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _worst5(values, higher_is_better=True):
    v = np.sort(np.asarray(values, float))
    if not higher_is_better:
        v = v[::-1]
    k = max(1, int(np.floor(0.05 * len(v))))
    return float(v[:k].mean())


def metric_iou(pred_masks, gt_masks):
    """Mean per-frame IoU and the mean over the worst 5% of frames (at least one)."""
    per = []
    for p, g in zip(pred_masks, gt_masks):
        p = np.asarray(p, bool)
        g = np.asarray(g, bool)
        if p.shape != g.shape:
            raise ValueError("mask shapes differ")
        union = (p | g).sum()
        if union == 0:
            warnings.warn("empty union; frame IoU set to 1", EmptyUnion)
            per.append(1.0)
        else:
            per.append((p & g).sum() / union)
    per = np.asarray(per, float)
    return float(per.mean()), _worst5(per), per


def metric_psnr(pred_rgb, gt_rgb, masks):
    """Masked PSNR per frame (capped at 60 dB), mean and worst-5% mean."""
    per = []
    for p, g, m in zip(pred_rgb, gt_rgb, masks):
        p = np.asarray(p, float)
        g = np.asarray(g, float)
        m = np.asarray(m, bool)
        if p.shape != g.shape:
            raise ValueError("image shapes differ")
        if p.ndim == 3 and p.shape[0] == 3 and p.shape[-1] != 3:
            p, g = np.moveaxis(p, 0, -1), np.moveaxis(g, 0, -1)
        sel = p[m] - g[m] if m.any() else np.zeros(1)
        mse = float(np.mean(sel ** 2))
        if mse <= 10 ** (-PSNR_CAP / 10):
            if mse == 0:
                warnings.warn("zero MSE; PSNR capped", ZeroMSE)
            per.append(PSNR_CAP)
        else:
            per.append(10 * np.log10(1.0 / mse))
    per = np.asarray(per, float)
    return float(per.mean()), _worst5(per), per


def visible_vertices(cam: Camera, vertices: np.ndarray, faces: np.ndarray, tol: float = 0.02):
    """Vertices inside the image whose depth matches the rasterized first hit."""
    mask, buf = render_silhouette(cam, TriMesh(vertices, faces))
    pr = project(cam, vertices)
    H, W = mask.shape
    c = np.floor(pr.uv[:, 0]).astype(int)
    r = np.floor(pr.uv[:, 1]).astype(int)
    inside = (c >= 0) & (c < W) & (r >= 0) & (r < H) & pr.in_front
    vis = np.zeros(len(vertices), bool)
    idx = np.flatnonzero(inside)
    vis[idx] = pr.depth[idx] <= buf.depth[r[idx], c[idx]] + tol
    return vis, pr.uv


def metric_err_track(first_frame_kps, gt_kps_per_frame, scene, cams, frames=None,
                     gt_visible=None, faces=None, keypoint_ids=None):
    """Keypoint drift of first-frame-paired vertices, as a fraction of the image diagonal.

    ``scene`` is an evaluation adapter (or fitted SceneState) and ``frames``
    the frames matching ``gt_kps_per_frame``. ``keypoint_ids`` restricts the
    evaluation to a subset of keypoints (default: all).
    """
    ev = as_eval_scene(scene)
    gt = np.asarray(gt_kps_per_frame, float)
    if len(gt) < 2:
        raise ValueError("err_track needs at least two frames")
    if faces is None:
        faces = ev.state.tpl.faces if isinstance(ev, FittedScene) else ev.scene.tpl.faces
    first = np.asarray(first_frame_kps, float)
    V0 = ev.frame_vertices(frames[0])
    vis, uv0 = visible_vertices(cams[0], V0, faces)
    pairs = np.full(len(first), -1)
    cand = np.flatnonzero(vis)
    use = np.zeros(len(first), bool)
    use[np.arange(len(first)) if keypoint_ids is None else np.asarray(keypoint_ids, int)] = True
    for k, kp in enumerate(first):
        if not use[k] or (gt_visible is not None and not gt_visible[0][k]):
            continue
        if len(cand) == 0:
            warnings.warn(f"keypoint {k}: no visible vertex", NoVisibleVertex)
            continue
        pairs[k] = cand[np.argmin(((uv0[cand] - kp) ** 2).sum(1))]
    errs = []
    for t in range(1, len(gt)):
        Vt = ev.frame_vertices(frames[t])
        uv = project(cams[t], Vt).uv
        diag = cams[t].diagonal
        for k in range(len(first)):
            if pairs[k] < 0 or (gt_visible is not None and not gt_visible[t][k]):
                continue
            errs.append(np.linalg.norm(uv[pairs[k]] - gt[t, k]) / diag)
    return float(np.mean(errs)) if errs else float("nan")


def joint_angle_error_deg(pred_poses, gt_poses) -> float:
    """Mean geodesic angle between predicted and true local joint rotations (degrees)."""
    errs = []
    for p, g in zip(pred_poses, gt_poses):
        a = torch.as_tensor(np.asarray(p.joint_angles.detach() if isinstance(p.joint_angles, torch.Tensor)
                                       else p.joint_angles, float))
        b = torch.as_tensor(np.asarray(g.joint_angles.detach() if isinstance(g.joint_angles, torch.Tensor)
                                       else g.joint_angles, float))
        Ra, Rb = rodrigues(a).numpy(), rodrigues(b).numpy()
        errs.extend(geodesic_angle(x, y) for x, y in zip(Ra, Rb))
    return float(np.rad2deg(np.mean(errs)))


@dataclass
class MetricsReport:
    split: str
    frames: list
    iou: float
    iou_w5: float
    psnr: float
    psnr_w5: float
    photo_proxy: float
    err_track: float
    joint_angle_deg: float = float("nan")
    per_frame: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("split", "frames", "iou", "iou_w5", "psnr", "psnr_w5",
                                               "photo_proxy", "err_track", "joint_angle_deg", "per_frame")}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def evaluate(scene, observations: ObservationSet, split: str = "test", gt: SyntheticScene | None = None,
             out_dir=None) -> MetricsReport:
    """Render the selected split and compute every metric.

    IoU compares the posed mesh silhouette with the observed masks; PSNR is
    taken inside the observed masks; err_track uses the exact ground-truth
    surface keypoints when ``gt`` is given (otherwise the observed detections).
    The joint-angle error uses every frame of the sequence.
    """
    from .fit import loss_photo

    ev = as_eval_scene(scene)
    frames = observations.subset(split)
    idx = [f.index for f in frames]
    tpl = ev.state.tpl if isinstance(ev, FittedScene) else ev.scene.tpl
    pred_masks, pred_rgbs, photo = [], [], []
    cams = [ev.frame_camera(f) for f in frames]
    for f, cam in zip(frames, cams):
        V = ev.frame_vertices(f)
        m, _ = render_silhouette(cam, TriMesh(V, tpl.faces))
        rgb = ev.frame_rgb(f)
        pred_masks.append(m)
        pred_rgbs.append(rgb)
        photo.append(float(loss_photo(f, torch.as_tensor(rgb))))
    iou, iou5, iou_per = metric_iou(pred_masks, [f.mask for f in frames])
    psnr, psnr5, psnr_per = metric_psnr(pred_rgbs, [f.rgb for f in frames], [f.mask for f in frames])
    if gt is not None:
        kps = gt.gt_keypoints[idx]
        gvis = gt.gt_visible[idx]
    else:
        kps = np.stack([f.keypoints for f in frames])
        gvis = np.stack([f.kp_visible for f in frames])
    err = float("nan")
    if len(frames) >= 2:
        err = metric_err_track(kps[0], kps, ev, cams, frames, gvis, tpl.faces, tpl.surface_keypoints)
    jerr = float("nan")
    if gt is not None:
        all_frames = observations.subset("all")
        jerr = joint_angle_error_deg([ev.frame_pose(f) for f in all_frames], gt.poses)
    report = MetricsReport(split, idx, iou, iou5, psnr, psnr5, float(np.mean(photo)), err, jerr,
                           {"iou": iou_per.tolist(), "psnr": psnr_per.tolist(), "photo": photo})
    if out_dir is not None:
        d = Path(out_dir)
        (d / "frames").mkdir(parents=True, exist_ok=True)
        for f, m, rgb in zip(frames, pred_masks, pred_rgbs):
            write_png(d / "frames" / f"{f.index:04d}_rgb.png", rgb)
            write_png(d / "frames" / f"{f.index:04d}_mask.png", m.astype(float))
        report.save(d / f"metrics_{split}.json")
    return report
