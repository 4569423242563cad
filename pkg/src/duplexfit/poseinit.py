"""Root-pose initialization: dense descriptor matches, PnP-RANSAC per frame and
one collective rigid alignment shared by all frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, Rigid3, geodesic_angle, project_to_so3, so3_exp, so3_log
from .template import PoseParams, SkinnedTemplate, embedding_nn


class EmptyMask(ValueError):
    pass


class TooFewPoints(ValueError):
    pass


class DegenerateConfiguration(RuntimeError):
    pass


class NoValidFrames(RuntimeError):
    pass


@dataclass(frozen=True)
class Correspondence2D3D:
    pixel: tuple
    vertex_index: int
    descriptor_distance: float


class CorrespondenceSet:
    """Array-backed sequence of ``Correspondence2D3D``."""

    def __init__(self, pixels, vertex_index, descriptor_distance):
        self.pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
        self.vertex_index = np.asarray(vertex_index, dtype=np.int64).reshape(-1)
        self.descriptor_distance = np.asarray(descriptor_distance, dtype=np.float64).reshape(-1)

    def __len__(self):
        return len(self.vertex_index)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return CorrespondenceSet(self.pixels[i], self.vertex_index[i], self.descriptor_distance[i])
        return Correspondence2D3D(tuple(self.pixels[i]), int(self.vertex_index[i]),
                                  float(self.descriptor_distance[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def filtered(self, quantile: float = 0.9) -> "CorrespondenceSet":
        """Drop matches whose descriptor distance exceeds the given quantile."""
        if len(self) == 0:
            return self
        cut = np.quantile(self.descriptor_distance, quantile)
        return self[self.descriptor_distance <= cut]


def as_correspondence_set(corr) -> CorrespondenceSet:
    if isinstance(corr, CorrespondenceSet):
        return corr
    corr = list(corr)
    return CorrespondenceSet([c.pixel for c in corr], [c.vertex_index for c in corr],
                             [c.descriptor_distance for c in corr])


def match_dense(embedding_map, mask, tpl: SkinnedTemplate, stride: int = 4) -> CorrespondenceSet:
    """Nearest-descriptor vertex for every ``stride``-th foreground pixel (both axes)."""
    emb = np.asarray(embedding_map)
    mask = np.asarray(mask, bool)
    if emb.shape[:2] != mask.shape:
        raise ValueError("embedding map and mask differ in size")
    if not mask.any():
        raise EmptyMask("mask has no foreground")
    sub = np.zeros_like(mask)
    sub[::stride, ::stride] = True
    rows, cols = np.nonzero(mask & sub)
    if len(rows) == 0:
        return CorrespondenceSet(np.zeros((0, 2)), [], [])
    idx, dist = embedding_nn(tpl, emb[rows, cols], return_distance=True)
    return CorrespondenceSet(np.stack([cols + 0.5, rows + 0.5], -1), idx, dist)


# --------------------------------------------------------------------------
# PnP
# --------------------------------------------------------------------------

@dataclass
class PnPResult:
    extrinsics: Rigid3
    inlier_ratio: float
    reprojection_rmse: float
    inliers: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = self.extrinsics.to_dict()
        d.update(inlier_ratio=self.inlier_ratio, reprojection_rmse=self.reprojection_rmse)
        return d


def _intrinsics(intr):
    if isinstance(intr, Camera):
        return intr.K
    return np.asarray(intr, dtype=np.float64).reshape(3, 3)


def _dlt(xn, X):
    """Pose from >= 6 normalized image points via the linear 3x4 solve."""
    n = len(X)
    A = np.zeros((2 * n, 12))
    Xh = np.concatenate([X, np.ones((n, 1))], 1)
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xn[:, :1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xn[:, 1:] * Xh
    _, s, vt = np.linalg.svd(A)
    if s[-2] <= 1e-9 * s[0]:
        return None
    P = vt[-1].reshape(3, 4)
    M = P[:, :3]
    scale = np.cbrt(np.linalg.det(M))
    if abs(scale) < 1e-12:
        return None
    P = P / scale
    R = project_to_so3(P[:, :3])
    t = P[:, 3]
    # cheirality: most points should be in front
    if np.median((X @ R.T + t)[:, 2]) < 0:
        return None
    return R, t


def _reproject(K, R, t, X):
    xc = X @ R.T + t
    z = np.where(xc[:, 2] > 1e-9, xc[:, 2], 1e-9)
    u = K[0, 0] * xc[:, 0] / z + K[0, 2]
    v = K[1, 1] * xc[:, 1] / z + K[1, 2]
    return np.stack([u, v], -1), xc[:, 2]


def _residual_errors(K, R, t, X, uv):
    proj, z = _reproject(K, R, t, X)
    err = np.linalg.norm(proj - uv, axis=1)
    err[z <= 0] = np.inf
    return err


def refine_pose_gn(K, R, t, X, uv, iters: int = 20):
    """Gauss-Newton (with Levenberg damping) on pixel reprojection error.

    Left-multiplied se(3) update: R <- exp(w) R, t <- exp(w) t + v.
    """
    lam = 1e-6
    def cost(R_, t_):
        p, _ = _reproject(K, R_, t_, X)
        return float(((p - uv) ** 2).sum())
    c = cost(R, t)
    for _ in range(iters):
        xc = X @ R.T + t
        z = np.where(np.abs(xc[:, 2]) > 1e-9, xc[:, 2], 1e-9)
        fx, fy = K[0, 0], K[1, 1]
        # d(u,v)/d xc
        J_proj = np.zeros((len(X), 2, 3))
        J_proj[:, 0, 0] = fx / z
        J_proj[:, 0, 2] = -fx * xc[:, 0] / z ** 2
        J_proj[:, 1, 1] = fy / z
        J_proj[:, 1, 2] = -fy * xc[:, 1] / z ** 2
        # d xc / d(w, v): -[xc]x for rotation, I for translation
        hx = np.zeros((len(X), 3, 3))
        hx[:, 0, 1], hx[:, 0, 2] = -xc[:, 2], xc[:, 1]
        hx[:, 1, 0], hx[:, 1, 2] = xc[:, 2], -xc[:, 0]
        hx[:, 2, 0], hx[:, 2, 1] = -xc[:, 1], xc[:, 0]
        J = np.concatenate([J_proj @ (-hx), J_proj], axis=2).reshape(-1, 6)
        p, _ = _reproject(K, R, t, X)
        r = (p - uv).reshape(-1)
        H = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(10):
            try:
                delta = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = so3_exp(delta[:3])
            R_new, t_new = dR @ R, dR @ t + delta[3:]
            c_new = cost(R_new, t_new)
            if c_new <= c:
                R, t, c = R_new, t_new, c_new
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or np.linalg.norm(delta) < 1e-14:
            break
    return project_to_so3(R), t


def pnp_ransac(correspondences, intrinsics, canonical_points, iters: int = 200,
               threshold_px: float = 3.0, seed: int = 0) -> PnPResult:
    """Robust canonical->camera pose from 2D-3D matches.

    Minimal samples of 6 points are solved by DLT; the best consensus set
    is refit with Gauss-Newton and the inliers re-evaluated once.
    """
    corr = as_correspondence_set(correspondences)
    n = len(corr)
    if n < 6:
        raise TooFewPoints(f"{n} correspondences, need at least 6")
    # canonical ordering makes the result independent of input order
    order = np.lexsort((corr.pixels[:, 1], corr.pixels[:, 0], corr.vertex_index))
    uv = corr.pixels[order]
    X = np.asarray(canonical_points, dtype=np.float64)[corr.vertex_index[order]]
    K = _intrinsics(intrinsics)
    Kinv = np.linalg.inv(K)
    xn = (np.concatenate([uv, np.ones((n, 1))], 1) @ Kinv.T)[:, :2]
    rng = np.random.default_rng(seed)

    best = None
    best_count = -1
    for _ in range(iters):
        sample = rng.choice(n, size=6, replace=False)
        sol = _dlt(xn[sample], X[sample])
        if sol is None:
            continue
        err = _residual_errors(K, *sol, X, uv)
        count = int((err < threshold_px).sum())
        if count > best_count:
            best, best_count = sol, count
    if best is None:
        raise DegenerateConfiguration("no non-degenerate minimal sample found")
    inl = _residual_errors(K, *best, X, uv) < threshold_px
    R, t = best
    for _ in range(2):
        if inl.sum() >= 6:
            sol = _dlt(xn[inl], X[inl])
            if sol is not None and (_residual_errors(K, *sol, X, uv) < threshold_px).sum() >= inl.sum():
                R, t = sol
            R, t = refine_pose_gn(K, R, t, X[inl], uv[inl])
        new_inl = _residual_errors(K, R, t, X, uv) < threshold_px
        if new_inl.sum() < inl.sum() * 0.9:
            break
        inl = new_inl
    err = _residual_errors(K, R, t, X, uv)
    rmse = float(np.sqrt(np.mean(err[inl] ** 2))) if inl.any() else float("inf")
    inliers = np.zeros(n, bool)
    inliers[order[inl]] = True
    return PnPResult(Rigid3(R, t), float(inl.mean()), rmse, inliers)


# --------------------------------------------------------------------------
# collective refinement
# --------------------------------------------------------------------------

def _chordal_mean(Rs):
    return project_to_so3(np.mean(Rs, axis=0))


def collective_refine(pnp_results, sfm_cams, scale: float = 1.0, min_inlier_ratio: float = 0.1,
                      inlier_angle_deg: float = 10.0, inlier_trans: float = 0.1) -> Rigid3:
    """One canonical->world transform consistent with the per-frame PnP poses.

    Candidates g_t = (g_cam_t)^-1 @ pnp_t; the medoid under
    ``angle + |dt| / scale`` is averaged with every candidate within
    (``inlier_angle_deg``, ``inlier_trans * scale``) of it.
    """
    cands = []
    for res, cam in zip(pnp_results, sfm_cams):
        if res is None or res.inlier_ratio < min_inlier_ratio:
            continue
        g_cam = cam.extrinsics if isinstance(cam, Camera) else cam
        cands.append(g_cam.inverse() @ res.extrinsics)
    if not cands:
        raise NoValidFrames("no frame produced a usable PnP estimate")
    Rs = np.stack([c.rotation for c in cands])
    ts = np.stack([c.translation for c in cands])
    n = len(cands)
    cost = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            c = geodesic_angle(Rs[i], Rs[j]) + np.linalg.norm(ts[i] - ts[j]) / scale
            cost[i, j] = cost[j, i] = c
    m = int(np.argmin(cost.sum(1)))
    keep = [j for j in range(n)
            if geodesic_angle(Rs[m], Rs[j]) <= np.deg2rad(inlier_angle_deg)
            and np.linalg.norm(ts[m] - ts[j]) <= inlier_trans * scale]
    return Rigid3(_chordal_mean(Rs[keep]), ts[keep].mean(0))


@dataclass
class InitResult:
    g_pnp: Rigid3
    poses: list
    pnp: list
    n_correspondences: list

    def to_dict(self) -> dict:
        return {
            "g_pnp": self.g_pnp.to_dict(),
            "frames": [
                {"root": p.root.to_dict(),
                 "n_correspondences": n,
                 "pnp": None if r is None else r.to_dict()}
                for p, r, n in zip(self.poses, self.pnp, self.n_correspondences)
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def init_root_poses(observations, tpl: SkinnedTemplate, stride: int = 2, iters: int = 200,
                    threshold_px: float = 3.0, seed: int = 0, frames=None) -> InitResult:
    """match_dense -> pnp_ransac -> collective_refine; every frame gets the same root."""
    frames = list(observations.frames if frames is None and hasattr(observations, "frames")
                  else (frames if frames is not None else observations))
    results, counts = [], []
    for k, fr in enumerate(frames):
        n_corr, res = 0, None
        try:
            corr = match_dense(fr.embedding, fr.mask, tpl, stride).filtered(0.9)
            n_corr = len(corr)
            res = pnp_ransac(corr, fr.camera, tpl.rest_mesh.vertices, iters, threshold_px, seed=seed + k)
        except (EmptyMask, TooFewPoints, DegenerateConfiguration):
            pass
        counts.append(n_corr)
        results.append(res)
    scale = tpl.rest_mesh.bounding_sphere_radius()
    g = collective_refine(results, [f.camera for f in frames], scale=scale)
    J = tpl.n_joints
    poses = [PoseParams.from_rigid(g, np.zeros((J - 1, 3))) for _ in frames]
    return InitResult(g, poses, results, counts)
