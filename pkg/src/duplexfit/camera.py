"""Pinhole cameras, SE(3) algebra, projection and camera/body motion factorization.

Extrinsics are world->camera throughout. A body root transform maps
canonical template space to world, so canonical->camera is ``g_sfm @ g0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch


# --------------------------------------------------------------------------
# rotations (numpy)
# --------------------------------------------------------------------------

def hat(w):
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    th = np.linalg.norm(w)
    K = hat(w)
    if th < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return np.eye(3) + np.sin(th) / th * K + (1 - np.cos(th)) / th**2 * K @ K


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(c)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < 1e-8:
        return 0.5 * v
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        if v @ axis < 0:
            axis = -axis
        return th * axis
    return th / (2.0 * np.sin(th)) * v


def project_to_so3(M) -> np.ndarray:
    """Nearest rotation in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def geodesic_angle(Ra, Rb) -> float:
    """Rotation angle of Ra^T Rb in radians."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# --------------------------------------------------------------------------
# rotations (torch, differentiable)
# --------------------------------------------------------------------------

def _hat_t(w):
    z = torch.zeros_like(w[..., 0])
    return torch.stack([
        torch.stack([z, -w[..., 2], w[..., 1]], -1),
        torch.stack([w[..., 2], z, -w[..., 0]], -1),
        torch.stack([-w[..., 1], w[..., 0], z], -1),
    ], -2)


def rodrigues(w: torch.Tensor) -> torch.Tensor:
    """Axis-angle (..., 3) -> rotation (..., 3, 3); smooth through zero."""
    th2 = (w * w).sum(-1)
    small = th2 < 1e-8
    th2_safe = torch.where(small, torch.ones_like(th2), th2)
    th = torch.sqrt(th2_safe)
    a = torch.where(small, 1 - th2 / 6 + th2 * th2 / 120, torch.sin(th) / th)
    b = torch.where(small, 0.5 - th2 / 24 + th2 * th2 / 720, (1 - torch.cos(th)) / th2_safe)
    K = _hat_t(w)
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand(K.shape)
    return eye + a[..., None, None] * K + b[..., None, None] * (K @ K)


def se3_exp(xi: torch.Tensor):
    """(..., 6) twist (rotation first, translation second) -> (R, t)."""
    w, v = xi[..., :3], xi[..., 3:]
    th2 = (w * w).sum(-1)
    small = th2 < 1e-8
    th2_safe = torch.where(small, torch.ones_like(th2), th2)
    th = torch.sqrt(th2_safe)
    b = torch.where(small, 0.5 - th2 / 24 + th2 * th2 / 720, (1 - torch.cos(th)) / th2_safe)
    c = torch.where(small, 1.0 / 6 - th2 / 120 + th2 * th2 / 5040,
                    (th - torch.sin(th)) / (th2_safe * th))
    K = _hat_t(w)
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device).expand(K.shape)
    V = eye + b[..., None, None] * K + c[..., None, None] * (K @ K)
    return rodrigues(w), (V @ v[..., None])[..., 0]


# --------------------------------------------------------------------------
# SE(3)
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rigid3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ValueError("rotation is not in SO(3)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Rigid3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Rigid3":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def exp(cls, xi) -> "Rigid3":
        R, t = se3_exp(torch.as_tensor(np.asarray(xi, dtype=np.float64)))
        return cls(R.numpy(), t.numpy())

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: "Rigid3") -> "Rigid3":
        return Rigid3(self.rotation @ other.rotation,
                      self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Rigid3":
        Rt = self.rotation.T
        return Rigid3(Rt, -Rt @ self.translation)

    def apply(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def to_dict(self) -> dict:
        return {"R": self.rotation.ravel().tolist(), "t": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Rigid3":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), d["t"])

    def __repr__(self):
        return f"Rigid3(rotvec={np.round(so3_log(self.rotation), 6)}, t={np.round(self.translation, 6)})"


def compose_extrinsics(g_sfm: Rigid3, g0: Rigid3) -> Rigid3:
    """Render extrinsics g_t = g_cam @ g0 (canonical -> camera)."""
    return g_sfm @ g0


def rigid_distance(a: Rigid3, b: Rigid3):
    return geodesic_angle(a.rotation, b.rotation), float(np.linalg.norm(a.translation - b.translation))


# --------------------------------------------------------------------------
# Camera
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    extrinsics: Rigid3 = None
    timestamp: float = 0.0

    def __post_init__(self):
        if self.extrinsics is None:
            object.__setattr__(self, "extrinsics", Rigid3.identity())
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def projection_matrix(self) -> np.ndarray:
        return self.K @ self.extrinsics.matrix()[:3]

    @property
    def center(self) -> np.ndarray:
        return -self.extrinsics.rotation.T @ self.extrinsics.translation

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.height, self.width))

    def with_extrinsics(self, g: Rigid3) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.height, self.width, g, self.timestamp)

    def to_dict(self) -> dict:
        return {"R": self.extrinsics.rotation.ravel().tolist(),
                "t": self.extrinsics.translation.tolist(),
                "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "H": self.height, "W": self.width, "timestamp": self.timestamp}

    @classmethod
    def from_dict(cls, d) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["H"]), int(d["W"]), Rigid3.from_dict(d), float(d.get("timestamp", 0.0)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Camera":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class Projection(NamedTuple):
    uv: object
    depth: object
    in_front: object


def project(cam: Camera, points) -> Projection:
    """Pinhole projection of world points; numpy or torch in, same type out.

    Points with depth <= 0 are flagged via ``in_front`` (their uv is still
    computed from a clamped depth so it stays finite).
    """
    R, t = cam.extrinsics.rotation, cam.extrinsics.translation
    if isinstance(points, torch.Tensor):
        Rt = torch.as_tensor(R, dtype=points.dtype)
        tt = torch.as_tensor(t, dtype=points.dtype)
        xc = points @ Rt.T + tt
        z = xc[..., 2]
        zs = torch.where(z > 1e-12, z, torch.full_like(z, 1e-12))
        u = cam.fx * xc[..., 0] / zs + cam.cx
        v = cam.fy * xc[..., 1] / zs + cam.cy
        return Projection(torch.stack([u, v], -1), z, z > 0)
    xc = np.asarray(points, dtype=np.float64) @ R.T + t
    z = xc[..., 2]
    zs = np.where(z > 1e-12, z, 1e-12)
    uv = np.stack([cam.fx * xc[..., 0] / zs + cam.cx, cam.fy * xc[..., 1] / zs + cam.cy], -1)
    return Projection(uv, z, z > 0)


def unproject_ray(cam: Camera, pixel):
    """World-space ray (origin, unit direction) through pixel coordinates (u, v)."""
    pixel = np.asarray(pixel, dtype=np.float64)
    d_cam = np.stack([(pixel[..., 0] - cam.cx) / cam.fx,
                      (pixel[..., 1] - cam.cy) / cam.fy,
                      np.ones(pixel.shape[:-1])], -1)
    d = d_cam @ cam.extrinsics.rotation  # R^T d_cam for row vectors
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    origin = np.broadcast_to(cam.center, d.shape).copy()
    return origin, d


def pixel_centers(height: int, width: int) -> np.ndarray:
    """(H*W, 2) array of (u, v) = (col + 0.5, row + 0.5), row-major."""
    rows, cols = np.mgrid[0:height, 0:width]
    return np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5], -1).astype(np.float64)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> Rigid3:
    """World->camera extrinsics for an OpenCV-style camera (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return Rigid3(R, -R @ eye)
