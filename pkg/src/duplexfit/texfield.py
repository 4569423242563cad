"""Canonical implicit texture: triplane features decoded to opacity and radiance."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def encode_direction(d: torch.Tensor, order: int) -> torch.Tensor:
    """[d, sin(2^k pi d), cos(2^k pi d)]_{k < order}."""
    feats = [d]
    for k in range(order):
        feats.append(torch.sin((2.0 ** k) * np.pi * d))
        feats.append(torch.cos((2.0 ** k) * np.pi * d))
    return torch.cat(feats, -1)


class TriplaneGrid(nn.Module):
    """Three axis-aligned R x R feature planes (XY, XZ, YZ) over a bounding box.

    Plane tensors are stored as (3, C, R, R) with the second in-plane axis
    along rows and the first along columns; nodes sit exactly on the box
    faces (align_corners semantics).
    """

    PLANE_AXES = ((0, 1), (0, 2), (1, 2))

    def __init__(self, bbox_min, bbox_max, resolution: int = 64, channels: int = 8,
                 init_std: float = 0.01, generator: torch.Generator | None = None,
                 dtype=torch.float32):
        super().__init__()
        if resolution < 2:
            raise ValueError("resolution must be >= 2")
        self.resolution = resolution
        self.channels = channels
        self.register_buffer("bbox_min", torch.as_tensor(np.asarray(bbox_min, float), dtype=dtype))
        self.register_buffer("bbox_max", torch.as_tensor(np.asarray(bbox_max, float), dtype=dtype))
        planes = torch.randn(3, channels, resolution, resolution, generator=generator, dtype=dtype)
        self.planes = nn.Parameter(init_std * planes)

    @property
    def out_dim(self) -> int:
        return 3 * self.channels

    def normalize(self, points):
        return 2.0 * (points - self.bbox_min) / (self.bbox_max - self.bbox_min) - 1.0


def triplane_sample(grid: TriplaneGrid, points: torch.Tensor, return_flags: bool = False):
    """Bilinear feature lookup on each plane, concatenated to (P, 3C).

    Points outside the box are clamped to it; ``return_flags`` also returns
    a boolean mask of the clamped points.
    """
    p = grid.normalize(points.to(grid.planes.dtype))
    outside = (p.abs() > 1.0).any(-1)
    p = p.clamp(-1.0, 1.0)
    uv = torch.stack([p[:, list(ax)] for ax in TriplaneGrid.PLANE_AXES])  # (3, P, 2)
    feat = F.grid_sample(grid.planes, uv[:, :, None, :], mode="bilinear",
                         padding_mode="border", align_corners=True)  # (3, C, P, 1)
    feat = feat[..., 0].permute(2, 0, 1).reshape(len(points), -1)
    return (feat, outside) if return_flags else feat


class FieldDecoder(nn.Module):
    """Two softplus hidden layers on the triplane feature; sigma is read from the
    trunk, colour from the trunk plus the encoded view direction."""

    def __init__(self, in_dim: int, width: int = 32, dir_dim: int = 15, dtype=torch.float32,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.l1 = nn.Linear(in_dim, width, dtype=dtype)
        self.l2 = nn.Linear(width, width, dtype=dtype)
        self.sigma_out = nn.Linear(width, 1, dtype=dtype)
        self.rgb_out = nn.Linear(width + dir_dim, 3, dtype=dtype)
        for layer in (self.l1, self.l2):
            bound = 1.0 / np.sqrt(layer.in_features)
            with torch.no_grad():
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=generator, dtype=dtype) * 2 - 1) * bound)
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=generator, dtype=dtype) * 2 - 1) * bound)
        for layer in (self.sigma_out, self.rgb_out):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)
        self.act = nn.Softplus()

    def forward(self, feat, dir_enc):
        h = self.act(self.l2(self.act(self.l1(feat))))
        sigma_raw = self.sigma_out(h)[:, 0]
        rgb_raw = self.rgb_out(torch.cat([h, dir_enc], -1))
        return sigma_raw, rgb_raw


class TextureField(nn.Module):
    """psi: canonical point (+ view direction) -> (sigma >= 0, rgb in [0, 1]^3)."""

    def __init__(self, bbox_min, bbox_max, resolution: int = 64, channels: int = 8,
                 width: int = 32, dir_order: int = 2, seed: int = 0, dtype=torch.float32,
                 sigma_scale: float = 1.0):
        super().__init__()
        if sigma_scale <= 0:
            raise ValueError("sigma_scale must be positive")
        self.sigma_scale = float(sigma_scale)
        gen = torch.Generator().manual_seed(seed)
        self.grid = TriplaneGrid(bbox_min, bbox_max, resolution, channels, generator=gen, dtype=dtype)
        self.dir_order = dir_order
        self.decoder = FieldDecoder(self.grid.out_dim, width, 3 + 6 * dir_order, dtype=dtype, generator=gen)
        self.width = width

    def config(self) -> dict:
        return {"R": self.grid.resolution, "C": self.grid.channels, "W_d": self.width,
                "L_dir": self.dir_order, "sigma_scale": self.sigma_scale,
                "bbox": [self.grid.bbox_min.tolist(), self.grid.bbox_max.tolist()]}

    def forward(self, points, view_dirs):
        return field_eval(self, points, view_dirs)


def field_eval(psi: TextureField, points: torch.Tensor, view_dirs: torch.Tensor):
    """Opacity sigma_scale * softplus(sigma_raw) and colour sigmoid(rgb_raw) at canonical points.

    ``sigma_scale`` sets the opacity unit (inverse canonical length) so the
    shell can start near-opaque without large decoder weights.
    """
    feat = triplane_sample(psi.grid, points)
    enc = encode_direction(view_dirs.to(feat.dtype), psi.dir_order)
    sigma_raw, rgb_raw = psi.decoder(feat, enc)
    return psi.sigma_scale * F.softplus(sigma_raw), torch.sigmoid(rgb_raw)


def save_field(psi: TextureField, path):
    """Write ``<path>.json`` header and ``<path>.f32`` little-endian parameter blob."""
    path = Path(path)
    params = [(k, v.detach().cpu().numpy()) for k, v in psi.state_dict().items()
              if not k.startswith("grid.bbox")]
    header = dict(psi.config())
    header["params"] = [{"name": k, "shape": list(v.shape)} for k, v in params]
    blob = np.concatenate([v.astype("<f4").ravel() for _, v in params])
    path.with_suffix(".json").write_text(json.dumps(header, indent=1))
    path.with_suffix(".f32").write_bytes(blob.tobytes())


def load_field(path, dtype=torch.float32) -> TextureField:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    psi = TextureField(header["bbox"][0], header["bbox"][1], header["R"], header["C"],
                       header["W_d"], header["L_dir"], dtype=dtype,
                       sigma_scale=header.get("sigma_scale", 1.0))
    state = psi.state_dict()
    off = 0
    for entry in header["params"]:
        n = int(np.prod(entry["shape"]))
        state[entry["name"]] = torch.as_tensor(blob[off:off + n].reshape(entry["shape"]).copy(), dtype=dtype)
        off += n
    psi.load_state_dict(state)
    return psi
