"""Duplex-mesh rendering: posed-shell ray intersection, canonical warping and
emission-absorption marching, plus silhouette and embedding-map rasterization.

Gradients reach the pose and shape through the intersection barycentrics:
the face hit by each ray is found on detached geometry, then the ray/face
intersection is recomputed differentiably on the posed vertices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import Camera, pixel_centers, unproject_ray
from .geom import Bvh, SurfaceHit, TriMesh, barycentric_transport, ray_mesh_intersect
from .template import SkinnedTemplate, apply_skinning, skinning_transforms

TAG_INVALID, TAG_OUTER_INNER, TAG_OUTER_OUTER = 0, 1, 2
TAG_NAMES = {TAG_INVALID: "invalid", TAG_OUTER_INNER: "outer_inner", TAG_OUTER_OUTER: "outer_outer"}


@dataclass
class DuplexShellPosed:
    canonical_outer: TriMesh
    canonical_inner: TriMesh
    posed_outer: TriMesh
    posed_inner: TriMesh
    bvh_outer: Bvh
    bvh_inner: Bvh
    outer_t: torch.Tensor = None   # differentiable posed vertices
    inner_t: torch.Tensor = None
    posed_body_t: torch.Tensor = None

    @classmethod
    def from_meshes(cls, canonical_outer, canonical_inner, posed_outer, posed_inner):
        if not (np.array_equal(canonical_outer.faces, canonical_inner.faces)
                and np.array_equal(canonical_outer.faces, posed_outer.faces)
                and np.array_equal(canonical_outer.faces, posed_inner.faces)):
            raise ValueError("all four shells must share faces")
        return cls(canonical_outer, canonical_inner, posed_outer, posed_inner,
                   Bvh(posed_outer), Bvh(posed_inner))


@dataclass
class CanonicalSegment:
    entry: np.ndarray
    exit: np.ndarray
    tag: str

    @property
    def valid(self) -> bool:
        return self.tag != "invalid"

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.exit - self.entry))


@dataclass
class HitBuffer:
    face: np.ndarray         # (H, W) int, -1 background
    barycentric: np.ndarray  # (H, W, 3)
    depth: np.ndarray        # (H, W) camera z, inf background
    tag: np.ndarray = None   # (H, W) duplex tag codes (rgb renders only)


@dataclass
class RenderOutput:
    rgb: torch.Tensor        # (3, H, W)
    alpha: torch.Tensor      # (H, W)
    hits: HitBuffer
    coverage: float
    weights_sum: torch.Tensor = None  # (H, W) sum of EA weights + residual transmittance


def canonical_shells(tpl: SkinnedTemplate, epsilon: float):
    n = tpl.normals()
    V = tpl.rest_mesh.vertices
    return TriMesh(V + epsilon * n, tpl.faces), TriMesh(V - epsilon * n, tpl.faces)


def pose_shells(tpl: SkinnedTemplate, beta, theta, epsilon: float, dtype=None) -> DuplexShellPosed:
    """Pose the template and both offset shells with shared skinning transforms."""
    AR, At, shaped = skinning_transforms(tpl, beta, theta, dtype)
    T = tpl.tensors(shaped.dtype)
    off = epsilon * T["normals"]
    outer_t = apply_skinning(tpl, AR, At, shaped + off)
    inner_t = apply_skinning(tpl, AR, At, shaped - off)
    body_t = apply_skinning(tpl, AR, At, shaped)
    c_out, c_in = canonical_shells(tpl, epsilon)
    faces = tpl.faces
    shells = DuplexShellPosed.from_meshes(
        c_out, c_in,
        TriMesh(outer_t.detach().double().numpy(), faces),
        TriMesh(inner_t.detach().double().numpy(), faces))
    shells.outer_t, shells.inner_t, shells.posed_body_t = outer_t, inner_t, body_t
    return shells


def _distinct_two(f, t, b, tol=1e-9):
    """First hit plus the next hit at a strictly larger depth.

    A ray through a shared edge or vertex reports the same point once per
    incident face; those duplicates must not close a zero-length segment.
    """
    t0 = t[:, :1]
    later = (t[:, 1:] > t0 + tol * (1.0 + np.abs(t0))) & (f[:, 1:] >= 0)
    j = 1 + np.argmax(later, axis=1)
    has = later.any(axis=1)
    rows = np.arange(len(f))
    f2 = np.where(has, f[rows, j], -1)
    t2 = np.where(has, t[rows, j], np.inf)
    b2 = np.where(has[:, None], b[rows, j], 0.0)
    return (np.stack([f[:, 0], f2], 1), np.stack([t[:, 0], t2], 1), np.stack([b[:, 0], b2], 1))


def _classify(fo, to, fi, ti):
    """Duplex tags from the two nearest outer hits and the nearest inner hit."""
    n = len(fo)
    tag = np.full(n, TAG_INVALID, np.int8)
    has_o = fo[:, 0] >= 0
    has_o2 = fo[:, 1] >= 0
    has_i = fi[:, 0] >= 0
    inner_first = has_i & (~has_o | (ti[:, 0] < to[:, 0]))
    std = has_o & has_i & ~inner_first & (~has_o2 | (ti[:, 0] <= to[:, 1]))
    oo = has_o & has_o2 & ~inner_first & ~std
    tag[std] = TAG_OUTER_INNER
    tag[oo] = TAG_OUTER_OUTER
    return tag


def trace_duplex(shells: DuplexShellPosed, origins, directions):
    """Batched duplex intersection.

    Returns (tag, entry_face, entry_bary, exit_face, exit_bary, exit_on_outer).
    When the ray leaves the outer shell again before reaching the inner one,
    the second outer hit closes the segment (same rule as a ray that misses
    the inner shell entirely).
    """
    fo, to, bo = _distinct_two(*shells.bvh_outer.trace(origins, directions, k=6))
    fi, ti, bi = shells.bvh_inner.trace(origins, directions, k=1)
    tag = _classify(fo, to, fi, ti)
    oi = tag == TAG_OUTER_INNER
    exit_face = np.where(oi, fi[:, 0], fo[:, 1])
    exit_bary = np.where(oi[:, None], bi[:, 0], bo[:, 1])
    return tag, fo[:, 0], bo[:, 0], exit_face, exit_bary, ~oi


def intersect_duplex(shells: DuplexShellPosed, origin, direction) -> CanonicalSegment:
    """Canonical segment for one posed-space ray."""
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    outer = ray_mesh_intersect(shells.bvh_outer, shells.posed_outer, o, d, mode="all_sorted")
    if len(outer) > 1:
        t0 = outer[0].ray_parameter
        outer = [outer[0]] + [h for h in outer[1:] if h.ray_parameter > t0 + 1e-9 * (1 + abs(t0))][:1]
    inner = ray_mesh_intersect(shells.bvh_inner, shells.posed_inner, o, d, mode="first")
    fo = np.array([[h.face_index for h in outer] + [-1] * (2 - len(outer))])
    to = np.array([[h.ray_parameter for h in outer] + [np.inf] * (2 - len(outer))])
    fi = np.array([[inner[0].face_index if inner else -1]])
    ti = np.array([[inner[0].ray_parameter if inner else np.inf]])
    tag = int(_classify(fo, to, fi, ti)[0])
    if tag == TAG_INVALID:
        return CanonicalSegment(np.full(3, np.nan), np.full(3, np.nan), "invalid")
    entry = barycentric_transport(outer[0], shells.canonical_outer)
    if tag == TAG_OUTER_INNER:
        exit_ = barycentric_transport(inner[0], shells.canonical_inner)
    else:
        exit_ = barycentric_transport(outer[1], shells.canonical_outer)
    if np.linalg.norm(exit_ - entry) <= 1e-9:
        return CanonicalSegment(entry, exit_, "invalid")
    return CanonicalSegment(entry, exit_, TAG_NAMES[tag])


def ray_triangle_bary(tri: torch.Tensor, origins: torch.Tensor, dirs: torch.Tensor) -> torch.Tensor:
    """Differentiable Moller-Trumbore barycentrics (P, 3) for rays known to hit ``tri`` (P, 3, 3)."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = torch.cross(dirs, e2, dim=-1)
    det = (e1 * p).sum(-1)
    s = origins - v0
    u = (s * p).sum(-1) / det
    q = torch.cross(s, e1, dim=-1)
    v = (dirs * q).sum(-1) / det
    return torch.stack([1 - u - v, u, v], -1)


def stratified_jitter(n_rays: int, n_samples: int, seed: int, dtype=torch.float64) -> torch.Tensor:
    """Deterministic per-ray jitter in [0, 1); row i always belongs to pixel i."""
    gen = torch.Generator().manual_seed(int(seed))
    return torch.rand(n_rays, n_samples, generator=gen, dtype=torch.float64).to(dtype)


def ea_composite(sigma: torch.Tensor, rgb: torch.Tensor, delta: torch.Tensor):
    """Emission-absorption along rays.

    sigma (R, S), rgb (R, S, 3), delta (R,) or (R, S). Returns
    (rgb (R, 3), alpha (R,), weights (R, S), transmittance_final (R,)).
    """
    if delta.dim() == 1:
        delta = delta[:, None]
    tau = sigma * delta
    alpha_i = 1.0 - torch.exp(-tau)
    # T_i = exp(-sum_{j<i} tau_j)
    cum = torch.cumsum(tau, dim=1)
    T = torch.exp(-torch.cat([torch.zeros_like(cum[:, :1]), cum[:, :-1]], dim=1))
    w = T * alpha_i
    out_rgb = (w[..., None] * rgb).sum(1)
    T_final = torch.exp(-cum[:, -1])
    return out_rgb, 1.0 - T_final, w, T_final


def ea_march(entry: torch.Tensor, exit: torch.Tensor, field, n_samples: int = 16,
             jitter: torch.Tensor | None = None, view_dirs: torch.Tensor | None = None):
    """March canonical segments (R, 3) -> (R, 3) through ``field``.

    ``field(points, dirs) -> (sigma, rgb)``. Samples sit at (k + jitter)/n
    along each segment; the step is length / n in canonical units. The view
    direction defaults to the canonical segment direction.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    entry = torch.as_tensor(entry)
    exit = torch.as_tensor(exit, dtype=entry.dtype)
    R = len(entry)
    if jitter is None:
        jitter = torch.full((R, n_samples), 0.5, dtype=entry.dtype)
    seg = exit - entry
    length = torch.sqrt((seg * seg).sum(-1).clamp_min(1e-30))
    if view_dirs is None:
        view_dirs = seg / length[:, None]
    s = (torch.arange(n_samples, dtype=entry.dtype)[None] + jitter) / n_samples
    pts = entry[:, None, :] + s[..., None] * seg[:, None, :]
    dirs = view_dirs[:, None, :].expand(-1, n_samples, -1)
    sigma, rgb = field(pts.reshape(-1, 3), dirs.reshape(-1, 3))
    sigma = sigma.reshape(R, n_samples).to(entry.dtype)
    rgb = rgb.reshape(R, n_samples, 3).to(entry.dtype)
    return ea_composite(sigma, rgb, length / n_samples)


def march_shells(shells: DuplexShellPosed, cam: Camera, field, n_samples: int = 16, seed: int = 0,
                 pixels=None, jitter=None):
    """Trace and march the pixels of ``cam`` (all, or the given (P, 2) pixel coords).

    Returns a dict with per-ray tag, rgb (P, 3), alpha (P,), weights_sum (P,)
    and the hit indices for the valid rays.
    """
    H, W = cam.height, cam.width
    px = pixel_centers(H, W) if pixels is None else np.asarray(pixels, float)
    origins, dirs = unproject_ray(cam, px)
    tag, f_in, b_in, f_out, b_out, out_on_outer = trace_duplex(shells, origins, dirs)
    dtype = shells.outer_t.dtype if shells.outer_t is not None else torch.float64
    c_out = torch.as_tensor(shells.canonical_outer.vertices, dtype=dtype)
    c_in = torch.as_tensor(shells.canonical_inner.vertices, dtype=dtype)
    faces = torch.as_tensor(shells.canonical_outer.faces)
    posed_out = shells.outer_t if shells.outer_t is not None else torch.as_tensor(shells.posed_outer.vertices)
    posed_in = shells.inner_t if shells.inner_t is not None else torch.as_tensor(shells.posed_inner.vertices)

    valid = np.flatnonzero(tag != TAG_INVALID)
    o_t = torch.as_tensor(origins[valid], dtype=dtype)
    d_t = torch.as_tensor(dirs[valid], dtype=dtype)
    fin = torch.as_tensor(f_in[valid])
    fout = torch.as_tensor(f_out[valid])
    on_outer = torch.as_tensor(out_on_outer[valid])
    b_entry = ray_triangle_bary(posed_out[faces[fin]], o_t, d_t)
    exit_tri = torch.where(on_outer[:, None, None], posed_out[faces[fout]], posed_in[faces[fout]])
    b_exit = ray_triangle_bary(exit_tri, o_t, d_t)
    entry = (b_entry[..., None] * c_out[faces[fin]]).sum(1)
    exit_canon = torch.where(on_outer[:, None], (b_exit[..., None] * c_out[faces[fout]]).sum(1),
                             (b_exit[..., None] * c_in[faces[fout]]).sum(1))
    # drop degenerate segments
    seg_len = torch.linalg.norm((exit_canon - entry).detach(), dim=-1)
    keep = (seg_len > 1e-9).numpy()
    if not keep.all():
        tag[valid[~keep]] = TAG_INVALID
        sel = torch.as_tensor(np.flatnonzero(keep))
        valid, entry, exit_canon = valid[keep], entry[sel], exit_canon[sel]
        b_entry = b_entry[sel]
    if jitter is None:
        jitter = stratified_jitter(len(px), n_samples, seed, dtype)
    jit = jitter[torch.as_tensor(valid)] if len(valid) else jitter[:0]
    n = len(px)
    rgb = torch.zeros(n, 3, dtype=dtype)
    alpha = torch.zeros(n, dtype=dtype)
    wsum = torch.ones(n, dtype=dtype)
    if len(valid):
        c, a, w, Tf = ea_march(entry, exit_canon, field, n_samples, jit)
        idx = torch.as_tensor(valid)
        rgb = rgb.index_put((idx,), c)
        alpha = alpha.index_put((idx,), a)
        wsum = wsum.index_put((idx,), w.sum(1) + Tf)
    return {"tag": tag, "rgb": rgb, "alpha": alpha, "weights_sum": wsum, "valid": valid,
            "entry_face": f_in, "entry_bary": b_in, "origins": origins, "dirs": dirs}


def render_rgb(cam: Camera, tpl: SkinnedTemplate, beta, theta, psi, epsilon: float,
               n_samples: int = 16, seed: int = 0, dtype=None) -> RenderOutput:
    """Full duplex render of the posed template textured by ``psi``."""
    shells = pose_shells(tpl, beta, theta, epsilon, dtype)
    return render_shells(cam, shells, psi, n_samples, seed)


def render_shells(cam: Camera, shells: DuplexShellPosed, psi, n_samples: int = 16,
                  seed: int = 0) -> RenderOutput:
    H, W = cam.height, cam.width
    out = march_shells(shells, cam, psi, n_samples, seed)
    face = np.where(out["tag"] != TAG_INVALID, out["entry_face"], -1).reshape(H, W)
    hits = HitBuffer(face, out["entry_bary"].reshape(H, W, 3), np.full((H, W), np.inf),
                     out["tag"].reshape(H, W))
    coverage = float((out["tag"] != TAG_INVALID).mean())
    return RenderOutput(out["rgb"].T.reshape(3, H, W), out["alpha"].reshape(H, W), hits,
                        coverage, out["weights_sum"].reshape(H, W))


def render_silhouette(cam: Camera, mesh: TriMesh, bvh: Bvh | None = None):
    """Binary any-hit mask and first-hit buffer of a mesh."""
    H, W = cam.height, cam.width
    origins, dirs = unproject_ray(cam, pixel_centers(H, W))
    bvh = bvh or Bvh(mesh)
    f, t, b = bvh.trace(origins, dirs, k=1)
    f = f[:, 0]
    hit = f >= 0
    depth = np.full(len(f), np.inf)
    if hit.any():
        pts = origins[hit] + t[hit, 0, None] * dirs[hit]
        depth[hit] = cam.extrinsics.apply(pts)[:, 2]
    buf = HitBuffer(f.reshape(H, W), b[:, 0].reshape(H, W, 3), depth.reshape(H, W))
    return hit.reshape(H, W), buf


def posed_mesh(tpl: SkinnedTemplate, beta, theta) -> TriMesh:
    from .template import lbs_deform

    with torch.no_grad():
        V = lbs_deform(tpl, beta, theta, dtype=torch.float64)
    return TriMesh(V.numpy(), tpl.faces)


def render_embedding_map(cam: Camera, tpl: SkinnedTemplate, beta, theta):
    """Per-pixel barycentric interpolation of the vertex descriptors (oracle CSE map).

    Returns (embedding (H, W, d_e) float64, mask (H, W) bool, hit buffer).
    """
    mesh = posed_mesh(tpl, beta, theta)
    mask, buf = render_silhouette(cam, mesh)
    E = tpl.embedding_atlas
    emb = np.zeros(mask.shape + (E.shape[1],))
    f = buf.face[mask]
    emb[mask] = np.einsum("pk,pkd->pd", buf.barycentric[mask], E[tpl.faces[f]])
    return emb, mask, buf


# --------------------------------------------------------------------------
# image I/O
# --------------------------------------------------------------------------

def write_png(path, image):
    """(3, H, W) / (H, W, 3) / (H, W) float image in [0, 1] or bool mask -> 8-bit PNG."""
    from PIL import Image

    a = image.detach().cpu().numpy() if isinstance(image, torch.Tensor) else np.asarray(image)
    if a.ndim == 3 and a.shape[0] == 3:
        a = np.transpose(a, (1, 2, 0))
    a = np.clip(np.asarray(a, float), 0.0, 1.0)
    Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def write_f32(path, array):
    """Planar float32 little-endian blob plus ``<path>.json`` header with the shape."""
    a = array.detach().cpu().numpy() if isinstance(array, torch.Tensor) else np.asarray(array)
    path = Path(path)
    path.write_bytes(a.astype("<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"dtype": "<f4", "shape": list(a.shape)}))


def read_f32(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=header["dtype"]).reshape(header["shape"]).copy()
