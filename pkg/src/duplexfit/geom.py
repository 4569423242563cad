"""Triangle-mesh primitives: normals, shell extrusion, BVH ray queries, OBJ I/O."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np


class SelfIntersectionWarning(UserWarning):
    """Raised (as a warning) when an offset shell flips face orientation."""


class DegenerateNormalWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        f = np.ascontiguousarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or len(v) < 3:
            raise ValueError(f"vertices must be (N>=3, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriMesh":
        return TriMesh(vertices, self.faces)

    def face_normals(self, normalize=True):
        v = self.vertices
        f = self.faces
        n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        if normalize:
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            n = n / np.where(norm > 0, norm, 1.0)
        return n

    def edges(self) -> np.ndarray:
        """Unique undirected edges as (E, 2) with i < j, lexicographically sorted."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def bounding_sphere_radius(self) -> float:
        c = 0.5 * (self.vertices.min(0) + self.vertices.max(0))
        return float(np.linalg.norm(self.vertices - c, axis=1).max())


@dataclass(frozen=True)
class SurfaceHit:
    face_index: int
    barycentric: np.ndarray
    ray_parameter: float


def vertex_normals(mesh: TriMesh, return_flags: bool = False):
    """Area-weighted vertex normals.

    Vertices touched only by zero-area faces (or no faces) get +z and are
    flagged; a DegenerateNormalWarning is emitted when any vertex is flagged.
    """
    fn = mesh.face_normals(normalize=False)  # length = 2 * area
    acc = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(acc, mesh.faces[:, k], fn)
    norm = np.linalg.norm(acc, axis=1)
    flags = norm <= 1e-300
    out = np.empty_like(acc)
    out[~flags] = acc[~flags] / norm[~flags, None]
    out[flags] = (0.0, 0.0, 1.0)
    if flags.any():
        warnings.warn(f"{int(flags.sum())} vertices have no incident area", DegenerateNormalWarning)
    if return_flags:
        return out, flags
    return out


def extrude_shell(mesh: TriMesh, normals, epsilon: float):
    """Offset the mesh by +/- epsilon along the vertex normals.

    Returns (outer, inner); both keep the input faces array.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    normals = np.asarray(normals, dtype=np.float64)
    outer = TriMesh(mesh.vertices + epsilon * normals, mesh.faces)
    inner = TriMesh(mesh.vertices - epsilon * normals, mesh.faces)
    ref = mesh.face_normals(normalize=False)
    flipped = np.einsum("ij,ij->i", inner.face_normals(normalize=False), ref) <= 0
    if flipped.any():
        warnings.warn(f"inner shell inverts {int(flipped.sum())} faces", SelfIntersectionWarning)
    return outer, inner


# --------------------------------------------------------------------------
# BVH
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _build_bvh(lo_f, hi_f, centroids, leaf_size):
    nf = lo_f.shape[0]
    order = np.arange(nf)
    max_nodes = 2 * nf + 1
    node_lo = np.empty((max_nodes, 3))
    node_hi = np.empty((max_nodes, 3))
    left = -np.ones(max_nodes, np.int64)
    right = -np.ones(max_nodes, np.int64)
    start = np.zeros(max_nodes, np.int64)
    count = np.zeros(max_nodes, np.int64)
    stack = np.empty((max_nodes, 3), np.int64)
    sp = 0
    stack[0, 0] = 0
    stack[0, 1] = 0
    stack[0, 2] = nf
    sp = 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        node = stack[sp, 0]
        s = stack[sp, 1]
        e = stack[sp, 2]
        for a in range(3):
            node_lo[node, a] = np.inf
            node_hi[node, a] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(s, e):
            fi = order[i]
            for a in range(3):
                node_lo[node, a] = min(node_lo[node, a], lo_f[fi, a])
                node_hi[node, a] = max(node_hi[node, a], hi_f[fi, a])
                clo[a] = min(clo[a], centroids[fi, a])
                chi[a] = max(chi[a], centroids[fi, a])
        n = e - s
        ext = chi - clo
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        if n <= leaf_size or ext[axis] <= 0.0:
            start[node] = s
            count[node] = n
            continue
        keys = np.empty(n)
        for i in range(n):
            keys[i] = centroids[order[s + i], axis]
        perm = np.argsort(keys, kind="mergesort")
        seg = order[s:e].copy()
        for i in range(n):
            order[s + i] = seg[perm[i]]
        mid = s + n // 2
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        stack[sp, 0] = lc
        stack[sp, 1] = s
        stack[sp, 2] = mid
        sp += 1
        stack[sp, 0] = rc
        stack[sp, 1] = mid
        stack[sp, 2] = e
        sp += 1
    return (node_lo[:n_nodes], node_hi[:n_nodes], left[:n_nodes], right[:n_nodes],
            start[:n_nodes], count[:n_nodes], order)


@numba.njit(cache=True, error_model="numpy")
def _moller_trumbore(ox, oy, oz, dx, dy, dz, v0, v1, v2, tmin):
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    scale = (np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
             * np.sqrt(e2x * e2x + e2y * e2y + e2z * e2z)
             * np.sqrt(dx * dx + dy * dy + dz * dz))
    if abs(det) <= 1e-14 * scale:
        return -1.0, 0.0, 0.0
    inv = 1.0 / det
    sx = ox - v0[0]
    sy = oy - v0[1]
    sz = oz - v0[2]
    u = (sx * px + sy * py + sz * pz) * inv
    if u < 0.0 or u > 1.0:
        return -1.0, 0.0, 0.0
    qx = sy * e1z - sz * e1y
    qy = sz * e1x - sx * e1z
    qz = sx * e1y - sy * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return -1.0, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t < tmin:
        return -1.0, 0.0, 0.0
    return t, u, v


@numba.njit(cache=True, error_model="numpy")
def _box_entry(ox, oy, oz, dx, dy, dz, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] > hi[a]:
                return np.inf
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            t0 = max(t0, ta)
            t1 = min(t1, tb)
    if t1 < t0 or t1 < 0.0:
        return np.inf
    return t0


@numba.njit(cache=True, error_model="numpy")
def _trace_k(node_lo, node_hi, left, right, start, count, order, tri, origins, dirs,
             k, tmin):
    """k nearest hits per ray, sorted by t; face -1 marks an empty slot."""
    nr = origins.shape[0]
    out_f = -np.ones((nr, k), np.int64)
    out_t = np.full((nr, k), np.inf)
    out_u = np.zeros((nr, k))
    out_v = np.zeros((nr, k))
    stack = np.empty(128, np.int64)
    for r in range(nr):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        nh = 0
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            te = _box_entry(ox, oy, oz, dx, dy, dz, node_lo[node], node_hi[node])
            if te == np.inf:
                continue
            if nh == k and te > out_t[r, k - 1]:
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    fi = order[i]
                    t, u, v = _moller_trumbore(ox, oy, oz, dx, dy, dz,
                                               tri[fi, 0], tri[fi, 1], tri[fi, 2], tmin)
                    if t < 0.0:
                        continue
                    if nh == k and not (t < out_t[r, k - 1] or
                                        (t == out_t[r, k - 1] and fi < out_f[r, k - 1])):
                        continue
                    # insertion sort by (t, face)
                    j = nh if nh < k else k - 1
                    while j > 0 and (out_t[r, j - 1] > t or
                                     (out_t[r, j - 1] == t and out_f[r, j - 1] > fi)):
                        if j < k:
                            out_t[r, j] = out_t[r, j - 1]
                            out_f[r, j] = out_f[r, j - 1]
                            out_u[r, j] = out_u[r, j - 1]
                            out_v[r, j] = out_v[r, j - 1]
                        j -= 1
                    out_t[r, j] = t
                    out_f[r, j] = fi
                    out_u[r, j] = u
                    out_v[r, j] = v
                    if nh < k:
                        nh += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
    return out_f, out_t, out_u, out_v


@numba.njit(cache=True, error_model="numpy")
def _trace_all(node_lo, node_hi, left, right, start, count, order, tri, o, d, tmin):
    nf = tri.shape[0]
    fs = np.empty(nf, np.int64)
    ts = np.empty(nf)
    us = np.empty(nf)
    vs = np.empty(nf)
    n = 0
    stack = np.empty(128, np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        te = _box_entry(o[0], o[1], o[2], d[0], d[1], d[2], node_lo[node], node_hi[node])
        if te == np.inf:
            continue
        if count[node] > 0:
            for i in range(start[node], start[node] + count[node]):
                fi = order[i]
                t, u, v = _moller_trumbore(o[0], o[1], o[2], d[0], d[1], d[2],
                                           tri[fi, 0], tri[fi, 1], tri[fi, 2], tmin)
                if t >= 0.0:
                    fs[n] = fi
                    ts[n] = t
                    us[n] = u
                    vs[n] = v
                    n += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return fs[:n], ts[:n], us[:n], vs[:n]


class Bvh:
    """Axis-aligned bounding-box tree over the faces of one mesh.

    Boxes are padded by a relative 1e-9 so traversal never rejects a face
    that the exact triangle test would accept.
    """

    def __init__(self, mesh: TriMesh, leaf_size: int = 4):
        tri = mesh.vertices[mesh.faces]
        self.triangles = np.ascontiguousarray(tri)
        scale = max(float(np.abs(mesh.vertices).max()), 1.0)
        pad = 1e-9 * scale
        lo = tri.min(axis=1) - pad
        hi = tri.max(axis=1) + pad
        (self.node_lo, self.node_hi, self.left, self.right,
         self.start, self.count, self.order) = _build_bvh(lo, hi, tri.mean(axis=1), leaf_size)
        self.n_faces = mesh.n_faces

    @property
    def _arrays(self):
        return (self.node_lo, self.node_hi, self.left, self.right, self.start,
                self.count, self.order, self.triangles)

    def leaves(self):
        """List of face-index arrays, one per leaf."""
        return [self.order[s:s + c] for s, c in zip(self.start, self.count) if c > 0]

    def trace(self, origins, directions, k: int = 1, tmin: float = 0.0):
        """k nearest hits for each of many rays.

        Returns (faces, t, barycentric) with shapes (R, k), (R, k), (R, k, 3).
        Missing hits have face -1 and t = inf.
        """
        o = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
        d = np.ascontiguousarray(np.atleast_2d(directions), dtype=np.float64)
        if len(o) == 1 and len(d) > 1:
            o = np.ascontiguousarray(np.broadcast_to(o, d.shape))
        f, t, u, v = _trace_k(*self._arrays, o, d, k, tmin)
        bary = np.stack([1.0 - u - v, u, v], axis=-1)
        bary[f < 0] = 0.0
        return f, t, bary


def ray_mesh_intersect(bvh: Bvh, mesh: TriMesh, origin, direction, mode: str = "first",
                       tmin: float = 0.0) -> list:
    """Exact ray/mesh intersection through the BVH; hits sorted by ray parameter."""
    d = np.asarray(direction, dtype=np.float64)
    if not np.any(d):
        raise ValueError("direction must be nonzero")
    if bvh.n_faces != mesh.n_faces:
        raise ValueError("bvh was built for a different mesh")
    o = np.asarray(origin, dtype=np.float64)
    if mode == "first":
        f, t, b = bvh.trace(o[None], d[None], k=1, tmin=tmin)
        if f[0, 0] < 0:
            return []
        return [SurfaceHit(int(f[0, 0]), b[0, 0], float(t[0, 0]))]
    if mode != "all_sorted":
        raise ValueError(f"unknown mode {mode!r}")
    fs, ts, us, vs = _trace_all(*bvh._arrays, o, d, tmin)
    idx = np.lexsort((fs, ts))
    return [SurfaceHit(int(fs[i]), np.array([1.0 - us[i] - vs[i], us[i], vs[i]]), float(ts[i]))
            for i in idx]


def barycentric_transport(hit: SurfaceHit, target_vertices, faces=None):
    """Apply a hit's barycentric coordinates to another mesh with the same faces.

    ``target_vertices`` is either a TriMesh or a vertex array (then ``faces``
    is required).
    """
    if isinstance(target_vertices, TriMesh):
        faces = target_vertices.faces
        target_vertices = target_vertices.vertices
    faces = np.asarray(faces)
    if not 0 <= hit.face_index < len(faces):
        raise IndexError(f"face {hit.face_index} not in target topology ({len(faces)} faces)")
    tri = np.asarray(target_vertices)[faces[hit.face_index]]
    return np.asarray(hit.barycentric) @ tri


def barycentric_of_point(point, triangle):
    """Barycentric coordinates of a point (assumed on the triangle plane)."""
    a, b, c = np.asarray(triangle, dtype=np.float64)
    v0, v1, v2 = b - a, c - a, np.asarray(point, dtype=np.float64) - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    return np.array([1.0 - v - w, v, w])


# --------------------------------------------------------------------------
# construction helpers
# --------------------------------------------------------------------------

def icosphere(radius: float = 1.0, subdivisions: int = 2, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    v = radius * np.array(verts) + np.asarray(center, float)
    return TriMesh(v, np.array(faces))


def unit_cube() -> TriMesh:
    """Axis-aligned cube [-1, 1]^3 with outward CCW faces.

    Each square is split into four triangles around its centre (vertices
    8..13), so every corner sees the same triangle area on each of its three
    faces and the corner normals are exactly symmetric.
    """
    v = [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]
    quads = [
        [0, 1, 3, 2],  # x = -1
        [4, 6, 7, 5],  # x = +1
        [0, 4, 5, 1],  # y = -1
        [2, 3, 7, 6],  # y = +1
        [0, 2, 6, 4],  # z = -1
        [1, 5, 7, 3],  # z = +1
    ]
    faces = []
    for q in quads:
        c = len(v)
        v.append(np.mean([v[i] for i in q], axis=0).tolist())
        faces += [[q[k], q[(k + 1) % 4], c] for k in range(4)]
    return TriMesh(np.array(v, float), np.array(faces))


def grid_plane(size: float = 1.0, n: int = 2) -> TriMesh:
    """Square in the z = 0 plane, normals +z."""
    xs = np.linspace(-size / 2, size / 2, n + 1)
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    v = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    faces = []
    for r in range(n):
        for c in range(n):
            i = r * (n + 1) + c
            faces += [(i, i + 1, i + n + 2), (i, i + n + 2, i + n + 1)]
    return TriMesh(v, np.array(faces))


def write_obj(path, mesh: TriMesh):
    path = Path(path)
    with path.open("w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    with Path(path).open() as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangular faces are supported")
                faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64))


def remove_degenerate(vertices, faces, area_tol: float = 0.0):
    """Drop faces with repeated indices or area <= area_tol, then unused vertices."""
    faces = np.asarray(faces)
    vertices = np.asarray(vertices, dtype=np.float64)
    ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[ok]
    n = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]],
                 vertices[faces[:, 2]] - vertices[faces[:, 0]])
    faces = faces[0.5 * np.linalg.norm(n, axis=1) > area_tol]
    used = np.unique(faces)
    remap = -np.ones(len(vertices), np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]
