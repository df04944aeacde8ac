"""Fixed-topology tube meshes: slicing, centerlines, contour resampling, voxelization.

Nodes are stored ring-major: node ``i * pts_per_ring + j`` is point ``j`` of ring ``i``,
rings ordered from inlet to outlet. All coordinates are in mm.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import (
    DegenerateContour,
    DegenerateMesh,
    MultipleLoops,
    NoIntersection,
    OpenSurface,
    TopologyMismatch,
)

log = logging.getLogger(__name__)

N_RINGS = 40
PTS_PER_RING = 82


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def tube_cells(n_rings: int, pts_per_ring: int) -> np.ndarray:
    """Quad-strip triangulation between consecutive rings, two triangles per quad."""
    i = np.arange(n_rings - 1)[:, None]
    j = np.arange(pts_per_ring)[None, :]
    v00 = i * pts_per_ring + j
    v01 = i * pts_per_ring + (j + 1) % pts_per_ring
    v10 = v00 + pts_per_ring
    v11 = v01 + pts_per_ring
    t1 = np.stack([v00, v01, v11], axis=-1).reshape(-1, 3)
    t2 = np.stack([v00, v11, v10], axis=-1).reshape(-1, 3)
    cells = np.empty((2 * t1.shape[0], 3), dtype=np.int64)
    cells[0::2] = t1
    cells[1::2] = t2
    return _frozen(cells, dtype=np.int64)


@dataclass(frozen=True)
class TubeMesh:
    nodes: np.ndarray
    n_rings: int = N_RINGS
    pts_per_ring: int = PTS_PER_RING

    def __post_init__(self):
        nodes = _frozen(self.nodes).reshape(-1, 3)
        if nodes.shape[0] != self.n_rings * self.pts_per_ring:
            raise TopologyMismatch(
                f"{nodes.shape[0]} nodes for {self.n_rings}x{self.pts_per_ring} topology"
            )
        if self.n_rings < 2 or self.pts_per_ring < 3:
            raise DegenerateMesh("need at least 2 rings of 3 points")
        object.__setattr__(self, "nodes", nodes)

    @property
    def cells(self) -> np.ndarray:
        return tube_cells(self.n_rings, self.pts_per_ring)

    @property
    def rings(self) -> np.ndarray:
        """(n_rings, pts_per_ring, 3) view of the nodes."""
        return self.nodes.reshape(self.n_rings, self.pts_per_ring, 3)

    @property
    def topology(self) -> tuple[int, int]:
        return (self.n_rings, self.pts_per_ring)

    def ring_centroids(self) -> np.ndarray:
        return self.rings.mean(axis=1)

    def cell_centers(self) -> np.ndarray:
        return self.nodes[self.cells].mean(axis=1)

    def with_nodes(self, nodes) -> "TubeMesh":
        return TubeMesh(np.asarray(nodes).reshape(-1, 3), self.n_rings, self.pts_per_ring)

    def transformed(self, rotation=None, translation=None, scale=1.0) -> "TubeMesh":
        x = self.nodes * scale
        if rotation is not None:
            x = x @ np.asarray(rotation).T
        if translation is not None:
            x = x + np.asarray(translation)
        return self.with_nodes(x)

    def validate(self) -> None:
        """Check the ring and ordering invariants; raises DegenerateMesh."""
        rings = self.rings
        cents = rings.mean(axis=1)
        steps = np.linalg.norm(np.diff(cents, axis=0), axis=1)
        if np.any(steps < 1e-9):
            raise DegenerateMesh("consecutive ring centroids coincide")
        for i, ring in enumerate(rings):
            area = _vector_area(ring)
            if np.linalg.norm(area) <= 1e-12:
                raise DegenerateMesh(f"ring {i} has zero area")
            if not _ring_is_simple(ring, area):
                raise DegenerateMesh(f"ring {i} self-intersects")


def _vector_area(loop: np.ndarray) -> np.ndarray:
    c = loop.mean(axis=0)
    p = loop - c
    return 0.5 * np.cross(p, np.roll(p, -1, axis=0)).sum(axis=0)


def _ring_is_simple(ring: np.ndarray, area: np.ndarray) -> bool:
    # project onto the best-fit plane, then test every pair of non-adjacent edges
    n = area / np.linalg.norm(area)
    u = np.cross(n, [1.0, 0.0, 0.0])
    if np.linalg.norm(u) < 0.1:
        u = np.cross(n, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    q = np.stack([ring @ u, ring @ v], axis=1)
    a, b = q, np.roll(q, -1, axis=0)
    m = len(q)

    def orient(p, r, s):
        return (r[..., 0] - p[..., 0]) * (s[..., 1] - p[..., 1]) - (r[..., 1] - p[..., 1]) * (
            s[..., 0] - p[..., 0]
        )

    A, B = a[:, None], b[:, None]
    C, D = a[None, :], b[None, :]
    d1 = orient(A, B, C)
    d2 = orient(A, B, D)
    d3 = orient(C, D, A)
    d4 = orient(C, D, B)
    cross = (d1 * d2 < 0) & (d3 * d4 < 0)
    idx = np.arange(m)
    adjacent = (np.abs(idx[:, None] - idx[None, :]) <= 1) | (
        np.abs(idx[:, None] - idx[None, :]) == m - 1
    )
    return not np.any(cross & ~adjacent)


@dataclass(frozen=True)
class Plane:
    origin: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if norm == 0:
            raise ValueError("plane normal must be nonzero")
        object.__setattr__(self, "origin", _frozen(self.origin))
        object.__setattr__(self, "normal", _frozen(n / norm))

    def signed_distance(self, pts) -> np.ndarray:
        return (np.asarray(pts) - self.origin) @ self.normal

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Two in-plane unit vectors completing a right-handed frame with the normal."""
        n = self.normal
        helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = np.cross(n, helper)
        u /= np.linalg.norm(u)
        return u, np.cross(n, u)


@dataclass(frozen=True)
class CenterlineCurve:
    points: np.ndarray
    arclength: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = _frozen(self.points).reshape(-1, 3)
        if len(pts) < 2:
            raise ValueError("centerline needs at least 2 points")
        if self.arclength is None:
            seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            s = np.concatenate([[0.0], np.cumsum(seg)])
        else:
            s = np.asarray(self.arclength, dtype=float)
        if s[0] != 0 or np.any(np.diff(s) <= 0):
            raise DegenerateMesh("centerline arclength must start at 0 and increase strictly")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "arclength", _frozen(s))

    @property
    def length(self) -> float:
        return float(self.arclength[-1])

    def point_at(self, s) -> np.ndarray:
        s = np.clip(s, 0.0, self.length)
        return np.stack(
            [np.interp(s, self.arclength, self.points[:, k]) for k in range(3)], axis=-1
        )

    def tangent_at(self, s) -> np.ndarray:
        """Unit tangent by central differencing of the polyline."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        h = max(self.length * 1e-3, 1e-6)
        lo = np.clip(s - h, 0.0, self.length)
        hi = np.clip(s + h, 0.0, self.length)
        t = self.point_at(hi) - self.point_at(lo)
        t /= np.linalg.norm(t, axis=-1, keepdims=True)
        return t

    def project(self, pts) -> np.ndarray:
        """Arclength of the nearest polyline vertex for each point."""
        pts = np.atleast_2d(pts)
        d = ((pts[:, None, :] - self.points[None]) ** 2).sum(-1)
        return self.arclength[np.argmin(d, axis=1)]


def spline_through(points, n_points: int, dense_factor: int = 20,
                   param: str = "index") -> CenterlineCurve:
    """Cubic spline through ordered points, resampled by arclength.

    ``param`` is "index" (uniform knots) or "chord" (cumulative chord length), the
    latter for unevenly spaced points.
    """
    pts = np.asarray(points, dtype=float)
    m = len(pts)
    if np.any(np.linalg.norm(np.diff(pts, axis=0), axis=1) < 1e-12):
        raise DegenerateMesh("consecutive spline control points coincide")
    if param == "chord":
        u = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        u /= u[-1] / (m - 1)
    elif param == "index":
        u = np.arange(m, dtype=float)
    else:
        raise ValueError(f"param must be 'index' or 'chord', got {param!r}")
    if m >= 4:
        spl = CubicSpline(u, pts, axis=0)
    else:
        spl = CubicSpline(u, pts, axis=0, bc_type="natural")
    ud = np.linspace(u[0], u[-1], max(dense_factor * n_points, 10 * m))
    dense = spl(ud)
    seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], n_points)
    u_at = np.interp(targets, s, ud)
    out = spl(u_at)
    out[0], out[-1] = pts[0], pts[-1]
    return CenterlineCurve(out)


def centerline_from_mesh(mesh: TubeMesh, n_points: int = 500) -> CenterlineCurve:
    if n_points < 5:
        raise ValueError("n_points must be >= 5")
    cents = mesh.ring_centroids()
    if np.any(np.linalg.norm(np.diff(cents, axis=0), axis=1) < 1e-9):
        raise DegenerateMesh("consecutive ring centroids coincide")
    return spline_through(cents, n_points)


def surface_points(mesh: TubeMesh) -> np.ndarray:
    return mesh.nodes


def ring_upsampler(n_rings: int, factor: int) -> np.ndarray:
    """(factor*(n_rings-1)+1, n_rings) weights of linear interpolation between rings."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if n_rings < 2 or factor == 1:
        return np.eye(n_rings)
    t = np.arange((n_rings - 1) * factor + 1) / factor
    lo = np.minimum(np.floor(t).astype(int), n_rings - 2)
    f = t - lo
    U = np.zeros((len(t), n_rings))
    U[np.arange(len(t)), lo] = 1 - f
    U[np.arange(len(t)), lo + 1] += f
    return U


def dense_surface_points(mesh: TubeMesh, factor: int = 4) -> np.ndarray:
    """Nodes plus ``factor - 1`` linearly interpolated rings between each ring pair.

    These points lie on the quad strips between rings; factor 1 gives the nodes.
    """
    rings = mesh.nodes.reshape(mesh.n_rings, mesh.pts_per_ring, 3)
    return np.tensordot(ring_upsampler(mesh.n_rings, factor), rings, axes=1).reshape(-1, 3)


def ring_radius(mesh: TubeMesh, ring_index: int) -> float:
    if not 0 <= ring_index < mesh.n_rings:
        raise IndexError(ring_index)
    ring = mesh.rings[ring_index]
    return float(np.linalg.norm(ring - ring.mean(axis=0), axis=1).mean())


def ring_radii(mesh: TubeMesh) -> np.ndarray:
    rings = mesh.rings
    return np.linalg.norm(rings - rings.mean(axis=1, keepdims=True), axis=2).mean(axis=1)


# --- slicing -------------------------------------------------------------------------


def _chain_loops(nodes, cells, plane: Plane):
    d = plane.signed_distance(nodes)
    pos = d >= 0
    tri_pos = pos[cells]
    npos = tri_pos.sum(axis=1)
    straddle = np.nonzero((npos == 1) | (npos == 2))[0]
    if len(straddle) == 0:
        return [], 0
    n = len(nodes)
    adj: dict[int, list[int]] = {}
    for t in straddle:
        tri = cells[t]
        keys = []
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            if pos[a] != pos[b]:
                keys.append(min(a, b) * n + max(a, b))
        k0, k1 = keys
        adj.setdefault(k0, []).append(k1)
        adj.setdefault(k1, []).append(k0)

    def edge_point(key):
        a, b = divmod(key, n)
        t = d[a] / (d[a] - d[b])
        return nodes[a] + t * (nodes[b] - nodes[a])

    seen = set()
    loops = []
    n_open = 0
    # open chains first: start from boundary edges (degree 1)
    starts = [k for k, v in adj.items() if len(v) == 1] + list(adj)
    for start in starts:
        if start in seen:
            continue
        chain = [start]
        seen.add(start)
        prev, cur = None, start
        closed = False
        while True:
            nxt = [k for k in adj[cur] if k != prev]
            if not nxt:
                break
            if nxt[0] == start:
                closed = True
                break
            if nxt[0] in seen:
                break
            prev, cur = cur, nxt[0]
            chain.append(cur)
            seen.add(cur)
        if closed and len(chain) >= 3:
            loops.append(np.array([edge_point(k) for k in chain]))
        else:
            n_open += 1
    return loops, n_open


def _orient_ccw(loop: np.ndarray, normal: np.ndarray) -> np.ndarray:
    if _vector_area(loop) @ normal < 0:
        loop = loop[::-1]
    return loop


def polyline_perimeter(loop: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(loop, -1, axis=0) - loop, axis=1).sum())


def slice_loops(mesh: TubeMesh, plane: Plane) -> list[np.ndarray]:
    """All closed intersection loops, counter-clockwise about the normal, longest first.

    Open chains (the plane leaving through an open tube end) are discarded.
    """
    loops, n_open = _chain_loops(mesh.nodes, mesh.cells, plane)
    if n_open:
        log.debug("discarded %d open intersection chains", n_open)
    loops = [_orient_ccw(lp, plane.normal) for lp in loops]
    loops.sort(key=polyline_perimeter, reverse=True)
    return loops


def slice_with_plane(mesh: TubeMesh, plane: Plane) -> np.ndarray:
    loops = slice_loops(mesh, plane)
    if not loops:
        raise NoIntersection("plane does not cut the mesh in a closed loop")
    if len(loops) > 1:
        raise MultipleLoops(f"plane cuts the mesh in {len(loops)} loops")
    return loops[0]


def slice_nearest(mesh: TubeMesh, plane: Plane, point=None) -> np.ndarray:
    """The loop whose centroid lies closest to ``point`` (default: the plane origin)."""
    loops = slice_loops(mesh, plane)
    if not loops:
        raise NoIntersection("plane does not cut the mesh in a closed loop")
    ref = plane.origin if point is None else np.asarray(point)
    dists = [np.linalg.norm(lp.mean(axis=0) - ref) for lp in loops]
    return loops[int(np.argmin(dists))]


def resample_contour(polyline, p: int) -> np.ndarray:
    """``p`` points at equal arclength along the closed loop, starting at vertex 0."""
    pts = np.asarray(polyline, dtype=float)
    if len(pts) < 3 or p < 3:
        raise DegenerateContour("need a closed loop of >= 3 vertices and p >= 3")
    closed = np.vstack([pts, pts[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] < 1e-9:
        raise DegenerateContour("contour perimeter is zero")
    keep = np.concatenate([[True], seg > 0])
    s, closed = s[keep], closed[keep]
    t = np.arange(p) * (s[-1] / p)
    return np.stack([np.interp(t, s, closed[:, k]) for k in range(3)], axis=1)


def contour_radius(loop: np.ndarray) -> float:
    """Effective radius perimeter / 2pi."""
    return polyline_perimeter(loop) / (2 * np.pi)


# --- voxelization --------------------------------------------------------------------


@dataclass(frozen=True)
class VoxelMask:
    origin: np.ndarray
    spacing: np.ndarray
    dims: tuple[int, int, int]
    occupancy: np.ndarray

    def __post_init__(self):
        sp = np.broadcast_to(np.asarray(self.spacing, dtype=float), (3,))
        if np.any(sp <= 0):
            raise ValueError("voxel spacing must be positive")
        dims = tuple(int(v) for v in self.dims)
        occ = np.asarray(self.occupancy, dtype=bool).reshape(dims)
        occ.setflags(write=False)
        object.__setattr__(self, "origin", _frozen(self.origin))
        object.__setattr__(self, "spacing", _frozen(sp))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "occupancy", occ)

    @property
    def volume(self) -> float:
        return float(self.occupancy.sum() * np.prod(self.spacing))

    def same_grid(self, other: "VoxelMask") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-9)
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-12)
        )

    def centers(self) -> np.ndarray:
        idx = np.argwhere(self.occupancy)
        return self.origin + idx * self.spacing


def capped_surface(mesh: TubeMesh) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and triangles of the tube closed by centroid fans on both end rings."""
    rings = mesh.rings
    P = mesh.pts_per_ring
    nodes = mesh.nodes
    extra = []
    caps = []
    for k, ring_idx in enumerate((0, mesh.n_rings - 1)):
        ring = rings[ring_idx]
        if np.linalg.norm(_vector_area(ring)) < 1e-9:
            raise OpenSurface(f"end ring {ring_idx} is degenerate, cannot cap")
        c_id = len(nodes) + k
        extra.append(ring.mean(axis=0))
        j = np.arange(P)
        base = ring_idx * P
        caps.append(np.stack([np.full(P, c_id), base + j, base + (j + 1) % P], axis=1))
    all_nodes = np.vstack([nodes, np.array(extra)])
    cells = np.vstack([mesh.cells] + caps)
    return all_nodes, cells


def grid_for(meshes, spacing: float = 1.0, pad: int = 1):
    """Lattice-aligned grid (origin, dims) covering every mesh's bounding box."""
    sp = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
    lo = np.min([m.nodes.min(axis=0) for m in meshes], axis=0)
    hi = np.max([m.nodes.max(axis=0) for m in meshes], axis=0)
    i0 = np.floor(lo / sp).astype(int) - pad
    i1 = np.ceil(hi / sp).astype(int) + pad
    return i0 * sp, tuple(int(v) for v in (i1 - i0 + 1))


_JITTER = (1e-7, 1.618e-7)


def _ray_hits(nodes, cells, origin, sp, dims, jitter=(0.0, 0.0), rows=None):
    """x-coordinates where +x rays through voxel-center rows cross the surface.

    Returns (row ids, x hits, degenerate row ids).
    """
    ny, nz = dims[1], dims[2]
    tri = nodes[cells]
    Y = tri[:, :, 1] - (origin[1] + jitter[0])
    Z = tri[:, :, 2] - (origin[2] + jitter[1])
    j0 = np.ceil(Y.min(axis=1) / sp[1]).astype(int)
    j1 = np.floor(Y.max(axis=1) / sp[1]).astype(int)
    k0 = np.ceil(Z.min(axis=1) / sp[2]).astype(int)
    k1 = np.floor(Z.max(axis=1) / sp[2]).astype(int)
    j0, k0 = np.maximum(j0, 0), np.maximum(k0, 0)
    j1, k1 = np.minimum(j1, ny - 1), np.minimum(k1, nz - 1)
    ok = (j1 >= j0) & (k1 >= k0)
    if not np.any(ok):
        return np.zeros(0, int), np.zeros(0), np.zeros(0, int)
    t_ids = np.nonzero(ok)[0]
    wj = int((j1 - j0)[ok].max()) + 1
    wk = int((k1 - k0)[ok].max()) + 1
    out_rows, out_x, degen = [], [], []
    # chunk triangles so the candidate tensor stays small
    chunk = max(1, 400_000 // (wj * wk))
    dj, dk = np.meshgrid(np.arange(wj), np.arange(wk), indexing="ij")
    dj, dk = dj.ravel(), dk.ravel()
    for c0 in range(0, len(t_ids), chunk):
        t = t_ids[c0 : c0 + chunk]
        J = j0[t, None] + dj[None]
        K = k0[t, None] + dk[None]
        valid = (J <= j1[t, None]) & (K <= k1[t, None])
        if rows is not None:
            valid &= np.isin(J * nz + K, rows)
        ti, ci = np.nonzero(valid)
        tt = t[ti]
        qy = J[ti, ci] * sp[1]
        qz = K[ti, ci] * sp[2]
        ay, az = Y[tt, 0], Z[tt, 0]
        by, bz = Y[tt, 1], Z[tt, 1]
        cy, cz = Y[tt, 2], Z[tt, 2]
        area = (by - ay) * (cz - az) - (bz - az) * (cy - ay)
        e0 = (cy - by) * (qz - bz) - (cz - bz) * (qy - by)
        e1 = (ay - cy) * (qz - cz) - (az - cz) * (qy - cy)
        e2 = (by - ay) * (qz - az) - (bz - az) * (qy - ay)
        nz_area = np.abs(area) > 1e-14
        safe = np.where(nz_area, area, 1.0)
        b0, b1, b2 = e0 / safe, e1 / safe, e2 / safe
        bmin = np.minimum(np.minimum(b0, b1), b2)
        tol = 1e-10
        inside = nz_area & (bmin > tol)
        border = nz_area & (np.abs(bmin) <= tol)
        X = tri[tt, :, 0]
        xh = b0 * X[:, 0] + b1 * X[:, 1] + b2 * X[:, 2]
        r = J[ti, ci] * nz + K[ti, ci]
        out_rows.append(r[inside])
        out_x.append(xh[inside])
        degen.append(r[border])
    return np.concatenate(out_rows), np.concatenate(out_x), np.unique(np.concatenate(degen))


def _fill_rows(rows, xs, origin, sp, dims, occ2d):
    """Parity fill along x. Returns the row ids that had an odd number of hits."""
    if len(rows) == 0:
        return np.zeros(0, int)
    order = np.lexsort((xs, rows))
    rows, xs = rows[order], xs[order]
    uniq, start, counts = np.unique(rows, return_index=True, return_counts=True)
    odd = uniq[counts % 2 == 1]
    good = np.isin(rows, odd, invert=True)
    rank = np.arange(len(rows)) - np.repeat(start, counts)
    rows, xs, rank = rows[good], xs[good], rank[good]
    x_in, x_out = xs[rank % 2 == 0], xs[rank % 2 == 1]
    r = rows[rank % 2 == 0]
    nx = dims[0]
    i0 = np.ceil((x_in - origin[0]) / sp[0]).astype(int)
    i1 = np.floor((x_out - origin[0]) / sp[0]).astype(int)
    i0, i1 = np.maximum(i0, 0), np.minimum(i1, nx - 1)
    keep = i1 >= i0
    diff = np.zeros((occ2d.shape[0], nx + 1), dtype=np.int32)
    np.add.at(diff, (r[keep], i0[keep]), 1)
    np.add.at(diff, (r[keep], i1[keep] + 1), -1)
    occ2d |= np.cumsum(diff[:, :nx], axis=1) > 0
    return odd


def voxelize(mesh: TubeMesh, spacing=1.0, origin=None, dims=None) -> VoxelMask:
    """Solid occupancy by +x ray parity against the end-capped surface.

    Voxel centers sit at ``origin + index * spacing``. Rows whose ray grazes an edge or
    vertex are re-cast with a tiny (y, z) jitter.
    """
    sp = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
    if np.any(sp <= 0):
        raise ValueError("spacing must be positive")
    if origin is None or dims is None:
        origin, dims = grid_for([mesh], sp)
    origin = np.asarray(origin, dtype=float)
    dims = tuple(int(v) for v in dims)
    nodes, cells = capped_surface(mesh)
    ny, nz = dims[1], dims[2]
    occ2d = np.zeros((ny * nz, dims[0]), dtype=bool)
    rows, xs, degen = _ray_hits(nodes, cells, origin, sp, dims)
    bad = np.isin(rows, degen)
    odd = _fill_rows(rows[~bad], xs[~bad], origin, sp, dims, occ2d)
    retry = np.union1d(degen, odd)
    if len(retry):
        occ2d[retry] = False
        jr, jx, jdeg = _ray_hits(nodes, cells, origin, sp, dims, jitter=_JITTER, rows=retry)
        still_odd = _fill_rows(jr, jx, origin, sp, dims, occ2d)
        if len(jdeg) or len(still_odd):
            log.debug("%d rows remained ambiguous after jitter", len(np.union1d(jdeg, still_odd)))
    occ = occ2d.reshape(ny, nz, dims[0]).transpose(2, 0, 1)
    return VoxelMask(origin, sp, dims, occ)
