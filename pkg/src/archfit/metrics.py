"""Voxel overlap, point-set surface distances and radius-error profiles."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ArchfitError, EmptySet, GridMismatch, SliceFailure
from .mesh import (
    Plane,
    TubeMesh,
    VoxelMask,
    centerline_from_mesh,
    contour_radius,
    dense_surface_points,
    grid_for,
    slice_nearest,
    voxelize,
)

log = logging.getLogger(__name__)

DEFAULT_SPACING = 1.0
# surface point sets for the distance metrics: rings interpolated 4x along the vessel,
# so distances measure the surfaces rather than how the rings happen to be spaced
SURFACE_FACTOR = 4


def _counts(a: VoxelMask, b: VoxelMask):
    if not a.same_grid(b):
        raise GridMismatch("masks live on different voxel grids")
    A, B = a.occupancy, b.occupancy
    tp = int(np.count_nonzero(A & B))
    fp = int(np.count_nonzero(A & ~B))
    fn = int(np.count_nonzero(~A & B))
    return tp, fp, fn


def dice(a: VoxelMask, b: VoxelMask) -> float:
    tp, fp, fn = _counts(a, b)
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def iou(a: VoxelMask, b: VoxelMask) -> float:
    tp, fp, fn = _counts(a, b)
    den = tp + fp + fn
    return 1.0 if den == 0 else tp / den


def _min_dists(x, y, method="kdtree", chunk=512) -> np.ndarray:
    """For each row of x, the distance to its nearest row of y.

    Both methods are exact. The tree only picks the neighbour; the distance is then
    evaluated with the same arithmetic as the brute-force sweep.
    """
    if method == "kdtree":
        idx = cKDTree(y).query(x)[1]
        return np.sqrt(((x - y[idx]) ** 2).sum(-1))
    out = np.empty(len(x))
    for i in range(0, len(x), chunk):
        d2 = ((x[i:i + chunk, None, :] - y[None, :, :]) ** 2).sum(-1)
        out[i:i + chunk] = np.sqrt(d2.min(axis=1))
    return out


def _directed(x, y):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.size == 0 or y.size == 0:
        raise EmptySet("point sets must be non-empty")
    return _min_dists(x, y), _min_dists(y, x)


def hausdorff(x, y) -> float:
    dxy, dyx = _directed(x, y)
    return float(max(dxy.max(), dyx.max()))


def asd(x, y) -> float:
    dxy, dyx = _directed(x, y)
    return (math.fsum(dxy) + math.fsum(dyx)) / (len(dxy) + len(dyx))


def chamfer(x, y) -> float:
    dxy, dyx = _directed(x, y)
    return math.fsum(dxy) / len(dxy) + math.fsum(dyx) / len(dyx)


def surface_distances(x, y) -> dict:
    """Hausdorff, ASD and Chamfer from one pair of nearest-neighbour sweeps."""
    dxy, dyx = _directed(x, y)
    sx, sy = math.fsum(dxy), math.fsum(dyx)
    return {
        "hausdorff": float(max(dxy.max(), dyx.max())),
        "asd": (sx + sy) / (len(dxy) + len(dyx)),
        "chamfer": sx / len(dxy) + sy / len(dyx),
    }


def mesh_masks(fit: TubeMesh, ref: TubeMesh, spacing=DEFAULT_SPACING):
    origin, dims = grid_for([fit, ref], spacing)
    return voxelize(fit, spacing, origin, dims), voxelize(ref, spacing, origin, dims)


def mesh_to_mask(mesh: TubeMesh, mask: VoxelMask) -> VoxelMask:
    """Project a mesh onto an existing mask's grid."""
    return voxelize(mesh, mask.spacing, mask.origin, mask.dims)


@dataclass
class StationRadius:
    arclength: float
    radius_ref: float
    radius_fit: float

    @property
    def abs_err(self) -> float:
        return abs(self.radius_fit - self.radius_ref)

    @property
    def rel_err(self) -> float:
        return (self.radius_fit - self.radius_ref) / self.radius_ref


def radius_error_profile(fit: TubeMesh, ref: TubeMesh, stations=None, planes=None,
                         n_stations: int = 12):
    """Effective radius (perimeter / 2 pi) of both meshes cut by the same planes.

    Planes are orthogonal to the reference centerline at ``stations`` (arclengths, mm);
    the default stations are the planner's candidate positions. A failed cut marks the
    station missing (None).
    """
    cl = centerline_from_mesh(ref, 500)
    if planes is None:
        if stations is None:
            from .planner import OUTLET_MARGIN, candidate_stations

            stations, _ = candidate_stations(cl.length - OUTLET_MARGIN, n_stations)
        stations = np.asarray(stations, dtype=float)
        pts, tans = cl.point_at(stations), cl.tangent_at(stations)
        planes = [Plane(p, t) for p, t in zip(pts, tans)]
    else:
        stations = cl.project(np.array([pl.origin for pl in planes]))
    out = []
    for s, pl in zip(stations, planes):
        try:
            r_ref = contour_radius(slice_nearest(ref, pl))
            r_fit = contour_radius(slice_nearest(fit, pl))
        except ArchfitError as exc:
            log.warning("station at %.1f mm failed: %s", s, exc)
            out.append(None)
            continue
        out.append(StationRadius(float(s), r_ref, r_fit))
    return out


@dataclass
class MetricReport:
    dice: float
    iou: float
    hausdorff: float
    chamfer: float
    asd: float
    radius_profile: list = field(default_factory=list)
    sampling: str = f"rings x{SURFACE_FACTOR}"

    def row(self) -> dict:
        d = asdict(self)
        d.pop("radius_profile")
        prof = [p for p in self.radius_profile if p is not None]
        d["mean_abs_radius_err"] = float(np.mean([p.abs_err for p in prof])) if prof else math.nan
        d["mean_rel_radius_err"] = float(np.mean([p.rel_err for p in prof])) if prof else math.nan
        return d


def compare_meshes(fit: TubeMesh, ref: TubeMesh, spacing=DEFAULT_SPACING,
                   radius_profile=True, ref_mask=None, surface_factor=SURFACE_FACTOR
                   ) -> MetricReport:
    """Overlap on a shared voxel grid, distances between surface samples.

    ``surface_factor`` = 1 compares raw nodes.
    """
    if ref_mask is None:
        a, b = mesh_masks(fit, ref, spacing)
    else:
        a, b = mesh_to_mask(fit, ref_mask), ref_mask
    dist = surface_distances(dense_surface_points(fit, surface_factor),
                             dense_surface_points(ref, surface_factor))
    prof = radius_error_profile(fit, ref) if radius_profile else []
    sampling = "mesh nodes" if surface_factor == 1 else f"rings x{surface_factor}"
    return MetricReport(dice(a, b), iou(a, b), dist["hausdorff"], dist["chamfer"], dist["asd"],
                        prof, sampling)
