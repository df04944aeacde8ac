"""Arch landmarks, shape features, wall motion and strain.

Landmarks live on the mesh centerline: A (inlet), D (outlet), T (highest point along
``up``), and B / C where the pulmonary-artery level plane crosses the ascending and
descending limbs. The PA level is the height of candidate station 2.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import AmbiguousApex, ArchfitError, EmptyRegion, NoApex, TopologyMismatch
from .mesh import (
    CenterlineCurve,
    Plane,
    TubeMesh,
    centerline_from_mesh,
    ring_radii,
    slice_nearest,
)

log = logging.getLogger(__name__)

UP = (0.0, 0.0, 1.0)
STATION_INTERVAL = 7.5
CL_POINTS = 500


@dataclass(frozen=True)
class ArchLandmarks:
    A: np.ndarray
    B: np.ndarray
    T: np.ndarray
    C: np.ndarray
    D: np.ndarray
    s: tuple  # arclengths of A, B, T, C, D

    def __post_init__(self):
        if not all(a <= b for a, b in zip(self.s, self.s[1:])):
            raise ValueError(f"landmark arclengths out of order: {self.s}")

    @property
    def regions(self) -> dict:
        sA, sB, _, sC, sD = self.s
        return {"ascending": (sA, sB), "arch": (sB, sC), "descending": (sC, sD)}

    @property
    def length_AD(self) -> float:
        return self.s[4] - self.s[0]


def _as_centerline(obj) -> CenterlineCurve:
    if isinstance(obj, CenterlineCurve):
        return obj
    return centerline_from_mesh(obj, CL_POINTS)


def pa_level(cl: CenterlineCurve, up=UP) -> float:
    """Height along ``up`` of the candidate-station-2 position."""
    from .planner import OUTLET_MARGIN, candidate_stations

    s, _ = candidate_stations(cl.length - OUTLET_MARGIN)
    return float(cl.point_at(s[1:2])[0] @ np.asarray(up, dtype=float))


def _crossing(s, h, level):
    """Arclength where the height profile meets ``level`` nearest the apex.

    ``s``/``h`` run away from the apex. Returns the first sample interval bracketing
    the level, linearly interpolated; the far end when the limb stays above it.
    """
    below = np.nonzero(h <= level)[0]
    if len(below) == 0:
        return s[-1]
    j = below[0]
    if j == 0:
        return s[0]
    h0, h1 = h[j - 1], h[j]
    f = (h0 - level) / (h0 - h1) if h0 != h1 else 1.0
    return s[j - 1] + f * (s[j] - s[j - 1])


def detect_landmarks(mesh_or_cl, up=UP, level=None, tol=1e-6) -> ArchLandmarks:
    """A, B, T, C, D on the centerline of a mesh (or on a given centerline).

    ``level`` overrides the PA height used for B and C.
    """
    cl = _as_centerline(mesh_or_cl)
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    P, s = cl.points, cl.arclength
    h = P @ up
    top = h.max()
    at_top = np.nonzero(h >= top - tol)[0]
    if at_top[0] == 0 or at_top[-1] == len(h) - 1:
        raise NoApex("height is maximal at a centerline end")
    if at_top[-1] - at_top[0] > 1:
        warnings.warn("flat apex; using the plateau midpoint", AmbiguousApex, stacklevel=2)
        sT = 0.5 * (s[at_top[0]] + s[at_top[-1]])
    elif len(at_top) == 2:
        # two samples straddling the peak symmetrically
        sT = 0.5 * (s[at_top[0]] + s[at_top[1]])
    else:
        i = int(at_top[0])
        # refine with a parabola through the three samples around the maximum
        h0, h1, h2 = h[i - 1], h[i], h[i + 1]
        den = h0 - 2 * h1 + h2
        off = 0.5 * (h0 - h2) / den if den < 0 else 0.0
        sT = s[i] + off * (s[i + 1] - s[i] if off > 0 else s[i] - s[i - 1])
    lvl = pa_level(cl, up) if level is None else float(level)
    asc = s <= sT
    desc = s >= sT
    sB = _crossing(s[asc][::-1], h[asc][::-1], lvl)
    sC = _crossing(s[desc], h[desc], lvl)
    arcs = (0.0, float(sB), float(sT), float(sC), float(cl.length))
    pts = cl.point_at(np.array(arcs))
    return ArchLandmarks(*pts, s=arcs)


def _point_segment_distance(p, a, b) -> float:
    ab = b - a
    L2 = float(ab @ ab)
    t = 0.0 if L2 == 0 else min(1.0, max(0.0, float((p - a) @ ab) / L2))
    return float(np.linalg.norm(p - (a + t * ab)))


def arch_dimensions(landmarks: ArchLandmarks, centerline=None):
    """Arch height and width (mm): h = distance of T to segment BC, w = |B - C|."""
    w = float(np.linalg.norm(landmarks.B - landmarks.C))
    h = _point_segment_distance(landmarks.T, landmarks.B, landmarks.C)
    return h, w


def tortuosity(landmarks: ArchLandmarks, centerline=None) -> float:
    """1 - w / L_AD."""
    _, w = arch_dimensions(landmarks)
    return 1.0 - w / landmarks.length_AD


def wall_motion(mesh_t: TubeMesh, mesh_0: TubeMesh) -> np.ndarray:
    """Per-cell displacement of triangle centroids, no realignment."""
    if mesh_t.topology != mesh_0.topology:
        raise TopologyMismatch(f"{mesh_t.topology} vs {mesh_0.topology}")
    return np.linalg.norm(mesh_t.cell_centers() - mesh_0.cell_centers(), axis=1)


def ring_stations(mesh: TubeMesh, cl=None) -> np.ndarray:
    """Arclength of every ring centroid projected on the (reference) centerline."""
    cl = centerline_from_mesh(mesh, CL_POINTS) if cl is None else cl
    return cl.project(mesh.ring_centroids())


def radial_strain(mesh_t: TubeMesh, mesh_0: TubeMesh, region, stations=None) -> float:
    """Mean |r_t - r_0| / r_0 over the rings of mesh_0 whose station lies in ``region``."""
    if mesh_t.topology != mesh_0.topology:
        raise TopologyMismatch(f"{mesh_t.topology} vs {mesh_0.topology}")
    st = ring_stations(mesh_0) if stations is None else np.asarray(stations)
    lo, hi = region
    sel = (st >= lo) & (st <= hi)
    if not np.any(sel):
        raise EmptyRegion(f"no ring between {lo:.1f} and {hi:.1f} mm")
    r0, rt = ring_radii(mesh_0)[sel], ring_radii(mesh_t)[sel]
    return float(np.mean(np.abs(rt - r0) / r0))


def centerline_length_change(mesh_t: TubeMesh, mesh_0: TubeMesh, up=UP) -> float:
    """(L_AD(t) - L_AD(0)) / L_AD(0)."""
    if mesh_t.topology != mesh_0.topology:
        raise TopologyMismatch(f"{mesh_t.topology} vs {mesh_0.topology}")
    L0 = detect_landmarks(mesh_0, up).length_AD
    Lt = detect_landmarks(mesh_t, up).length_AD
    return (Lt - L0) / L0


def station_arclengths(length: float, interval: float = STATION_INTERVAL) -> np.ndarray:
    if interval <= 0:
        raise ValueError("interval must be > 0")
    s = np.arange(0.0, length + 1e-9 * max(length, 1.0), interval)
    if length - s[-1] > 1e-9 * max(length, 1.0):
        s = np.append(s, length)
    return s


def station_slices(mesh: TubeMesh, interval: float = STATION_INTERVAL):
    """(arclength, contour polyline) at every ``interval`` mm, both ends included.

    Stations whose cut fails are skipped with a warning. The end cuts move inward by a
    negligible distance so they do not coincide with the open end rings.
    """
    cl = centerline_from_mesh(mesh, CL_POINTS)
    eps = 1e-6 * cl.length
    out = []
    for s in station_arclengths(cl.length, interval):
        sc = np.array([min(max(s, eps), cl.length - eps)])
        p, t = cl.point_at(sc)[0], cl.tangent_at(sc)[0]
        try:
            out.append((float(s), slice_nearest(mesh, Plane(p, t), p)))
        except ArchfitError as exc:
            log.warning("station %.1f mm skipped: %s", s, exc)
    return out


def _radius_at(stations, radii, s) -> float:
    return float(np.interp(s, stations, radii))


@dataclass
class VesselFeatureSet:
    radius_A: float
    radius_B: float
    radius_T: float
    radius_C: float
    ascending_length: float
    length_AD: float
    width: float
    height: float
    tortuosity: float
    radial_strain: float = 0.0
    length_change: float = 0.0
    wall_motion_mean: float = 0.0
    wall_motion_max: float = 0.0

    def row(self) -> dict:
        return asdict(self)


def vessel_features(mesh: TubeMesh, mesh_0: TubeMesh = None, up=UP,
                    landmarks_0: ArchLandmarks = None) -> VesselFeatureSet:
    """Static features of ``mesh``; dynamic ones relative to ``mesh_0`` when given.

    Strain is averaged over the ascending region of the reference frame.
    """
    lm = detect_landmarks(mesh, up)
    h, w = arch_dimensions(lm)
    st = ring_stations(mesh)
    rr = ring_radii(mesh)
    feats = VesselFeatureSet(
        *(_radius_at(st, rr, s) for s in (lm.s[0], lm.s[1], lm.s[2], lm.s[3])),
        ascending_length=lm.s[1] - lm.s[0], length_AD=lm.length_AD, width=w, height=h,
        tortuosity=tortuosity(lm),
    )
    if mesh_0 is not None:
        lm0 = landmarks_0 or detect_landmarks(mesh_0, up)
        feats.radial_strain = radial_strain(mesh, mesh_0, lm0.regions["ascending"])
        feats.length_change = (lm.length_AD - lm0.length_AD) / lm0.length_AD
        wm = wall_motion(mesh, mesh_0)
        feats.wall_motion_mean = float(wm.mean())
        feats.wall_motion_max = float(wm.max())
    return feats


def sequence_features(meshes, up=UP) -> list:
    """One VesselFeatureSet per frame, dynamics relative to frame 0."""
    meshes = list(meshes)
    lm0 = detect_landmarks(meshes[0], up)
    return [vessel_features(m, meshes[0], up, lm0) for m in meshes]


def peak(values) -> tuple:
    """(index, value) of the maximum."""
    values = np.asarray(values, dtype=float)
    i = int(np.argmax(values))
    return i, float(values[i])
