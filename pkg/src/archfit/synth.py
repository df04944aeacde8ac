"""Parametric aortic-arch-like tubes, cardiac motion sequences and noisy contour extraction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .contours import N_CONTOUR_POINTS, SliceContour, SliceSet
from .errors import DegenerateMesh, SelfIntersection
from .mesh import N_RINGS, PTS_PER_RING, Plane, TubeMesh, resample_contour, slice_nearest


@dataclass(frozen=True)
class ArchParams:
    arch_radius: float = 38.0
    ascending_length: float = 52.0
    descending_length: float = 17.5  # outlet just below the PA plane, see pa_level_descending
    inlet_radius: float = 13.0
    taper: float = 0.75
    ellipticity: float = 1.0
    bend_out_of_plane: float = 0.0
    noise_amplitude: float = 0.0
    noise_corr_length: float = 40.0
    seed: int = 0

    def __post_init__(self):
        for name in ("arch_radius", "ascending_length", "descending_length", "inlet_radius",
                     "noise_corr_length"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.3 < self.taper < 2:
            raise ValueError(f"taper must lie in (0.3, 2), got {self.taper}")
        if not 0.5 < self.ellipticity < 2:
            raise ValueError(f"ellipticity must lie in (0.5, 2), got {self.ellipticity}")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def arch_centerline(params: ArchParams, n: int = 2000) -> np.ndarray:
    """Dense polyline: ascending +z segment, half-circle over the top, descending -z segment."""
    La, Ld, R = params.ascending_length, params.descending_length, params.arch_radius
    arc_len = np.pi * R
    total = La + arc_len + Ld
    s = np.linspace(0.0, total, n)
    pts = np.zeros((n, 3))
    asc = s <= La
    pts[asc] = np.stack([np.zeros(asc.sum()), np.zeros(asc.sum()), s[asc]], axis=1)
    arc = (s > La) & (s <= La + arc_len)
    th = np.pi - (s[arc] - La) / R
    pts[arc] = np.stack([R + R * np.cos(th), np.zeros(arc.sum()), La + R * np.sin(th)], axis=1)
    des = s > La + arc_len
    pts[des] = np.stack(
        [np.full(des.sum(), 2 * R), np.zeros(des.sum()), La - (s[des] - La - arc_len)], axis=1
    )
    if params.bend_out_of_plane:
        f = np.clip((s - La) / arc_len, 0.0, 1.0)
        smooth = f * f * (3 - 2 * f)
        pts[:, 1] = R * np.tan(params.bend_out_of_plane) * smooth
    return pts


def _parallel_frames(tangents: np.ndarray, u0) -> tuple[np.ndarray, np.ndarray]:
    """Rotation-minimizing frames along a sequence of unit tangents."""
    us = np.zeros_like(tangents)
    u = np.asarray(u0, dtype=float)
    u = u - (u @ tangents[0]) * tangents[0]
    u /= np.linalg.norm(u)
    us[0] = u
    for i in range(1, len(tangents)):
        u = u - (u @ tangents[i]) * tangents[i]
        u /= np.linalg.norm(u)
        us[i] = u
    vs = np.cross(tangents, us)
    return us, vs


def tube_from_centerline(
    centerline,
    radius,
    n_rings: int = N_RINGS,
    pts_per_ring: int = PTS_PER_RING,
    ellipticity: float = 1.0,
    perturbation=None,
) -> TubeMesh:
    """Sweep rings along a dense centerline polyline at uniform arclength.

    ``radius`` is a scalar or a callable of the arclength fraction in [0, 1];
    ``perturbation(theta, frac)`` adds a radial offset in mm.
    """
    cl = np.asarray(centerline, dtype=float)
    seg = np.linalg.norm(np.diff(cl, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    st = np.linspace(0.0, s[-1], n_rings)
    cents = np.stack([np.interp(st, s, cl[:, k]) for k in range(3)], axis=1)
    h = s[-1] * 1e-4
    ahead = np.stack([np.interp(np.minimum(st + h, s[-1]), s, cl[:, k]) for k in range(3)], 1)
    behind = np.stack([np.interp(np.maximum(st - h, 0.0), s, cl[:, k]) for k in range(3)], 1)
    tang = ahead - behind
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    helper = [1.0, 0.0, 0.0] if abs(tang[0, 0]) < 0.9 else [0.0, 1.0, 0.0]
    us, vs = _parallel_frames(tang, helper)
    frac = st / s[-1]
    r = np.array([radius(f) for f in frac]) if callable(radius) else np.full(n_rings, float(radius))
    theta = 2 * np.pi * np.arange(pts_per_ring) / pts_per_ring
    a = np.sqrt(ellipticity)
    ct, sn = np.cos(theta), np.sin(theta)
    rr = r[:, None] * np.ones_like(theta)[None]
    if perturbation is not None:
        rr = rr + perturbation(theta[None, :], frac[:, None])
    nodes = (
        cents[:, None, :]
        + (rr * a * ct)[..., None] * us[:, None, :]
        + (rr / a * sn)[..., None] * vs[:, None, :]
    )
    return TubeMesh(nodes.reshape(-1, 3), n_rings, pts_per_ring)


def _smooth_field(params: ArchParams, length: float):
    if params.noise_amplitude == 0:
        return None
    rng = np.random.default_rng(params.seed)
    n_axial = max(1, int(round(length / params.noise_corr_length)))
    ms = np.arange(0, 4)
    qs = np.arange(0, n_axial + 1)
    A = rng.standard_normal((len(ms), len(qs), 2))
    phase = rng.uniform(0, 2 * np.pi, (len(ms), len(qs)))
    damp = 1.0 / ((1.0 + ms[:, None]) * (1.0 + qs[None, :]))
    A *= damp[..., None]
    # unit RMS over the (theta, frac) domain; cos^2 and sin^2 each average to 1/2
    norm = np.sqrt(0.5 * (A**2).sum() * 0.5) or 1.0
    A *= params.noise_amplitude / norm

    def field(theta, frac):
        out = 0.0
        for i, m in enumerate(ms):
            for k, q in enumerate(qs):
                ax = np.cos(np.pi * q * frac + phase[i, k])
                out = out + (A[i, k, 0] * np.cos(m * theta) + A[i, k, 1] * np.sin(m * theta)) * ax
        return out

    return field


def generate_arch(params: ArchParams, n_rings: int = N_RINGS,
                  pts_per_ring: int = PTS_PER_RING) -> TubeMesh:
    r_in = params.inlet_radius
    r_max = r_in * max(1.0, params.taper) * max(np.sqrt(params.ellipticity),
                                                1 / np.sqrt(params.ellipticity))
    if params.arch_radius < 1.5 * (r_max + params.noise_amplitude):
        raise SelfIntersection(
            f"arch_radius {params.arch_radius} < 1.5 x max ring radius {r_max:.2f}"
        )
    cl = arch_centerline(params)
    length = float(np.linalg.norm(np.diff(cl, axis=0), axis=1).sum())
    mesh = tube_from_centerline(
        cl,
        lambda f: r_in * (1.0 + (params.taper - 1.0) * f),
        n_rings,
        pts_per_ring,
        ellipticity=params.ellipticity,
        perturbation=_smooth_field(params, length),
    )
    try:
        mesh.validate()
    except DegenerateMesh as exc:
        raise SelfIntersection(str(exc)) from exc
    return mesh


def pa_level_descending(ascending_length: float, arch_radius: float) -> float:
    """Descending limb length that puts the last candidate station level with the second.

    Stations 2 and 12 are the two cuts of the PA plane, one per limb. With n stations,
    the first at offset f and an outlet margin m, equating their heights on the
    straight limbs gives n Ld = (n - 2) La - pi R + n m - (n - 2) f.
    """
    from .planner import FIRST_OFFSET, N_CANDIDATES, OUTLET_MARGIN

    n, f, m = N_CANDIDATES, FIRST_OFFSET, OUTLET_MARGIN
    return ((n - 2) * ascending_length - np.pi * arch_radius + n * m - (n - 2) * f) / n


def regime_params(u: float, rng=None, noise_amplitude: float = 0.3, seed: int = 0
                  ) -> ArchParams:
    """Arch parameters at scale regime ``u`` in [0, 1] (young to elderly).

    ``u`` drives inlet radius 11-17 mm, arch radius (width about 72-92 mm) and limb
    lengths; arch height stays near 0.65 of the width and candidate spacing runs from
    about 1.4 to 1.7 cm across the range. With ``rng`` the parameters scatter
    around the regime means.
    """
    def jit(sd):
        return 0.0 if rng is None else rng.normal(0, sd)

    R = 36.0 + 10.0 * u + jit(1.2)
    La = 52.0 + 6.0 * u + jit(1.5)
    return ArchParams(
        arch_radius=R,
        ascending_length=La,
        descending_length=pa_level_descending(La, R) + jit(1.5),
        inlet_radius=11.0 + 6.0 * u + jit(0.5),
        taper=float(np.clip(0.75 - 0.05 * u + jit(0.03), 0.4, 1.5)),
        ellipticity=float(np.clip(1.0 + jit(0.04), 0.6, 1.6)),
        bend_out_of_plane=jit(0.12),
        noise_amplitude=noise_amplitude,
        noise_corr_length=40.0,
        seed=seed,
    )


def cohort_params(n: int, seed: int = 0, noise_amplitude: float = 0.3) -> list[ArchParams]:
    """``n`` parameter draws spread uniformly over the scale regimes."""
    from .planner import FIRST_OFFSET, MIN_SPACING, OUTLET_MARGIN

    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        u = rng.uniform(0.0, 1.0)
        p = regime_params(u, rng, noise_amplitude)
        p = replace(p, seed=int(rng.integers(0, 2**31 - 1)))
        r_max = p.inlet_radius * max(1.0, p.taper)
        length = p.ascending_length + np.pi * p.arch_radius + p.descending_length
        # keep clear of self-intersection and of the minimum candidate spacing
        if (p.arch_radius >= 1.5 * (r_max + p.noise_amplitude) * 1.05
                and length - OUTLET_MARGIN > 1.02 * (FIRST_OFFSET + 11 * MIN_SPACING)):
            out.append(p)
    return out


def generate_cohort(n: int, seed: int = 0, noise_amplitude: float = 0.3):
    params = cohort_params(n, seed, noise_amplitude)
    return [generate_arch(p) for p in params], params


@dataclass(frozen=True)
class MotionProfile:
    radial: np.ndarray
    axial: np.ndarray
    peak_frame: int = 0

    def __post_init__(self):
        r = np.asarray(self.radial, dtype=float)
        a = np.asarray(self.axial, dtype=float)
        if r.shape != a.shape or r.ndim != 1:
            raise ValueError("radial and axial factors must be equal-length 1-D arrays")
        if np.any(r <= 0) or np.any(a <= 0):
            raise ValueError("scale factors must be > 0")
        if r[0] != 1.0 or a[0] != 1.0:
            raise ValueError("frame 0 factors must equal 1.0")
        object.__setattr__(self, "radial", r)
        object.__setattr__(self, "axial", a)

    @property
    def n_frames(self) -> int:
        return len(self.radial)

    @classmethod
    def pulse(cls, n_frames: int = 40, peak_radial: float = 1.11, peak_axial: float = 1.035,
              peak_frame: int = 8) -> "MotionProfile":
        """Raised-cosine systolic bump peaking at ``peak_frame``, flat diastole afterwards."""
        t = np.arange(n_frames, dtype=float)
        width = 2 * peak_frame
        bump = np.where(t < width, 0.5 * (1 - np.cos(2 * np.pi * t / max(width, 1))), 0.0)
        return cls(1.0 + (peak_radial - 1.0) * bump, 1.0 + (peak_axial - 1.0) * bump, peak_frame)

    @classmethod
    def static(cls, n_frames: int = 40) -> "MotionProfile":
        return cls(np.ones(n_frames), np.ones(n_frames), 0)


def animate(mesh: TubeMesh, profile: MotionProfile) -> list[TubeMesh]:
    """Scale each ring about its centroid and stretch the centroid path about the inlet."""
    rings = mesh.rings
    cents = rings.mean(axis=1, keepdims=True)
    inlet = cents[0]
    seq = [mesh]
    for t in range(1, profile.n_frames):
        # displacement form, so unit factors reproduce the input bit for bit
        nodes = (rings + (profile.radial[t] - 1.0) * (rings - cents)
                 + (profile.axial[t] - 1.0) * (cents - inlet))
        seq.append(mesh.with_nodes(nodes.reshape(-1, 3)))
    return seq


def slice_contour(mesh, plane, p: int = N_CONTOUR_POINTS, noise_sigma: float = 0.0, rng=None,
                  anchor=None, station=None, frame: int = 0, shift: float = 0.0) -> SliceContour:
    """One resampled contour of ``mesh`` on ``plane`` with optional in-plane noise.

    ``shift`` cuts at a plane moved along its normal and records the result on the
    nominal plane.
    """
    anchor = plane.origin if anchor is None else anchor
    cut = Plane(plane.origin + shift * plane.normal, plane.normal) if shift else plane
    pts = resample_contour(slice_nearest(mesh, cut, anchor), p) - shift * plane.normal
    if noise_sigma > 0:
        u, v = plane.basis()
        g = rng.standard_normal((p, 2)) * noise_sigma
        pts = pts + g[:, :1] * u + g[:, 1:] * v
    return SliceContour(plane, pts, frame=frame, station=station)


def extract_slice_set(
    seq,
    planes,
    p: int = N_CONTOUR_POINTS,
    noise_sigma: float = 0.5,
    seed: int = 0,
    anchors=None,
    stations=None,
    plane_jitter: float = 0.0,
) -> SliceSet:
    """Slice every frame with fixed planes, resample to ``p`` points, add in-plane noise.

    ``anchors`` (one point per plane) pick the loop when a plane cuts the tube twice;
    the default is the plane origin. ``plane_jitter`` shifts each plane along its normal
    once (shared by all frames).
    """
    rng = np.random.default_rng(seed)
    planes = list(planes)
    shifts = rng.normal(0, plane_jitter, len(planes)) if plane_jitter > 0 else np.zeros(len(planes))
    anchors = [pl.origin for pl in planes] if anchors is None else list(anchors)
    stations = list(range(1, len(planes) + 1)) if stations is None else list(stations)
    frames = []
    for t, mesh in enumerate(seq):
        row = [slice_contour(mesh, pl, p, noise_sigma, rng, anchor, st, t, dz)
               for pl, anchor, st, dz in zip(planes, anchors, stations, shifts)]
        frames.append(row)
    return SliceSet(frames)
