"""Candidate cross-sections along the arch and greedy slice selection.

Candidates are numbered 1..12 from the inlet. Station 1 sits 25 mm downstream of the
inlet and stations 2..12 are spread uniformly over the remaining centerline. The
selection starts from the reference pair {2, 12}; station 1 only becomes eligible from
the second iteration on.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .contours import SliceContour, SliceSet
from .errors import ArchfitError, CoincidentCenters, NonFinite, TooShort
from .mesh import CenterlineCurve, Plane, TubeMesh, centerline_from_mesh

log = logging.getLogger(__name__)

N_CANDIDATES = 12
FIRST_OFFSET = 25.0
MIN_SPACING = 13.0
OUTLET_MARGIN = 5.0
START_SET = (2, 12)
METRICS = ("dice", "iou", "hd", "chamfer")


def candidate_stations(length: float, n: int = N_CANDIDATES, first: float = FIRST_OFFSET,
                       min_spacing: float = MIN_SPACING):
    """Arclengths of the candidate stations over a usable length, and their spacing (mm)."""
    if length <= first + (n - 1) * min_spacing:
        raise TooShort(
            f"centerline {length:.1f} mm is shorter than {first + (n - 1) * min_spacing:.1f} mm"
        )
    spacing = (length - first) / (n - 1)
    return first + spacing * np.arange(n), spacing


def candidate_planes(mesh: TubeMesh, n: int = N_CANDIDATES, centerline=None):
    """Planes orthogonal to the centerline at each candidate station.

    Returns (planes, station arclengths, spacing). Normals follow the flow direction.
    Stations span the centerline minus a short outlet margin.
    """
    cl = centerline if centerline is not None else centerline_from_mesh(mesh, 500)
    # the last station keeps clear of the open outlet ring
    s, spacing = candidate_stations(cl.length - OUTLET_MARGIN, n)
    pts = cl.point_at(s)
    tans = cl.tangent_at(s)
    return [Plane(p, t) for p, t in zip(pts, tans)], s, spacing


def surrogate_centerline(contours, n_points: int = 300) -> CenterlineCurve:
    """Semicircle between the first and last contour centroids.

    The radius is half the chord. The arc bulges along the mean of the first plane
    normal and the reversed last normal (normals point downstream), made orthogonal
    to the chord.
    """
    contours = list(contours)
    c0, c1 = contours[0].centroid, contours[-1].centroid
    chord = c1 - c0
    L = float(np.linalg.norm(chord))
    if L < 1e-9:
        raise CoincidentCenters("first and last contour centroids coincide")
    e = chord / L
    b = 0.5 * (contours[0].plane.normal - contours[-1].plane.normal)
    b = b - (b @ e) * e
    if np.linalg.norm(b) < 1e-9:
        helper = np.array([0.0, 0.0, 1.0]) if abs(e[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
        b = helper - (helper @ e) * e
    b /= np.linalg.norm(b)
    mid, r = (c0 + c1) / 2, L / 2
    th = np.linspace(0.0, np.pi, n_points)
    pts = mid + r * (np.cos(th)[:, None] * (-e) + np.sin(th)[:, None] * b)
    pts[0], pts[-1] = c0, c1
    return CenterlineCurve(pts)


# --- greedy selection ----------------------------------------------------------------


@dataclass(frozen=True)
class ScoreRow:
    """Cohort-mean metrics of one (iteration, candidate) cell of the score table."""

    iteration: int
    n_slices: int
    candidate: int
    dice: float
    iou: float
    hd: float
    chamfer: float
    combined_error: float
    n_ok: int

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass
class SlicePlan:
    """Greedy selection order and the full per-iteration score table."""

    candidate_planes: list
    selected: list
    scores: list = field(default_factory=list)
    spacing: list = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.selected)) != len(self.selected):
            raise ValueError("selected stations must be unique")

    @property
    def n_iterations(self) -> int:
        return max((r.iteration for r in self.scores), default=0)

    def rows(self, iteration: int) -> list:
        return [r for r in self.scores if r.iteration == iteration]

    def chosen(self) -> list:
        """The winning row of every iteration, in order."""
        out = []
        for it in range(1, self.n_iterations + 1):
            pick = self.selected[len(START_SET) + it - 1]
            out.extend(r for r in self.rows(it) if r.candidate == pick)
        return out

    def dice_path(self) -> list:
        return [r.dice for r in self.chosen()]


def combined_errors(metrics: dict) -> dict:
    """Min-max normalized errors (1 - dice, 1 - iou, hd, chamfer) averaged per candidate.

    ``metrics`` maps candidate -> dict with dice, iou, hd, chamfer. An error that is
    constant across candidates contributes 0.
    """
    keys = sorted(metrics)
    if not keys:
        return {}
    E = np.array([[1 - metrics[k]["dice"], 1 - metrics[k]["iou"], metrics[k]["hd"],
                   metrics[k]["chamfer"]] for k in keys], dtype=float)
    lo, hi = E.min(axis=0), E.max(axis=0)
    span = hi - lo
    N = np.zeros_like(E)
    ok = span > 0
    N[:, ok] = (E[:, ok] - lo[ok]) / span[ok]
    return {k: float(v) for k, v in zip(keys, N.mean(axis=1))}


def _argmin(errors: dict) -> int:
    # ties go to the lowest station index
    return min(errors, key=lambda k: (errors[k], k))


def greedy_path(evaluate, candidates, start=None, max_slices=None, deferred=(1,)):
    """Greedy forward selection over station indices.

    ``evaluate(subset)`` returns cohort-mean metrics for a sorted tuple of stations, or
    None when no shape could be fitted. Stations in ``deferred`` join the pool from the
    second iteration on. Returns (selected order, score rows).
    """
    candidates = sorted(candidates)
    start = tuple(start) if start is not None else (2, candidates[-1])
    if not set(start) <= set(candidates):
        raise ValueError(f"start set {start} not among candidates")
    max_slices = len(candidates) if max_slices is None else min(max_slices, len(candidates))
    selected = list(start)
    rows = []
    iteration = 0
    while len(selected) < max_slices:
        iteration += 1
        pool = [c for c in candidates if c not in selected
                and (iteration > 1 or c not in deferred)]
        if not pool:
            pool = [c for c in candidates if c not in selected]
        metrics = {}
        for c in pool:
            m = evaluate(tuple(sorted(selected + [c])))
            if m is not None:
                metrics[c] = m
        if not metrics:
            raise ArchfitError(f"iteration {iteration}: no candidate could be evaluated")
        err = combined_errors(metrics)
        for c in sorted(metrics):
            m = metrics[c]
            rows.append(ScoreRow(iteration, len(selected) + 1, c, m["dice"], m["iou"], m["hd"],
                                 m["chamfer"], err[c], int(m.get("n_ok", 0))))
        pick = _argmin(err)
        log.info("iteration %d: station %d (error %.3f)", iteration, pick, err[pick])
        selected.append(pick)
    return selected, rows


def _fit_one(model, contours, config, ref):
    from .fitting import Fitter
    from .metrics import compare_meshes

    fitter = Fitter(model, config)
    _, final, data, _ = fitter.fit_frame0(contours)
    return compare_meshes(fitter.to_mesh(final.nodes, data.com), ref, radius_profile=False)


class CohortEvaluator:
    """Fits every cohort shape from a subset of its candidate slices; memoized.

    Each shape is sliced once at all candidate stations. A failed cut or fit marks
    the (shape, subset) cell missing and the cohort mean uses the remaining shapes.
    """

    def __init__(self, model, cohort, fit_config=None, n_candidates=N_CANDIDATES,
                 noise_sigma=0.0, seed=0, jobs=1):
        from .fitting import FitConfig
        from .synth import slice_contour

        self.model = model
        self.cohort = list(cohort)
        self.config = fit_config or FitConfig()
        self.jobs = jobs
        self.planes, self.spacing, self.contours = [], [], []
        rng = np.random.default_rng(seed)
        for mesh in self.cohort:
            planes, _, sp = candidate_planes(mesh, n_candidates)
            self.planes.append(planes)
            self.spacing.append(float(sp))
            per = {}
            for i, pl in enumerate(planes, start=1):
                try:
                    per[i] = slice_contour(mesh, pl, noise_sigma=noise_sigma, rng=rng, station=i)
                except ArchfitError as exc:
                    log.warning("station %d unusable: %s", i, exc)
            self.contours.append(per)
        self.cache = {}
        self.failures = 0
        self.attempts = 0

    def reports(self, subset) -> list:
        """Per-shape MetricReport (None where missing) for a tuple of stations."""
        key = tuple(sorted(subset))
        if key in self.cache:
            return self.cache[key]
        jobs = []
        for i, mesh in enumerate(self.cohort):
            per = self.contours[i]
            if all(s in per for s in key):
                jobs.append((i, [per[s] for s in key]))
        out = [None] * len(self.cohort)
        if self.jobs != 1 and len(jobs) > 1:
            from joblib import Parallel, delayed

            res = Parallel(n_jobs=self.jobs)(
                delayed(_safe_fit)(self.model, c, self.config, self.cohort[i]) for i, c in jobs)
        else:
            res = [_safe_fit(self.model, c, self.config, self.cohort[i]) for i, c in jobs]
        for (i, _), r in zip(jobs, res):
            out[i] = r
        self.attempts += len(self.cohort)
        self.failures += sum(r is None for r in out)
        self.cache[key] = out
        return out

    def __call__(self, subset):
        reps = [r for r in self.reports(subset) if r is not None]
        if not reps:
            return None
        return {
            "dice": float(np.mean([r.dice for r in reps])),
            "iou": float(np.mean([r.iou for r in reps])),
            "hd": float(np.mean([r.hausdorff for r in reps])),
            "chamfer": float(np.mean([r.chamfer for r in reps])),
            "n_ok": len(reps),
        }

    @property
    def failure_fraction(self) -> float:
        return self.failures / self.attempts if self.attempts else 0.0


def _safe_fit(model, contours, config, ref):
    try:
        return _fit_one(model, contours, config, ref)
    except (ArchfitError, NonFinite) as exc:
        log.warning("fit failed: %s", exc)
        return None


def greedy_select(model, cohort, fit_config=None, n_candidates=N_CANDIDATES, max_slices=None,
                  noise_sigma=0.0, seed=0, jobs=1, evaluator=None) -> SlicePlan:
    """The slice-selection study: greedy order from the {2, n} pair with its score table."""
    ev = evaluator or CohortEvaluator(model, cohort, fit_config, n_candidates, noise_sigma,
                                      seed, jobs)
    selected, rows = greedy_path(ev, range(1, n_candidates + 1), (2, n_candidates), max_slices)
    return SlicePlan(ev.planes, selected, rows, ev.spacing)


@dataclass(frozen=True)
class OracleStep:
    iteration: int
    greedy: int
    oracle: int
    oracle_errors: dict
    best_subset: tuple

    @property
    def agrees(self) -> bool:
        return self.greedy == self.oracle


def exhaustive_oracle(evaluate, plan_or_selected, candidates, start=None, deferred=(1,),
                      max_candidates=8):
    """Exhaustive-subset check of a greedy path.

    Every subset of each size that contains the start pair is evaluated. For each
    iteration the oracle's choice is the argmin of the normalized combined error over
    the subsets that extend the greedy prefix by one station, recomputed from the
    exhaustive table. ``best_subset`` is the best subset of that size overall.
    """
    candidates = sorted(candidates)
    if len(candidates) > max_candidates:
        raise ValueError(f"exhaustive search is limited to {max_candidates} candidates")
    selected = list(getattr(plan_or_selected, "selected", plan_or_selected))
    start = tuple(start) if start is not None else tuple(selected[:2])
    rest = [c for c in candidates if c not in start]
    table = {}
    for k in range(1, len(selected) - len(start) + 1):
        for extra in itertools.combinations(rest, k):
            key = tuple(sorted(start + extra))
            table[key] = evaluate(key)
    steps = []
    for it, pick in enumerate(selected[len(start):], start=1):
        prefix = set(selected[:len(start) + it - 1])
        ext = {}
        for key, m in table.items():
            if m is None or len(key) != len(prefix) + 1 or not prefix <= set(key):
                continue
            (c,) = set(key) - prefix
            if it == 1 and c in deferred:
                continue
            ext[c] = m
        errs = combined_errors(ext)
        same_size = {key: m for key, m in table.items()
                     if m is not None and len(key) == len(prefix) + 1}
        idx = {i: key for i, key in enumerate(sorted(same_size))}
        all_err = combined_errors({i: same_size[key] for i, key in idx.items()})
        best = idx[_argmin(all_err)] if all_err else ()
        steps.append(OracleStep(it, pick, _argmin(errs), errs, best))
    return steps
