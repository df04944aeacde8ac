"""End-to-end synthetic studies shared by the experiment scripts and the acceptance tests.

closed_loop   cohort -> shape model -> greedy slice plan -> fits of held-out samples
slice_sweep   radius-error profiles for several slice subsets on the same shapes
strain_study  a pulsating synthetic sequence fitted frame by frame
planner_check greedy path against the exhaustive-subset oracle on a reduced problem
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .fitting import FitConfig, Fitter, fit_sequence
from .metrics import compare_meshes
from .planner import CohortEvaluator, candidate_planes, exhaustive_oracle, greedy_select
from .ssm import build_model, sample_shape
from .synth import ArchParams, MotionProfile, animate, extract_slice_set, generate_arch, \
    generate_cohort
from .vessel import detect_landmarks, peak, sequence_features

log = logging.getLogger(__name__)

STRAIN_STATIONS = (1, 2, 4, 7, 10, 12)


def _seeds(root: int, n: int) -> list:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root).spawn(n)]


def training_model(n_shapes=30, n_modes=10, seed=1, noise_amplitude=0.3):
    meshes, params = generate_cohort(n_shapes, seed=seed, noise_amplitude=noise_amplitude)
    return build_model(meshes, n_modes), meshes


def sample_cohort(model, n, seed, sigma_scale=1.58) -> list:
    return [sample_shape(model, s, sigma_scale) for s in _seeds(seed, n)]


def fit_from_stations(model, mesh, stations, config=FitConfig(), noise_sigma=0.0, seed=0):
    """Slice ``mesh`` at candidate ``stations``, fit frame 0, return (fitted mesh, state)."""
    planes, _, _ = candidate_planes(mesh)
    stations = sorted(stations)
    ss = extract_slice_set([mesh], [planes[i - 1] for i in stations], noise_sigma=noise_sigma,
                           seed=seed, stations=stations)
    fitter = Fitter(model, config)
    state, final, data, _ = fitter.fit_frame0(ss.frames[0])
    return fitter.to_mesh(final.nodes, data.com), state


@dataclass
class ClosedLoop:
    selected: list
    plan: object
    reports: list
    timings: dict = field(default_factory=dict)

    def mean(self, key) -> float:
        return float(np.mean([getattr(r, key) for r in self.reports]))


def closed_loop(model, n_select=2, n_test=30, n_slices=6, sigma_scale=1.58, seed=0,
                config=FitConfig(), jobs=1, test_shapes=None) -> ClosedLoop:
    """Greedy plan on ``n_select`` sampled shapes, then fits of ``n_test`` other samples."""
    t0 = time.perf_counter()
    sel_seed, test_seed = _seeds(seed, 2)
    chooser = sample_cohort(model, n_select, sel_seed, sigma_scale)
    plan = greedy_select(model, chooser, config, max_slices=n_slices, jobs=jobs)
    t1 = time.perf_counter()
    selected = sorted(plan.selected[:n_slices])
    shapes = sample_cohort(model, n_test, test_seed, sigma_scale) if test_shapes is None \
        else test_shapes
    reports = []
    for i, ref in enumerate(shapes):
        fit, _ = fit_from_stations(model, ref, selected, config)
        reports.append(compare_meshes(fit, ref))
        log.info("shape %d: dice %.4f chamfer %.3f", i, reports[-1].dice, reports[-1].chamfer)
    t2 = time.perf_counter()
    return ClosedLoop(selected, plan, reports, {"plan": t1 - t0, "fits": t2 - t1})


def sweep_subsets(counts=range(2, 13), n_candidates=12) -> dict:
    """Station subsets of each size: the reference pair plus evenly spread extras."""
    pool = [s for s in range(1, n_candidates + 1) if s not in (2, n_candidates)]
    out = {}
    for n in counts:
        k = n - 2
        pick = sorted({int(round((j + 0.5) * len(pool) / k - 0.5)) for j in range(k)}) if k else []
        out[n] = sorted([2, n_candidates] + [pool[i] for i in pick])
    return out


def slice_sweep(model, shapes, subsets, config=FitConfig()) -> dict:
    """Mean |relative radius error| over shapes and stations, per slice subset."""
    out = {}
    for name, stations in subsets.items():
        errs = []
        for ref in shapes:
            fit, _ = fit_from_stations(model, ref, stations, config)
            prof = compare_meshes(fit, ref).radius_profile
            errs.extend(abs(p.rel_err) for p in prof if p is not None)
        out[name] = float(np.mean(errs))
        log.info("%s slices: mean |rel err| %.5f", name, out[name])
    return out


@dataclass
class StrainStudy:
    fitted: list
    truth: list
    peak_strain: tuple
    peak_length_change: tuple
    true_strain: tuple
    true_length_change: tuple

    @property
    def strain_rel_err(self) -> float:
        return abs(self.peak_strain[1] - self.true_strain[1]) / self.true_strain[1]

    @property
    def length_rel_err(self) -> float:
        return (abs(self.peak_length_change[1] - self.true_length_change[1])
                / self.true_length_change[1])


def strain_study(model, params=ArchParams(seed=7), profile=None, stations=STRAIN_STATIONS,
                 noise_sigma=0.5, seed=0, config=FitConfig()) -> StrainStudy:
    profile = profile or MotionProfile.pulse()
    src = generate_arch(params)
    seq = animate(src, profile)
    planes, _, _ = candidate_planes(src)
    stations = sorted(stations)
    ss = extract_slice_set(seq, [planes[i - 1] for i in stations], noise_sigma=noise_sigma,
                           seed=seed, stations=stations)
    res = fit_sequence(model, ss, config)
    fitted = sequence_features(res.meshes)
    # ground truth regions come from the true frame-0 landmarks
    truth = sequence_features(seq)
    return StrainStudy(
        fitted, truth,
        peak([f.radial_strain for f in fitted]), peak([f.length_change for f in fitted]),
        peak([f.radial_strain for f in truth]), peak([f.length_change for f in truth]),
    )


@dataclass
class PlannerCheck:
    plan: object
    steps: list
    start_dice: float

    @property
    def agrees(self) -> bool:
        return all(s.agrees for s in self.steps)

    @property
    def dice_path(self) -> list:
        return [self.start_dice] + self.plan.dice_path()

    def max_dice_drop(self) -> float:
        d = np.asarray(self.dice_path)
        return float(max(0.0, np.max(np.maximum.accumulate(d)[:-1] - d[1:]))) if len(d) > 1 \
            else 0.0


def planner_check(model, shapes, n_candidates=6, config=FitConfig()) -> PlannerCheck:
    ev = CohortEvaluator(model, shapes, config, n_candidates)
    plan = greedy_select(model, shapes, config, n_candidates, evaluator=ev)
    steps = exhaustive_oracle(ev, plan, range(1, n_candidates + 1))
    return PlannerCheck(plan, steps, ev((2, n_candidates))["dice"])


def landmark_check(params: ArchParams):
    """Landmarks of a generated arch next to its construction values (arclengths, mm)."""
    lm = detect_landmarks(generate_arch(params))
    La, R = params.ascending_length, params.arch_radius
    return lm, {"T": La + np.pi * R / 2}
