"""Command-line entry point: synth, build-ssm, fit, plan, metrics, report.

Exit codes: 0 success, 2 configuration error, 3 data or compute failure,
4 numerical failure (non-finite loss; the convergence trace is kept).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import io
from .errors import ArchfitError, NonFinite

log = logging.getLogger("archfit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


class Run:
    """Bookkeeping for one command: output directory, timings and the manifest."""

    def __init__(self, cfg, command, argv):
        self.cfg = cfg
        self.command = command
        self.argv = list(argv)
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = []
        self.outputs = []
        self.timings = {}
        self._t = None

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t0, 3)

        return _Timer()

    def wrote(self, path):
        self.outputs.append(Path(path))
        return path

    def read(self, path):
        self.inputs.append(Path(path))
        return path

    def manifest(self, status="ok", extra=None):
        doc = {
            "kind": "run_manifest",
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "version": __version__,
            "config": self.cfg.snapshot(),
            "inputs": io.digests(p for p in self.inputs if p.is_file()),
            "outputs": io.digests(p for p in self.outputs if p.is_file()),
            "timings": self.timings,
        }
        if extra:
            doc.update(extra)
        path = self.out / f"manifest_{self.command}.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return path


def verify_manifest(path) -> bool:
    """True when every recorded digest still matches the file on disk."""
    doc = json.loads(Path(path).read_text())
    for group in ("inputs", "outputs"):
        for p, digest in doc[group].items():
            if not Path(p).is_file() or io.sha256(p) != digest:
                return False
    return True


# --- commands ----------------------------------------------------------------------------


def _parse_stations(text):
    if text is None:
        return None
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise cfgmod.ConfigError(f"bad station list {text!r}") from exc


def cmd_synth(run: Run, args):
    from .planner import candidate_planes
    from .ssm import sample_shape
    from .synth import ArchParams, MotionProfile, animate, cohort_params, extract_slice_set
    from .synth import generate_arch

    sc = run.cfg.synth
    seed = run.cfg.stage_seed("synth")
    cdir = run.out / "cohort"
    entries = []
    with run.stage("generate"):
        if args.from_model:
            model = io.load_model(run.read(args.from_model))
            meshes = [sample_shape(model, seed + i, sc.sigma_scale) for i in range(sc.n_shapes)]
            params = [None] * sc.n_shapes
        else:
            draws = cohort_params(sc.n_shapes, seed, sc.noise_amplitude)
            try:
                params = [ArchParams(**{**p.to_dict(), **sc.overrides}) for p in draws]
            except (TypeError, ValueError) as exc:
                raise cfgmod.ConfigError(f"synth.overrides: {exc}") from exc
            meshes = [generate_arch(p) for p in params]
    profile = (MotionProfile.pulse(sc.n_frames, sc.peak_radial, sc.peak_axial, sc.peak_frame)
               if sc.n_frames > 1 else MotionProfile.static(1))
    with run.stage("slice"):
        for i, (mesh, p) in enumerate(zip(meshes, params)):
            mpath = run.wrote(io.save_mesh(cdir / f"shape_{i:03d}.json", mesh))
            planes, s, spacing = candidate_planes(mesh, sc.n_candidates)
            stations = sc.stations or tuple(range(1, sc.n_candidates + 1))
            seq = animate(mesh, profile)
            slices = extract_slice_set(seq, [planes[k - 1] for k in stations],
                                       noise_sigma=sc.noise_sigma, seed=seed + 7919 * (i + 1),
                                       stations=stations)
            spath = run.wrote(io.save_slices(cdir / f"slices_{i:03d}.json", slices,
                                             {"spacing": float(spacing)}))
            entry = {"index": i, "mesh": mpath.name, "slices": spath.name,
                     "params": p.to_dict() if p is not None else None}
            if sc.n_frames > 1:
                fpaths = [run.wrote(io.save_mesh(cdir / f"shape_{i:03d}_t{t:02d}.json", m))
                          for t, m in enumerate(seq)]
                entry["frames"] = [f.name for f in fpaths]
            entries.append(entry)
    man = io.save_json(cdir / "cohort.json", "cohort", {
        "shapes": entries,
        "motion": {"radial": profile.radial.tolist(), "axial": profile.axial.tolist(),
                   "peak_frame": profile.peak_frame},
    })
    run.wrote(man)
    log.info("wrote %d shapes to %s", len(entries), cdir)


def _cohort_meshes(run, path):
    path = Path(path)
    man = path / "cohort.json" if path.is_dir() else path
    doc = io.load_json(run.read(man), "cohort")
    return [io.load_mesh(run.read(man.parent / e["mesh"])) for e in doc["shapes"]], doc, man.parent


def cmd_build_ssm(run: Run, args):
    import warnings

    from .ssm import build_model

    meshes, _, _ = _cohort_meshes(run, args.cohort)
    with run.stage("pca"), warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = build_model(meshes, run.cfg.ssm.n_modes, run.cfg.ssm.align)
    for w in caught:
        log.warning("%s", w.message)
    run.wrote(io.save_model(run.out / "model.json", model))
    rows = [{"mode": i + 1, "sigma": float(s), "explained_variance_ratio": float(e),
             "cumulative": float(c)}
            for i, (s, e, c) in enumerate(zip(model.sigmas, model.explained_variance_ratio,
                                              np.cumsum(model.explained_variance_ratio)))]
    run.wrote(io.write_csv(run.out / "explained_variance.csv", rows))


def cmd_fit(run: Run, args):
    from .fitting import Fitter, fit_sequence
    from .mesh import centerline_from_mesh

    model = io.load_model(run.read(args.model))
    slices = io.load_slices(run.read(args.slices))
    stations = _parse_stations(args.stations)
    if stations:
        slices = slices.by_station(stations)
    n_frames = slices.n_frames if args.frames is None else min(args.frames, slices.n_frames)
    fitter = Fitter(model, run.cfg.fit)
    trace_path = run.out / "convergence.csv"
    try:
        with run.stage("fit"):
            res = fit_sequence(model, slices, run.cfg.fit, n_frames, fitter)
    except NonFinite as exc:
        run.wrote(io.write_csv(trace_path, exc.trace or [], _trace_fields()))
        raise
    fdir = run.out / "fit"
    for t, mesh in enumerate(res.meshes):
        run.wrote(io.save_mesh(fdir / f"frame_{t:02d}.json", mesh))
    run.wrote(io.save_centerlines(fdir / "centerlines.json", res.centerlines))
    run.wrote(io.write_csv(trace_path, res.trace, _trace_fields()))
    losses = [{"frame": t, **l} for t, l in enumerate(res.final_losses)]
    run.wrote(io.write_csv(run.out / "final_losses.csv", losses))
    st = res.states[0]
    run.wrote(io.save_json(fdir / "state_frame0.json", "fit_state", {
        "a": st.a.tolist(), "delta": float(st.delta), "psi": float(st.psi),
        "euler": st.euler.tolist(), "offset": st.offset.tolist(),
        "delta_c": st.delta_c.tolist(),
    }))


def _trace_fields():
    from .fitting import LOSS_TERMS

    return ["frame", "epoch", "stage", "total", *LOSS_TERMS]


def cmd_plan(run: Run, args):
    from .planner import CohortEvaluator, exhaustive_oracle, greedy_path
    from .plots import score_heatmaps

    pc = run.cfg.planner
    model = io.load_model(run.read(args.model))
    meshes, _, _ = _cohort_meshes(run, args.cohort)
    if args.n_shapes:
        meshes = meshes[:args.n_shapes]
    ev = CohortEvaluator(model, meshes, run.cfg.fit, pc.n_candidates, pc.noise_sigma,
                         run.cfg.stage_seed("planner"), args.jobs)
    cands = list(range(1, pc.n_candidates + 1))
    with run.stage("greedy"):
        selected, rows = greedy_path(ev, cands, (2, pc.n_candidates), pc.max_slices)
    if ev.failure_fraction > pc.max_fail_fraction:
        raise ArchfitError(f"{ev.failure_fraction:.0%} of fits failed "
                           f"(limit {pc.max_fail_fraction:.0%})")
    table = [r.as_dict() for r in rows]
    run.wrote(io.write_csv(run.out / "plan_scores.csv", table))
    payload = {"selected": selected, "spacing": ev.spacing}
    if pc.exhaustive:
        with run.stage("exhaustive"):
            steps = exhaustive_oracle(ev, selected, cands)
        payload["oracle"] = [{"iteration": s.iteration, "greedy": s.greedy, "oracle": s.oracle,
                              "agrees": s.agrees, "best_subset": list(s.best_subset)}
                             for s in steps]
        if not all(s.agrees for s in steps):
            log.warning("greedy choice differs from the exhaustive oracle")
    run.wrote(io.save_json(run.out / "plan.json", "slice_plan", payload))
    if not args.no_plots and table:
        run.wrote(score_heatmaps(table, run.out / "plan_scores.svg"))
    print(" ".join(str(s) for s in selected))


def _mesh_list(run, items):
    out = []
    for item in items:
        p = Path(item)
        files = sorted(p.glob("*.json")) if p.is_dir() else [p]
        for f in files:
            if f.name.startswith(("frame_", "shape_")):
                out.append((f.stem, io.load_mesh(run.read(f))))
            elif not p.is_dir():
                out.append((f.stem, io.load_mesh(run.read(f))))
    return out


def cmd_metrics(run: Run, args):
    from .metrics import compare_meshes, dice, iou, mesh_to_mask
    from .vessel import sequence_features

    mc = run.cfg.metrics
    fits = _mesh_list(run, args.fit)
    rows, prof_rows = [], []
    if args.mask:
        mask = io.load_mask(run.read(args.mask))
        for name, m in fits:
            fm = mesh_to_mask(m, mask)
            rows.append({"subject": args.subject, "frame": name, "dice": dice(fm, mask),
                         "iou": iou(fm, mask)})
    else:
        refs = _mesh_list(run, args.ref)
        if len(refs) not in (1, len(fits)):
            raise ArchfitError(f"{len(fits)} fitted meshes but {len(refs)} references")
        with run.stage("compare"):
            for i, (name, m) in enumerate(fits):
                ref = refs[0][1] if len(refs) == 1 else refs[i][1]
                r = compare_meshes(m, ref, mc.spacing, True, surface_factor=mc.surface_factor)
                rows.append({"subject": args.subject, "frame": name, **r.row()})
                for k, p in enumerate(r.radius_profile, start=1):
                    prof_rows.append({
                        "subject": args.subject, "frame": name, "station": k,
                        "arclength": None if p is None else p.arclength,
                        "radius_ref": None if p is None else p.radius_ref,
                        "radius_fit": None if p is None else p.radius_fit,
                        "abs_err": None if p is None else p.abs_err,
                        "rel_err": None if p is None else p.rel_err,
                    })
    run.wrote(io.write_csv(run.out / "metrics.csv", rows))
    if prof_rows:
        run.wrote(io.write_csv(run.out / "radius_profile.csv", prof_rows))
    with run.stage("features"):
        feats = sequence_features([m for _, m in fits], mc.up)
    frows = [{"subject": args.subject, "frame": name, **f.row()}
             for (name, _), f in zip(fits, feats)]
    run.wrote(io.write_csv(run.out / "features.csv", frows))


def cmd_report(run: Run, args):
    from .plots import convergence, radius_profiles, score_heatmaps

    made = 0
    if args.scores:
        run.wrote(score_heatmaps(io.read_csv(run.read(args.scores)), run.out / "scores.svg"))
        made += 1
    if args.convergence:
        rows = io.read_csv(run.read(args.convergence))
        run.wrote(convergence(rows, run.out / "convergence.svg"))
        made += 1
    if args.profile:
        prof = {}
        for path in args.profile:
            rows = [r for r in io.read_csv(run.read(path)) if r["rel_err"] != ""]
            label = Path(path).parent.name or Path(path).stem
            s = np.array([float(r["arclength"]) for r in rows])
            e = np.array([float(r["rel_err"]) for r in rows])
            prof[label] = (s, e)
        run.wrote(radius_profiles(prof, run.out / "radius_profile.svg"))
        made += 1
    if not made:
        raise cfgmod.ConfigError("report needs --scores, --convergence or --profile")


COMMANDS = {
    "synth": cmd_synth,
    "build-ssm": cmd_build_ssm,
    "fit": cmd_fit,
    "plan": cmd_plan,
    "metrics": cmd_metrics,
    "report": cmd_report,
}


def build_parser():
    p = _Parser(prog="archfit", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", help="output directory (default $ARCHFIT_OUT or ./out)")
    p.add_argument("-v", "--verbose", action="count", default=None)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for cohort fits")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort and its slices")
    s.add_argument("--n-shapes", type=int)
    s.add_argument("--frames", type=int, dest="n_frames")
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--stations", help="comma-separated candidate stations to slice")
    s.add_argument("--from-model", help="sample shapes from a model file instead")
    s.add_argument("--sigma-scale", type=float)

    b = sub.add_parser("build-ssm", help="PCA shape model from a cohort")
    b.add_argument("--cohort", required=True)
    b.add_argument("--modes", type=int, dest="n_modes")
    b.add_argument("--align", action="store_true", default=None)

    f = sub.add_parser("fit", help="fit a model to slice contours")
    f.add_argument("--model", required=True)
    f.add_argument("--slices", required=True)
    f.add_argument("--frames", type=int)
    f.add_argument("--stations", help="use only these stations")

    pl = sub.add_parser("plan", help="greedy slice selection over a cohort")
    pl.add_argument("--model", required=True)
    pl.add_argument("--cohort", required=True)
    pl.add_argument("--max-slices", type=int)
    pl.add_argument("--n-candidates", type=int)
    pl.add_argument("--n-shapes", type=int, help="use the first N cohort shapes")
    pl.add_argument("--exhaustive", action="store_true", default=None)
    pl.add_argument("--no-plots", action="store_true")

    m = sub.add_parser("metrics", help="compare fitted meshes with references")
    m.add_argument("--fit", nargs="+", required=True, help="mesh files or a fit directory")
    m.add_argument("--ref", nargs="+", help="reference mesh files or directory")
    m.add_argument("--mask", help="reference voxel mask instead of meshes")
    m.add_argument("--subject", default="subject")
    m.add_argument("--spacing", type=float)

    r = sub.add_parser("report", help="render SVG figures from CSV outputs")
    r.add_argument("--scores")
    r.add_argument("--convergence")
    r.add_argument("--profile", nargs="+")
    return p


def _resolve(args):
    cfg = cfgmod.load(args.config)
    cfg = cfgmod.override(cfg, None, seed=args.seed, out=args.out, verbosity=args.verbose)
    c = args.command
    if c == "synth":
        cfg = cfgmod.override(cfg, "synth", n_shapes=args.n_shapes, n_frames=args.n_frames,
                              noise_sigma=args.noise_sigma, sigma_scale=args.sigma_scale,
                              stations=_parse_stations(args.stations))
    elif c == "build-ssm":
        cfg = cfgmod.override(cfg, "ssm", n_modes=args.n_modes, align=args.align)
    elif c == "plan":
        kw = {"n_candidates": args.n_candidates, "exhaustive": args.exhaustive}
        if args.n_candidates and not args.max_slices:
            kw["max_slices"] = min(cfg.planner.max_slices, args.n_candidates)
        kw["max_slices"] = args.max_slices or kw.get("max_slices")
        cfg = cfgmod.override(cfg, "planner", **kw)
    elif c == "metrics":
        if not args.mask and not args.ref:
            raise cfgmod.ConfigError("metrics needs --ref or --mask")
        cfg = cfgmod.override(cfg, "metrics", spacing=args.spacing)
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve(args)
    except cfgmod.ConfigError as exc:
        print(f"archfit: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    level = logging.WARNING - 10 * min(cfg.verbosity or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    run = Run(cfg, args.command, argv)
    status, code = "ok", EXIT_OK
    try:
        COMMANDS[args.command](run, args)
    except cfgmod.ConfigError as exc:
        print(f"archfit: config error: {exc}", file=sys.stderr)
        status, code = "config error", EXIT_CONFIG
    except NonFinite as exc:
        print(f"archfit: numerical failure: {exc}", file=sys.stderr)
        status, code = "non-finite", EXIT_NUMERIC
    except (ArchfitError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"archfit: {type(exc).__name__}: {exc}", file=sys.stderr)
        status, code = "failed", EXIT_DATA
    run.manifest(status)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
