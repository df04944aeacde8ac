"""Staged differentiable fitting of a shape model to sparse planar contours.

The predicted mesh is built in three steps:

    X_pca   = X_mean + delta * sum_m a_m sigma_m Phi_m
    X_trans = psi * X_pca @ R(euler).T + offset
    X       = X_trans + rbf(X_trans)

The warp ``rbf`` uses the kernel phi(r) = r centered on the displaced control points
c + dc plus an affine term. Its weights are not free parameters: every evaluation solves
the interpolation system that makes the warp move each displaced control point by its
offset dc, and gradients flow through that solve. All gradients are analytic; the
nearest-neighbour matchings inside the two data terms are held fixed when
differentiating.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import lu_factor, lu_solve
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .contours import SliceContour, SliceSet
from .errors import NonFinite, TooFewSlices
from .mesh import CenterlineCurve, TubeMesh, centerline_from_mesh, ring_upsampler, spline_through
from .optim import Adam
from .ssm import ShapeModel

log = logging.getLogger(__name__)

LOSS_TERMS = ("mesh", "centerline", "modal", "rot", "warp")
PARAMS = ("a", "delta", "psi", "euler", "offset", "delta_c")
GLOBAL_PARAMS = ("a", "delta", "psi", "euler", "offset")

DEFAULT_SCHEDULE = (
    (10, ("a", "delta")),
    (200, ("a", "delta", "psi", "euler", "offset")),
    (250, ("a", "delta", "euler", "delta_c")),
    (300, ("delta_c",)),
)


@dataclass(frozen=True)
class FitConfig:
    lr: float = 0.1
    schedule: tuple = DEFAULT_SCHEDULE
    sequence_epochs: int = 50
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0)
    grid_shape: tuple = (10, 9, 8)
    grid_inflate: float = 0.2
    cl_mesh_points: int = 500
    cl_slice_points: int = 300
    center: bool = True
    nn_method: str = "kdtree"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    ring_upsample: int = 4

    def __post_init__(self):
        ends = [e for e, _ in self.schedule]
        if not ends or any(b <= a for a, b in zip([0] + ends, ends)):
            raise ValueError("schedule stage ends must be strictly increasing and positive")
        for _, names in self.schedule:
            unknown = set(names) - set(PARAMS)
            if unknown:
                raise ValueError(f"unknown parameters in schedule: {sorted(unknown)}")
        if len(self.loss_weights) != len(LOSS_TERMS) or min(self.loss_weights) < 0:
            raise ValueError("need five non-negative loss weights")
        if int(np.prod(self.grid_shape)) <= 0:
            raise ValueError("control grid must be non-empty")
        if self.nn_method not in ("brute", "kdtree"):
            raise ValueError(f"nn_method must be 'brute' or 'kdtree', got {self.nn_method!r}")
        if self.ring_upsample < 1:
            raise ValueError("ring_upsample must be >= 1")
        if self.lr <= 0 or self.sequence_epochs < 0:
            raise ValueError("lr must be > 0 and sequence_epochs >= 0")

    @property
    def n_epochs(self) -> int:
        return self.schedule[-1][0]

    def stage_of(self, epoch: int) -> int:
        for i, (end, _) in enumerate(self.schedule):
            if epoch < end:
                return i
        return len(self.schedule) - 1


@dataclass
class FitState:
    a: np.ndarray
    delta: np.ndarray
    psi: np.ndarray
    euler: np.ndarray
    offset: np.ndarray
    control_points: np.ndarray
    delta_c: np.ndarray
    rbf_weights: np.ndarray
    rbf_linear: np.ndarray
    loss_weights: np.ndarray
    epoch: int = 0

    @classmethod
    def initial(cls, n_modes, control_points, loss_weights=(1.0,) * 5, delta=1.0):
        K = len(control_points)
        cp = np.array(control_points, dtype=float)
        cp.setflags(write=False)
        return cls(
            a=np.zeros(n_modes),
            delta=np.array(float(delta)),
            psi=np.array(1.0),
            euler=np.zeros(3),
            offset=np.zeros(3),
            control_points=cp,
            delta_c=np.zeros((K, 3)),
            rbf_weights=np.zeros((K, 3)),
            rbf_linear=np.zeros((4, 3)),
            loss_weights=np.array(loss_weights, dtype=float),
        )

    @property
    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAMS}

    def copy(self) -> "FitState":
        return replace(
            self,
            **{k: np.array(getattr(self, k), copy=True) for k in PARAMS},
            rbf_weights=self.rbf_weights.copy(),
            rbf_linear=self.rbf_linear.copy(),
            loss_weights=self.loss_weights.copy(),
        )


# --- building blocks -----------------------------------------------------------------


def rotation_matrix(euler) -> np.ndarray:
    """R = Rz(gamma) Ry(beta) Rx(alpha) acting on column vectors."""
    return _rotation_and_derivatives(euler)[0]


def _rotation_and_derivatives(euler):
    al, be, ga = (float(v) for v in euler)
    ca, sa = math.cos(al), math.sin(al)
    cb, sb = math.cos(be), math.sin(be)
    cg, sg = math.cos(ga), math.sin(ga)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    dRx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dRy = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    dRz = np.array([[-sg, -cg, 0], [cg, -sg, 0], [0, 0, 0]])
    R = Rz @ Ry @ Rx
    return R, (Rz @ Ry @ dRx, Rz @ dRy @ Rx, dRz @ Ry @ Rx)


def similarity_transform(x, psi=1.0, euler=(0.0, 0.0, 0.0), offset=(0.0, 0.0, 0.0)):
    """psi * x rotated by R(euler) plus a broadcast offset; rows are points."""
    return float(psi) * np.asarray(x) @ rotation_matrix(euler).T + np.asarray(offset)


def _pairwise_dist(x, y):
    return cdist(x, y)


def _safe_inverse(r):
    """1/r with zero where r == 0 (the kernel gradient vanishes at its center)."""
    out = np.zeros_like(r)
    np.divide(1.0, r, out=out, where=r > 0)
    return out


def rbf_deform(x, c, delta_c, weights, linear) -> np.ndarray:
    """Displacement sum_k w_k |x - (c_k + dc_k)| + [x, 1] @ linear for each row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = np.asarray(c, dtype=float) + np.asarray(delta_c, dtype=float)
    diff = x[:, None, :] - p[None, :, :]
    r = np.sqrt((diff**2).sum(-1))
    lin = np.asarray(linear, dtype=float)
    return r @ np.asarray(weights, dtype=float) + x @ lin[:3] + lin[3]


def _interp_system(p):
    K = len(p)
    A = np.zeros((K + 4, K + 4))
    A[:K, :K] = _pairwise_dist(p, p)
    np.fill_diagonal(A[:K, :K], 0.0)
    A[:K, K:K + 3] = p
    A[:K, K + 3] = 1.0
    A[K:, :K] = A[:K, K:].T
    return A


def solve_rbf(control_points, delta_c):
    """Weights and affine part of the warp that moves each c_k + dc_k by dc_k.

    Returns (weights (K, 3), linear (4, 3), lu factorization, displaced centers).
    """
    p = np.asarray(control_points) + np.asarray(delta_c)
    K = len(p)
    lu = lu_factor(_interp_system(p), check_finite=False)
    rhs = np.zeros((K + 4, 3))
    rhs[:K] = delta_c
    z = lu_solve(lu, rhs, check_finite=False)
    return z[:K], z[K:], lu, p


def control_grid(nodes, shape=(10, 9, 8), inflate=0.2) -> np.ndarray:
    """Axis-aligned regular lattice over the bounding box grown by ``inflate``."""
    lo, hi = nodes.min(axis=0), nodes.max(axis=0)
    mid, half = (lo + hi) / 2, (hi - lo) / 2 * (1 + inflate)
    axes = [np.linspace(mid[i] - half[i], mid[i] + half[i], shape[i]) for i in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def centerline_operator(n_rings: int, n_points: int) -> np.ndarray:
    """Linear map from ring centroids to ``n_points`` samples of their cubic spline.

    The spline uses the ring index as parameter, so this is the same curve that
    ``centerline_from_mesh`` resamples by arclength, sampled at uniform parameter.
    """
    u = np.arange(n_rings, dtype=float)
    spl = CubicSpline(u, np.eye(n_rings), axis=0)
    return spl(np.linspace(0.0, n_rings - 1, n_points))


def nearest(queries, targets, method="brute", chunk=256) -> np.ndarray:
    """Index of the nearest target for every query (exact)."""
    queries = np.asarray(queries, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if method == "kdtree":
        return cKDTree(targets).query(queries)[1]
    out = np.empty(len(queries), dtype=np.int64)
    for i in range(0, len(queries), chunk):
        q = queries[i:i + chunk]
        d2 = ((q[:, None, :] - targets[None, :, :]) ** 2).sum(-1)
        out[i:i + chunk] = np.argmin(d2, axis=1)
    return out


def _matched_sq(queries, targets, idx):
    diff = np.asarray(queries) - np.asarray(targets)[idx]
    return diff, (diff**2).sum(axis=1)


def loss_mesh(contour_points, mesh_points, method="brute") -> float:
    """Mean over contour points of the squared distance to the nearest mesh point."""
    idx = nearest(contour_points, mesh_points, method)
    _, sq = _matched_sq(contour_points, mesh_points, idx)
    return math.fsum(sq) / len(sq)


def loss_centerline(cl_slices, cl_mesh) -> float:
    """Mean over slice-centerline points of the squared distance to the mesh centerline."""
    idx = nearest(cl_slices, cl_mesh)
    _, sq = _matched_sq(cl_slices, cl_mesh, idx)
    return math.fsum(sq) / len(sq)


def regularization_losses(state: FitState) -> tuple[float, float, float]:
    a = np.asarray(state.a)
    modal = float((a**2).mean()) if a.size else 0.0
    rot = float((np.asarray(state.euler) ** 2).sum() / 3.0)
    dc = np.asarray(state.delta_c)
    warp = float((dc**2).sum(axis=1).mean()) if dc.size else 0.0
    return modal, rot, warp


def _ordered(contours):
    contours = list(contours)
    if contours and all(c.station is not None for c in contours):
        contours.sort(key=lambda c: c.station)
    return contours


def centerline_from_slices(contours, n_points: int = 300) -> CenterlineCurve:
    """Chord-length cubic spline through the contour centroids, ordered along the vessel."""
    contours = _ordered(contours)
    if len(contours) < 5:
        raise TooFewSlices(f"{len(contours)} slices; a spline centerline needs 5")
    return spline_through(np.array([c.centroid for c in contours]), n_points, param="chord")


def slices_centerline(contours, n_points: int = 300) -> CenterlineCurve:
    """Spline centerline for >= 5 slices, semicircle surrogate otherwise."""
    from .planner import surrogate_centerline

    try:
        return centerline_from_slices(contours, n_points)
    except TooFewSlices:
        return surrogate_centerline(_ordered(contours), n_points)


# --- the fitter ----------------------------------------------------------------------


@dataclass
class FrameData:
    points: np.ndarray
    cl_slices: np.ndarray
    com: np.ndarray


@dataclass
class Evaluation:
    total: float
    terms: dict
    grads: dict
    nodes: np.ndarray
    matching: tuple = None


@dataclass
class FitResult:
    meshes: list
    centerlines: list
    final_losses: list
    trace: list = field(default_factory=list)
    states: list = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return len(self.meshes)


class Fitter:
    """Holds everything fixed during a fit: the centered model, control lattice, operators."""

    def __init__(self, model: ShapeModel, config: FitConfig = FitConfig(), control_points=None):
        self.model = model
        self.config = config
        self.mean_centroid = model.mean.mean(axis=0) if config.center else np.zeros(3)
        self.mean = model.mean - self.mean_centroid
        self.scaled_modes = model.modes * model.sigmas[:, None, None]
        if control_points is None:
            control_points = control_grid(self.mean, config.grid_shape, config.grid_inflate)
        self.control_points = np.asarray(control_points, dtype=float)
        self.n_rings, self.ppr = model.n_rings, model.pts_per_ring
        self.cl_op = centerline_operator(self.n_rings, config.cl_mesh_points)
        self.weights = np.array(config.loss_weights, dtype=float)
        self.upsampler = ring_upsampler(self.n_rings, config.ring_upsample)

    def initial_state(self) -> FitState:
        return FitState.initial(self.model.n_modes, self.control_points, self.config.loss_weights)

    def frame_data(self, contours, com=None) -> FrameData:
        contours = list(contours)
        pts = np.vstack([c.points for c in contours])
        if not np.all(np.isfinite(pts)):
            raise NonFinite("non-finite contour points", [])
        if com is None:
            com = pts.mean(axis=0) if self.config.center else np.zeros(3)
        shifted = [SliceContour(c.plane, c.points - com, c.frame, c.station) for c in contours]
        cl = slices_centerline(shifted, self.config.cl_slice_points)
        return FrameData(pts - com, cl.points.copy(), np.asarray(com, dtype=float))

    # forward ------------------------------------------------------------------------

    def _global(self, state):
        D = np.tensordot(state.a, self.scaled_modes, axes=1)
        Xp = self.mean + float(state.delta) * D
        R, dR = _rotation_and_derivatives(state.euler)
        Xt = float(state.psi) * Xp @ R.T + state.offset
        return D, Xp, R, dR, Xt

    def predict(self, state: FitState, base=None) -> np.ndarray:
        Xt = self._global(state)[-1] if base is None else base
        if not np.any(state.delta_c):
            return Xt.copy()
        w, v, _, p = solve_rbf(self.control_points, state.delta_c)
        state.rbf_weights, state.rbf_linear = w, v
        return Xt + _pairwise_dist(Xt, p) @ w + Xt @ v[:3] + v[3]

    def evaluate(self, state: FitState, data: FrameData, active=PARAMS, base=None,
                 weights=None, matching=None) -> Evaluation:
        """Weighted total loss, its terms and gradients (zero for inactive parameters).

        ``matching`` = (mesh indices, centerline indices) replaces the nearest-neighbour
        searches; finite-difference checks use it to stay on one smooth piece.
        """
        wts = self.weights if weights is None else np.asarray(weights, dtype=float)
        active = set(active)
        need_global = base is None and bool(active & set(GLOBAL_PARAMS))
        warp_on = "delta_c" in active or bool(np.any(state.delta_c))

        if base is None:
            D, Xp, R, dR, Xt = self._global(state)
        else:
            Xt = np.asarray(base, dtype=float)
        if warp_on:
            w, v, lu, p = solve_rbf(self.control_points, state.delta_c)
            state.rbf_weights, state.rbf_linear = w, v
            Rm = _pairwise_dist(Xt, p)
            X = Xt + Rm @ w + Xt @ v[:3] + v[3]
        else:
            X = Xt

        # data terms, matchings held fixed
        Xr = X.reshape(self.n_rings, self.ppr, 3)
        Xd = np.tensordot(self.upsampler, Xr, axes=1).reshape(-1, 3)
        Q = len(data.points)
        if matching is None:
            idx = nearest(data.points, Xd, self.config.nn_method)
        else:
            idx = matching[0]
        # overflowing coordinates make the nearest-node search return out-of-range indices
        if not np.all(np.isfinite(Xd)) or idx.max() >= len(Xd):
            raise NonFinite("non-finite prediction", [])
        diff, sq = _matched_sq(data.points, Xd, idx)
        l_mesh = math.fsum(sq) / Q
        G = np.zeros_like(X)
        if wts[0]:
            g = (-2.0 * wts[0] / Q) * diff
            Gd = np.zeros_like(Xd)
            for k in range(3):
                Gd[:, k] = np.bincount(idx, weights=g[:, k], minlength=len(Xd))
            G = np.tensordot(self.upsampler.T, Gd.reshape(-1, self.ppr, 3), axes=1)
            G = G.reshape(-1, 3)

        C = X.reshape(self.n_rings, self.ppr, 3).mean(axis=1)
        cm = self.cl_op @ C
        jdx = nearest(data.cl_slices, cm) if matching is None else matching[1]
        cdiff, csq = _matched_sq(data.cl_slices, cm, jdx)
        Ps = len(data.cl_slices)
        l_cl = math.fsum(csq) / Ps
        if wts[1]:
            gc = (-2.0 * wts[1] / Ps) * cdiff
            Gcm = np.zeros_like(cm)
            for k in range(3):
                Gcm[:, k] = np.bincount(jdx, weights=gc[:, k], minlength=len(cm))
            GC = self.cl_op.T @ Gcm / self.ppr
            G += np.repeat(GC, self.ppr, axis=0)

        l_modal, l_rot, l_warp = regularization_losses(state)
        terms = dict(zip(LOSS_TERMS, (l_mesh, l_cl, l_modal, l_rot, l_warp)))
        total = float(np.dot(wts, [l_mesh, l_cl, l_modal, l_rot, l_warp]))

        grads = {k: np.zeros_like(np.asarray(getattr(state, k), dtype=float)) for k in PARAMS}
        Gt = G
        if warp_on:
            K = len(p)
            Qm = (G @ w.T) * _safe_inverse(Rm)
            if need_global:
                Gt = G + Xt * Qm.sum(axis=1, keepdims=True) - Qm @ p + G @ v[:3].T
            if "delta_c" in active:
                gp = -(Qm.T @ Xt - Qm.sum(axis=0)[:, None] * p)
                gz = np.vstack([Rm.T @ G, Xt.T @ G, G.sum(axis=0, keepdims=True)])
                lam = lu_solve(lu, gz, check_finite=False)
                z = np.vstack([w, v])
                dA = -lam @ z.T
                S = dA[:K, :K] + dA[:K, :K].T
                Phi = _pairwise_dist(p, p)
                T = S * _safe_inverse(Phi)
                np.fill_diagonal(T, 0.0)
                gp += T.sum(axis=1)[:, None] * p - T @ p
                gp += (dA[:K, K:K + 3] + dA[K:K + 3, :K].T)
                grads["delta_c"] = gp + lam[:K] + wts[4] * 2.0 * state.delta_c / K
        if need_global:
            psi = float(state.psi)
            Y = Xp @ R.T
            grads["offset"] = Gt.sum(axis=0)
            grads["psi"] = np.array((Gt * Y).sum())
            GY = psi * Gt
            GR = GY.T @ Xp
            grads["euler"] = np.array([(GR * d).sum() for d in dR]) + wts[3] * 2.0 * state.euler / 3
            GXp = GY @ R
            grads["delta"] = np.array((GXp * D).sum())
            M = len(state.a)
            ga = float(state.delta) * np.tensordot(self.scaled_modes, GXp, axes=([1, 2], [0, 1]))
            grads["a"] = ga + (wts[2] * 2.0 * state.a / M if M else 0.0)
        for k in PARAMS:
            if k not in active:
                grads[k] = np.zeros_like(grads[k])
        return Evaluation(total, terms, grads, X, (idx, jdx))

    # optimization -------------------------------------------------------------------

    def _run(self, state, data, schedule, base=None, frame=0, trace=None):
        cfg = self.config
        opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        trace = [] if trace is None else trace
        stage = -1
        start = 0
        for s, (end, names) in enumerate(schedule):
            for epoch in range(start, end):
                if s != stage:
                    stage = s
                    # warp weights restart from zero at each warp stage
                    state.rbf_weights = np.zeros_like(state.rbf_weights)
                    state.rbf_linear = np.zeros_like(state.rbf_linear)
                try:
                    ev = self.evaluate(state, data, names, base)
                except NonFinite as e:
                    raise NonFinite(f"{e.args[0]} at frame {frame} epoch {epoch}", trace) from e
                row = {"frame": frame, "epoch": epoch, "stage": s, "total": ev.total, **ev.terms}
                trace.append(row)
                if not np.isfinite(ev.total) or not all(
                    np.all(np.isfinite(ev.grads[k])) for k in names
                ):
                    raise NonFinite(f"non-finite loss or gradient at frame {frame} epoch {epoch}",
                                    trace)
                opt.step(state.params, ev.grads, names)
                state.epoch = epoch + 1
            start = end
        final = self.evaluate(state, data, (), base)
        if not np.isfinite(final.total) or not np.all(np.isfinite(final.nodes)):
            raise NonFinite(f"non-finite final prediction at frame {frame}", trace)
        return final, trace

    def fit_frame0(self, contours, com=None):
        data = self.frame_data(contours, com)
        state = self.initial_state()
        final, trace = self._run(state, data, self.config.schedule)
        return state, final, data, trace

    def fit_next(self, contours, prev_nodes, com, frame):
        data = self.frame_data(contours, com)
        state = self.initial_state()
        sched = ((self.config.sequence_epochs, ("delta_c",)),)
        if self.config.sequence_epochs == 0:
            return state, self.evaluate(state, data, (), prev_nodes), data, []
        final, trace = self._run(state, data, sched, base=prev_nodes, frame=frame)
        return state, final, data, trace

    def to_mesh(self, nodes, com) -> TubeMesh:
        return self.model.mesh(np.asarray(nodes) + com)


def _result_entry(fitter, final, data, result, state, cl_points):
    mesh = fitter.to_mesh(final.nodes, data.com)
    result.meshes.append(mesh)
    result.centerlines.append(centerline_from_mesh(mesh, cl_points))
    result.final_losses.append(dict(final.terms, total=final.total))
    result.states.append(state)


def fit_frame0(model: ShapeModel, contours, config: FitConfig = FitConfig()):
    """Fit frame-0 contours with the staged schedule. Returns (state, mesh, trace)."""
    fitter = Fitter(model, config)
    state, final, data, trace = fitter.fit_frame0(contours)
    return state, fitter.to_mesh(final.nodes, data.com), trace


def fit_sequence(model: ShapeModel, slice_set: SliceSet, config: FitConfig = FitConfig(),
                 n_frames=None, fitter=None) -> FitResult:
    """Frame 0 by the full schedule, later frames by warping the previous fit.

    Every frame is centered with frame 0's contour center of mass so consecutive fits
    share one coordinate system.
    """
    fitter = fitter or Fitter(model, config)
    T = slice_set.n_frames if n_frames is None else min(n_frames, slice_set.n_frames)
    result = FitResult([], [], [])
    state, final, data, trace = fitter.fit_frame0(slice_set.frames[0])
    result.trace.extend(trace)
    _result_entry(fitter, final, data, result, state, config.cl_mesh_points)
    com, prev = data.com, final.nodes
    for t in range(1, T):
        state, final, data, trace = fitter.fit_next(slice_set.frames[t], prev, com, t)
        result.trace.extend(trace)
        _result_entry(fitter, final, data, result, state, config.cl_mesh_points)
        prev = final.nodes
    return result


def predict_mesh(model: ShapeModel, state: FitState, config: FitConfig = FitConfig(),
                 control_points=None) -> np.ndarray:
    """Composition of the modal, similarity and warp steps in the centered model frame."""
    cp = state.control_points if control_points is None else control_points
    return Fitter(model, config, control_points=cp).predict(state)


def total_loss(model: ShapeModel, state: FitState, data: FrameData,
               config: FitConfig = FitConfig(), active=PARAMS):
    fitter = Fitter(model, config, control_points=state.control_points)
    ev = fitter.evaluate(state, data, active, weights=state.loss_weights)
    return ev.total, ev.grads
