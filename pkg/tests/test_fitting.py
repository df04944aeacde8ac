import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from archfit.contours import SliceContour, SliceSet
from archfit.errors import NonFinite, TooFewSlices
from archfit.fitting import (
    LOSS_TERMS,
    PARAMS,
    FitConfig,
    Fitter,
    FrameData,
    centerline_from_slices,
    control_grid,
    fit_frame0,
    fit_sequence,
    loss_centerline,
    loss_mesh,
    nearest,
    predict_mesh,
    rbf_deform,
    regularization_losses,
    rotation_matrix,
    similarity_transform,
    solve_rbf,
    total_loss,
)
from archfit.mesh import Plane, ring_radii
from archfit.optim import Adam
from archfit.planner import candidate_planes
from archfit.ssm import reconstruct, sample_shape
from archfit.synth import MotionProfile, animate, extract_slice_set
from conftest import gradient_errors, random_state

SHORT = ((3, ("a", "delta")), (20, ("a", "delta", "psi", "euler", "offset")),
         (26, ("a", "delta", "euler", "delta_c")), (30, ("delta_c",)))


def contour(points, station=None, normal=(0, 0, 1)):
    pts = np.asarray(points, dtype=float)
    return SliceContour(Plane(pts.mean(axis=0), normal), pts, station=station)


def model_slices(model, mesh, stations=(1, 2, 4, 7, 10, 12), noise=0.0, frames=None, seed=0):
    planes, _, _ = candidate_planes(mesh)
    seq = frames or [mesh]
    return extract_slice_set(seq, [planes[i - 1] for i in stations], noise_sigma=noise,
                             seed=seed, stations=list(stations))


# --- similarity transform -----------------------------------------------------------


def test_similarity_identity():
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert np.array_equal(similarity_transform(x), x)


def test_similarity_hand_example():
    out = similarity_transform([[1.0, 0, 0]], 2.0, (0, 0, np.pi / 2), (1, 1, 1))
    assert np.allclose(out, [[1, 3, 1]], atol=1e-12)


def test_rotation_order():
    a, b, g = 0.3, -0.2, 0.7
    Rx = Rotation.from_euler("x", a).as_matrix()
    Ry = Rotation.from_euler("y", b).as_matrix()
    Rz = Rotation.from_euler("z", g).as_matrix()
    assert np.allclose(rotation_matrix((a, b, g)), Rz @ Ry @ Rx, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-np.pi, np.pi)] * 3), st.tuples(*[st.floats(-100, 100)] * 3),
       st.integers(0, 1000))
def test_rigid_isometry(euler, offset, seed):
    x = np.random.default_rng(seed).normal(0, 30, size=(15, 3))
    y = similarity_transform(x, 1.0, euler, offset)
    dx = np.linalg.norm(x[:, None] - x[None], axis=-1)
    dy = np.linalg.norm(y[:, None] - y[None], axis=-1)
    assert np.abs(dx - dy).max() < 1e-9


# --- RBF -----------------------------------------------------------------------------


def test_rbf_null_field():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 3))
    c = rng.normal(size=(5, 3))
    out = rbf_deform(x, c, np.zeros((5, 3)), np.zeros((5, 3)), np.zeros((4, 3)))
    assert np.array_equal(out, np.zeros((10, 3)))


def test_rbf_single_kernel():
    out = rbf_deform([[3.0, 4.0, 0.0]], [[0, 0, 0.0]], [[0, 0, 0.0]], [[1.0, 0, 0]],
                     np.zeros((4, 3)))
    assert np.allclose(out, [[5, 0, 0]])


def test_rbf_at_center_is_affine_only():
    v = np.arange(12, dtype=float).reshape(4, 3) / 10
    c, dc = np.array([[1.0, 2.0, 3.0]]), np.array([[0.5, -0.5, 0.0]])
    x = c + dc
    out = rbf_deform(x, c, dc, [[7.0, 8.0, 9.0]], v)
    assert np.allclose(out, x @ v[:3] + v[3])


def test_solved_warp_interpolates_offsets():
    rng = np.random.default_rng(2)
    c = control_grid(rng.normal(0, 20, (100, 3)), (4, 3, 3))
    dc = rng.normal(0, 1, c.shape)
    w, v, _, p = solve_rbf(c, dc)
    disp = rbf_deform(p, c, dc, w, v)
    assert np.allclose(disp, dc, atol=1e-9)
    # side conditions: the kernel weights carry no affine part
    assert np.allclose(w.sum(axis=0), 0, atol=1e-9)
    assert np.allclose(p.T @ w, 0, atol=1e-8)


def test_control_grid_shape():
    pts = np.random.default_rng(3).uniform(-10, 10, (200, 3))
    g = control_grid(pts)
    assert g.shape == (720, 3)
    lo, hi = pts.min(0), pts.max(0)
    assert np.allclose(g.min(0), (lo + hi) / 2 - (hi - lo) / 2 * 1.2)


# --- prediction ----------------------------------------------------------------------


def test_predict_identity_chain(small_model):
    cfg = FitConfig(center=False)
    fitter = Fitter(small_model, cfg)
    assert np.array_equal(fitter.predict(fitter.initial_state()), small_model.mean)
    # centred fits work relative to the mean's centroid
    centred = Fitter(small_model)
    X = centred.predict(centred.initial_state())
    assert np.allclose(X + small_model.mean.mean(axis=0), small_model.mean, atol=1e-12)


def test_predict_without_warp_is_similarity(small_model):
    cfg = FitConfig(center=False)
    fitter = Fitter(small_model, cfg)
    st = random_state(fitter, np.random.default_rng(4), warp=0.0)
    expect = similarity_transform(reconstruct(small_model, st.a, float(st.delta)),
                                  float(st.psi), st.euler, st.offset)
    assert np.abs(fitter.predict(st) - expect).max() < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_predict_composition_oracle(small_model, seed):
    cfg = FitConfig(center=False)
    fitter = Fitter(small_model, cfg)
    st = random_state(fitter, np.random.default_rng(seed))
    X = predict_mesh(small_model, st, cfg)
    Xt = similarity_transform(reconstruct(small_model, st.a, float(st.delta)), float(st.psi),
                              st.euler, st.offset)
    w, v, _, _ = solve_rbf(st.control_points, st.delta_c)
    expect = Xt + rbf_deform(Xt, st.control_points, st.delta_c, w, v)
    assert np.abs(X - expect).max() < 1e-12 * max(1.0, np.abs(expect).max()) * 10


# --- data terms ----------------------------------------------------------------------


def brute_mean_min_sq(q, x):
    total = []
    for a in q:
        total.append(min(sum((ai - bi) ** 2 for ai, bi in zip(a, b)) for b in x))
    return math.fsum(total) / len(total)


def test_loss_mesh_examples():
    x = np.random.default_rng(5).normal(size=(30, 3))
    assert loss_mesh(x[[3, 7, 7, 11]], x) == 0.0
    q = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    assert loss_mesh(q, np.zeros((1, 3))) == 2.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 30), st.integers(1, 30))
def test_loss_mesh_brute_oracle(seed, nq, nx):
    rng = np.random.default_rng(seed)
    q, x = rng.normal(size=(nq, 3)), rng.normal(size=(nx, 3))
    expect = brute_mean_min_sq(q.tolist(), x.tolist())
    for method in ("brute", "kdtree"):
        assert loss_mesh(q, x, method) == pytest.approx(expect, rel=1e-14, abs=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_nearest_methods_agree(seed):
    rng = np.random.default_rng(seed)
    q, x = rng.normal(size=(200, 3)), rng.normal(size=(300, 3))
    assert np.array_equal(nearest(q, x, "brute"), nearest(q, x, "kdtree"))


def test_loss_centerline_examples():
    s = np.linspace(0, 50, 300)
    line = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
    assert loss_centerline(line, line) == 0.0
    shifted = line + [0.0, 3.0, 0.0]
    assert loss_centerline(line, shifted) == pytest.approx(9.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_loss_centerline_brute_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(25, 3)), rng.normal(size=(40, 3))
    assert loss_centerline(a, b) == pytest.approx(brute_mean_min_sq(a.tolist(), b.tolist()),
                                                  rel=1e-14, abs=0)


def test_centerline_from_slices_examples():
    z = np.linspace(0, 80, 6)
    circ = lambda c: 10 * np.stack([np.cos(np.linspace(0, 2 * np.pi, 30, endpoint=False)),
                                    np.sin(np.linspace(0, 2 * np.pi, 30, endpoint=False)),
                                    np.zeros(30)], axis=1) + c
    cs = [contour(circ([0, 0, zi]), i) for i, zi in enumerate(z)]
    cl = centerline_from_slices(cs)
    assert len(cl.points) == 300
    assert np.allclose(cl.points[:, :2], 0, atol=1e-9)
    assert cl.length == pytest.approx(80, rel=1e-9)
    # unordered input with station labels is put in order
    cl2 = centerline_from_slices(cs[::-1])
    assert np.allclose(cl2.points, cl.points)
    with pytest.raises(TooFewSlices):
        centerline_from_slices(cs[:4])


def test_centerline_from_slices_arc():
    R = 50.0
    phi = np.linspace(0, np.pi, 7)
    cs = [contour(np.array([[R * np.cos(p), 0, R * np.sin(p)]]) + np.eye(3) * 0.0, i)
          for i, p in enumerate(phi)]
    cl = centerline_from_slices(cs)
    assert abs(cl.length - np.pi * R) / (np.pi * R) < 0.01
    # the chord parameterisation still handles uneven spacing
    phi2 = np.array([0, 0.2, 0.5, 1.4, 2.0, 2.9, np.pi])
    cs2 = [contour(np.array([[R * np.cos(p), 0, R * np.sin(p)]]), i) for i, p in enumerate(phi2)]
    assert abs(centerline_from_slices(cs2).length - np.pi * R) / (np.pi * R) < 0.01


def test_regularization_examples(small_model):
    fitter = Fitter(small_model)
    st0 = fitter.initial_state()
    assert regularization_losses(st0) == (0.0, 0.0, 0.0)
    st0.a = np.array([1.0, 2.0])
    st0.delta_c = np.array([[1.0, 0, 0], [0, 2.0, 0]])
    st0.euler = np.array([0.1, 0.2, 0.3])
    modal, rot, warp = regularization_losses(st0)
    assert modal == 2.5 and warp == 2.5
    assert rot == pytest.approx((0.01 + 0.04 + 0.09) / 3)


# --- total loss and gradients ----------------------------------------------------------


def perfect_data(fitter, state):
    """Contour points on the predicted mesh, slice centerline on the mesh centerline."""
    X = fitter.predict(state)
    C = X.reshape(fitter.n_rings, fitter.ppr, 3).mean(axis=1)
    cm = fitter.cl_op @ C
    return FrameData(X[::7].copy(), cm[::3].copy(), np.zeros(3))


def test_total_loss_zero_at_perfect_fit(small_model):
    fitter = Fitter(small_model)
    st = fitter.initial_state()
    ev = fitter.evaluate(st, perfect_data(fitter, st))
    assert ev.total == 0.0
    for k in PARAMS:
        assert np.all(ev.grads[k] == 0)


def test_total_loss_function(small_model):
    fitter = Fitter(small_model)
    st = random_state(fitter, np.random.default_rng(6))
    data = perfect_data(fitter, fitter.initial_state())
    total, grads = total_loss(small_model, st, data)
    assert total == pytest.approx(fitter.evaluate(st, data).total, rel=1e-12)
    assert set(grads) == set(PARAMS)


def test_gradient_linear_in_weights(small_model):
    fitter = Fitter(small_model)
    st = random_state(fitter, np.random.default_rng(7))
    data = perfect_data(fitter, fitter.initial_state())
    ev = fitter.evaluate(st, data)
    for i in range(5):
        w1 = np.ones(5)
        w2 = w1.copy()
        w2[i] = 2.0
        w0 = w1.copy()
        w0[i] = 0.0
        g1 = fitter.evaluate(st, data, weights=w1, matching=ev.matching).grads
        g2 = fitter.evaluate(st, data, weights=w2, matching=ev.matching).grads
        g0 = fitter.evaluate(st, data, weights=w0, matching=ev.matching).grads
        for k in PARAMS:
            # doubling adds exactly one more copy of the term's contribution
            assert np.allclose(g2[k] - g1[k], g1[k] - g0[k], rtol=1e-9, atol=1e-10)


def test_inactive_gradients_zero(small_model):
    fitter = Fitter(small_model)
    st = random_state(fitter, np.random.default_rng(8))
    data = perfect_data(fitter, fitter.initial_state())
    ev = fitter.evaluate(st, data, ("a", "psi"))
    for k in PARAMS:
        if k not in ("a", "psi"):
            assert np.all(ev.grads[k] == 0)
    assert np.any(ev.grads["a"] != 0)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(small_model, seed):
    fitter = Fitter(small_model)
    rng = np.random.default_rng(100 + seed)
    src = sample_shape(small_model, seed, 1.0)
    data = fitter.frame_data(model_slices(small_model, src, noise=0.5).frames[0])
    errs = gradient_errors(fitter, random_state(fitter, rng), data, rng)
    assert max(errs.values()) <= 1e-4, errs


def test_warp_gradients_on_a_base_mesh(small_model):
    fitter = Fitter(small_model)
    rng = np.random.default_rng(9)
    src = sample_shape(small_model, 4, 1.0)
    data = fitter.frame_data(model_slices(small_model, src).frames[0])
    base = fitter.predict(random_state(fitter, rng, warp=0.0))
    st = fitter.initial_state()
    st.delta_c[:] = rng.normal(0, 0.5, st.delta_c.shape)
    errs = gradient_errors(fitter, st, data, rng, base=base)
    assert max(errs.values()) <= 1e-4, errs


# --- optimizer -----------------------------------------------------------------------


def test_adam_first_step_is_lr_sign():
    p = {"x": np.array([1.0, -2.0, 3.0])}
    g = {"x": np.array([0.5, -4.0, 0.0])}
    Adam(lr=0.1).step(p, g)
    assert np.allclose(p["x"], [0.9, -1.9, 3.0])


def test_adam_minimises_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    p = {"x": np.zeros(3)}
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(p, {"x": 2 * (p["x"] - target)})
    assert np.allclose(p["x"], target, atol=1e-3)


def test_adam_skips_inactive_and_resets():
    p = {"x": np.zeros(2), "y": np.zeros(2)}
    opt = Adam()
    opt.step(p, {"x": np.ones(2), "y": np.ones(2)}, active=("x",))
    assert np.all(p["y"] == 0) and "y" not in opt.m
    opt.reset(["x"])
    assert "x" not in opt.t


# --- fitting -------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(schedule=((10, ("a",)), (5, ("a",))))
    with pytest.raises(ValueError):
        FitConfig(schedule=((10, ("nope",)),))
    with pytest.raises(ValueError):
        FitConfig(loss_weights=(1, 1, 1, 1))
    with pytest.raises(ValueError):
        FitConfig(nn_method="grid")
    assert FitConfig().n_epochs == 300
    assert [FitConfig().stage_of(e) for e in (0, 9, 10, 199, 200, 250, 299)] == [0, 0, 1, 1, 2,
                                                                                 3, 3]


def test_empty_warp_stage_stays_in_model_span(small_model):
    cfg = FitConfig(schedule=SHORT[:2], center=False)
    src = sample_shape(small_model, 2, 1.0)
    fitter = Fitter(small_model, cfg)
    state, final, data, _ = fitter.fit_frame0(model_slices(small_model, src).frames[0])
    assert not np.any(state.delta_c)
    expect = similarity_transform(reconstruct(small_model, state.a, float(state.delta)),
                                  float(state.psi), state.euler, state.offset)
    assert np.abs(final.nodes - expect).max() < 1e-9


def test_fit_is_deterministic(small_model):
    cfg = FitConfig(schedule=SHORT)
    src = sample_shape(small_model, 3, 1.0)
    contours = model_slices(small_model, src, noise=0.5).frames[0]
    a = fit_frame0(small_model, contours, cfg)
    b = fit_frame0(small_model, contours, cfg)
    assert np.array_equal(a[1].nodes, b[1].nodes)
    assert a[2] == b[2]


def test_best_loss_improves_within_each_stage(small_model):
    src = sample_shape(small_model, 5, 1.0)
    contours = model_slices(small_model, src, noise=0.5).frames[0]
    _, _, trace = fit_frame0(small_model, contours, FitConfig(schedule=SHORT))
    for s in range(len(SHORT)):
        tot = np.array([r["total"] for r in trace if r["stage"] == s])
        best = np.minimum.accumulate(tot)
        assert np.all(np.diff(best) <= 0)
        assert best[-1] <= tot[0]


@pytest.mark.parametrize("center", [True, False])
def test_translation_equivariance(small_model, center):
    u = np.array([12.0, -7.0, 30.0])
    src = sample_shape(small_model, 6, 1.0)
    cs = model_slices(small_model, src).frames[0]
    moved = [SliceContour(Plane(c.plane.origin + u, c.plane.normal), c.points + u, c.frame,
                          c.station) for c in cs]
    if center:
        cfg = FitConfig(schedule=SHORT)
        fa, fb = Fitter(small_model, cfg), Fitter(small_model, cfg)
    else:
        # without centering the model and the lattice move too, and rotations (which act
        # about the origin) stay frozen
        sched = ((3, ("a", "delta")), (20, ("a", "delta", "psi", "offset")),
                 (30, ("a", "delta", "offset", "delta_c")))
        cfg = FitConfig(schedule=sched, center=False)
        shifted = type(small_model)(small_model.mean + u, small_model.modes, small_model.sigmas,
                                    small_model.explained_variance_ratio, small_model.n_rings,
                                    small_model.pts_per_ring)
        cfg_b = cfg
        fa = Fitter(small_model, cfg)
        fb = Fitter(shifted, cfg_b, control_points=fa.control_points + u)
        # psi scales about the origin as well; translate the model frame instead of psi
        sched = ((3, ("a", "delta")), (20, ("a", "delta", "offset")),
                 (30, ("a", "delta", "offset", "delta_c")))
        cfg = FitConfig(schedule=sched, center=False)
        fa = Fitter(small_model, cfg)
        fb = Fitter(shifted, cfg, control_points=fa.control_points + u)
    _, ea, da, _ = fa.fit_frame0(cs)
    _, eb, db, _ = fb.fit_frame0(moved)
    xa = fa.to_mesh(ea.nodes, da.com).nodes
    xb = fb.to_mesh(eb.nodes, db.com).nodes
    rms = np.sqrt(((xb - (xa + u)) ** 2).sum(axis=1).mean())
    assert rms < 1e-3


def test_nonfinite_aborts_with_trace(small_model):
    src = sample_shape(small_model, 1, 1.0)
    cs = model_slices(small_model, src).frames[0]
    pts = np.array(cs[0].points)
    pts[0, 0] = np.nan
    cs = [SliceContour(cs[0].plane, pts, 0, cs[0].station)] + list(cs[1:])
    with pytest.raises(NonFinite):
        fit_frame0(small_model, cs, FitConfig(schedule=SHORT))
    cs = model_slices(small_model, src).frames[0]
    with pytest.raises(NonFinite) as info:
        fit_frame0(small_model, cs, FitConfig(schedule=SHORT, lr=1e300))
    assert len(info.value.trace) > 0


def test_static_sequence_stays_put(small_model):
    cfg = FitConfig()
    src = sample_shape(small_model, 7, 1.0)
    ss = model_slices(small_model, src, frames=[src] * 4, noise=0.0)
    res = fit_sequence(small_model, ss, cfg)
    assert res.n_frames == 4 and len(res.centerlines) == 4
    for m in res.meshes[1:]:
        rms = np.sqrt(((m.nodes - res.meshes[0].nodes) ** 2).sum(axis=1).mean())
        assert rms < 0.1


def test_sequence_tracks_inflation(small_model):
    """Mid-cycle 5 % inflation: mean fitted radius change traces the profile."""
    src = sample_shape(small_model, 8, 1.0)
    radial = np.array([1.0, 1.025, 1.05, 1.025, 1.0])
    prof = MotionProfile(radial, np.ones(5), 2)
    seq = animate(src, prof)
    stations = tuple(range(1, 13))
    ss = model_slices(small_model, src, stations, frames=seq)
    res = fit_sequence(small_model, ss, FitConfig())
    r0 = ring_radii(res.meshes[0])
    fitted = np.array([np.mean(ring_radii(m) / r0) for m in res.meshes])
    assert np.abs(fitted - radial).max() <= 0.02


def test_frame_data_centering(small_model):
    fitter = Fitter(small_model)
    src = sample_shape(small_model, 9, 1.0)
    cs = model_slices(small_model, src).frames[0]
    data = fitter.frame_data(cs)
    assert np.allclose(data.points.mean(axis=0), 0, atol=1e-9)
    assert len(data.cl_slices) == 300
    two = fitter.frame_data(cs[:2])
    assert len(two.cl_slices) == 300
