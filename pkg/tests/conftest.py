import numpy as np
import pytest

from archfit.mesh import TubeMesh
from archfit.ssm import build_model
from archfit.synth import generate_cohort

ACCEPTANCE = {}


def straight_tube(radius=10.0, n_rings=40, ppr=82, length=39.0, phase=0.0):
    z = np.linspace(0.0, length, n_rings)
    th = 2 * np.pi * np.arange(ppr) / ppr + phase
    nodes = np.stack(
        [np.broadcast_to(radius * np.cos(th), (n_rings, ppr)),
         np.broadcast_to(radius * np.sin(th), (n_rings, ppr)),
         np.broadcast_to(z[:, None], (n_rings, ppr))], axis=-1)
    return TubeMesh(nodes.reshape(-1, 3), n_rings, ppr)


def torus_tube(R=50.0, r=8.0, n_rings=40, ppr=82, span=np.pi):
    """Tube whose ring centers follow a circular arc of radius R in the x-z plane."""
    phi = np.linspace(0.0, span, n_rings)
    th = 2 * np.pi * np.arange(ppr) / ppr
    c = np.stack([R * np.cos(phi), np.zeros_like(phi), R * np.sin(phi)], axis=1)
    radial = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], axis=1)
    y = np.array([0.0, 1.0, 0.0])
    nodes = (c[:, None] + r * np.cos(th)[None, :, None] * radial[:, None]
             + r * np.sin(th)[None, :, None] * y)
    return TubeMesh(nodes.reshape(-1, 3), n_rings, ppr)


@pytest.fixture(scope="session")
def small_cohort():
    meshes, params = generate_cohort(12, seed=1)
    return meshes, params


@pytest.fixture(scope="session")
def small_model(small_cohort):
    return build_model(small_cohort[0], 10)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


def random_state(fitter, rng, warp=0.5):
    """A generic state: every parameter away from its neutral value."""
    st = fitter.initial_state()
    st.a[:] = rng.normal(0, 0.5, st.a.shape)
    st.delta[...] = 1 + rng.normal(0, 0.1)
    st.psi[...] = 1 + rng.normal(0, 0.05)
    st.euler[:] = rng.normal(0, 0.1, 3)
    st.offset[:] = rng.normal(0, 2, 3)
    st.delta_c[:] = rng.normal(0, warp, st.delta_c.shape)
    return st


# components far below a term's largest gradient component are compared on that scale:
# their central differences are round-off at any step
FD_FLOOR = 1e-6
FD_REL_FLOOR = 1e-7


# relative central-difference steps: scale and rotation are the most curved directions,
# the warp offsets have the smallest gradients and need a wider step against round-off
FD_STEPS = {"psi": 1e-5, "euler": 1e-5}
FD_STEP = 1e-3


def gradient_errors(fitter, state, data, rng, base=None, n_per_group=12, steps=None):
    """Max relative error of analytic vs central-difference gradients, per loss term.

    Matchings are frozen at the unperturbed state. Each term's analytic gradient comes
    from a one-hot weight vector; finite differences use the unweighted term values.
    """
    steps = FD_STEPS if steps is None else steps
    from archfit.fitting import LOSS_TERMS, PARAMS

    names = ("delta_c",) if base is not None else PARAMS
    ev = fitter.evaluate(state, data, names, base)
    grads = {}
    for i, term in enumerate(LOSS_TERMS):
        w = np.zeros(5)
        w[i] = 1.0
        grads[term] = fitter.evaluate(state, data, names, base, weights=w,
                                      matching=ev.matching).grads
    errs = {t: 0.0 for t in LOSS_TERMS}
    floor = {t: max(FD_FLOOR, FD_REL_FLOOR * max(np.abs(g).max() for g in grads[t].values()))
             for t in LOSS_TERMS}
    for k in names:
        flat = state.params[k].reshape(-1)
        n = flat.size
        if n <= n_per_group:
            idx = np.arange(n)
        else:
            # the largest components of the mesh-term gradient plus random ones
            g = np.abs(grads["mesh"][k].reshape(-1))
            idx = np.unique(np.concatenate([np.argsort(g)[-4:],
                                            rng.choice(n, n_per_group - 4, replace=False)]))
        for j in idx:
            h = steps.get(k, FD_STEP) * max(1.0, abs(flat[j]))
            old = flat[j]
            flat[j] = old + h
            tp = fitter.evaluate(state, data, (), base, matching=ev.matching).terms
            flat[j] = old - h
            tm = fitter.evaluate(state, data, (), base, matching=ev.matching).terms
            flat[j] = old
            for term in LOSS_TERMS:
                fd = (tp[term] - tm[term]) / (2 * h)
                an = grads[term][k].reshape(-1)[j]
                rel = abs(fd - an) / max(abs(fd), abs(an), floor[term])
                errs[term] = max(errs[term], rel)
    return errs
