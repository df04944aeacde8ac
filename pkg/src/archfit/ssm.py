"""PCA statistical shape model over topology-consistent tube meshes."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import RankDeficient, TopologyMismatch
from .mesh import TubeMesh

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ShapeModel:
    """Mean shape plus orthonormal modes (flattened length 3N) and per-mode std devs.

    ``modes`` has shape (M, N, 3); ``sigmas`` are in mm along each unit mode.
    """

    mean: np.ndarray
    modes: np.ndarray
    sigmas: np.ndarray
    explained_variance_ratio: np.ndarray
    n_rings: int
    pts_per_ring: int

    def __post_init__(self):
        for name in ("mean", "modes", "sigmas", "explained_variance_ratio"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        n = self.n_rings * self.pts_per_ring
        if self.mean.shape != (n, 3):
            raise TopologyMismatch(f"mean has shape {self.mean.shape}, expected ({n}, 3)")
        if self.modes.ndim != 3 or self.modes.shape[1:] != (n, 3):
            raise TopologyMismatch("modes must have shape (M, N, 3)")
        if len(self.sigmas) != self.n_modes:
            raise ValueError("one sigma per mode")

    @property
    def n_modes(self) -> int:
        return self.modes.shape[0]

    @property
    def topology(self) -> tuple[int, int]:
        return (self.n_rings, self.pts_per_ring)

    @property
    def basis(self) -> np.ndarray:
        """(3N, M) matrix of flattened modes."""
        return self.modes.reshape(self.n_modes, -1).T

    def mean_mesh(self) -> TubeMesh:
        return TubeMesh(self.mean, self.n_rings, self.pts_per_ring)

    def mesh(self, nodes) -> TubeMesh:
        return TubeMesh(nodes, self.n_rings, self.pts_per_ring)

    def truncated(self, n_modes: int) -> "ShapeModel":
        return ShapeModel(self.mean, self.modes[:n_modes], self.sigmas[:n_modes],
                          self.explained_variance_ratio[:n_modes], self.n_rings,
                          self.pts_per_ring)


def _rigid_align(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Kabsch: rotate and translate ``src`` onto ``dst`` (no scaling)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    return (src - cs) @ R.T + cd


def build_model(dataset, n_modes: int = 10, align: bool = False) -> ShapeModel:
    """PCA by SVD of the centered (k, 3N) data matrix.

    Sigmas use the (k - 1)-denominator sample standard deviation of the mode scores.
    With ``align`` every shape is first rigidly registered to the first one.
    """
    meshes = list(dataset)
    if len(meshes) < 2:
        raise ValueError("need at least 2 shapes")
    topo = meshes[0].topology
    for m in meshes[1:]:
        if m.topology != topo:
            raise TopologyMismatch(f"topology {m.topology} != {topo}")
    X = np.stack([m.nodes for m in meshes])
    if align:
        X = np.stack([X[0]] + [_rigid_align(x, X[0]) for x in X[1:]])
    k = len(X)
    flat = X.reshape(k, -1)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, s, Vt = np.linalg.svd(centered, full_matrices=False)
    var = s**2 / (k - 1)
    total = var.sum()
    scale = max(s[0], 1.0) if len(s) else 1.0
    usable = int(np.sum(s > 1e-9 * scale)) if total > 0 else 0
    bound = min(k - 1, flat.shape[1])
    if n_modes > bound or n_modes > usable:
        warnings.warn(
            f"requested {n_modes} modes, only {min(bound, usable)} usable", RankDeficient,
            stacklevel=2,
        )
    m = min(n_modes, bound, usable)
    modes = Vt[:m]
    # deterministic sign: largest-magnitude component positive
    flip = np.sign(modes[np.arange(m), np.argmax(np.abs(modes), axis=1)])
    modes = modes * flip[:, None]
    sigmas = np.sqrt(var[:m])
    evr = var[:m] / total if total > 0 else np.zeros(m)
    n_rings, ppr = topo
    return ShapeModel(mean.reshape(-1, 3), modes.reshape(m, len(mean) // 3, 3), sigmas, evr,
                      n_rings, ppr)


def reconstruct(model: ShapeModel, a, delta: float = 1.0) -> np.ndarray:
    """X_mean + delta * sum_m a_m sigma_m Phi_m."""
    a = np.asarray(a, dtype=float)
    if a.shape != (model.n_modes,):
        raise ValueError(f"expected {model.n_modes} amplitudes, got shape {a.shape}")
    return model.mean + delta * np.tensordot(a * model.sigmas, model.modes, axes=1)


def project(model: ShapeModel, nodes) -> np.ndarray:
    """Amplitudes (in sigma units) of the orthogonal projection onto the modes."""
    d = (np.asarray(nodes) - model.mean).reshape(-1)
    return (model.basis.T @ d) / model.sigmas


def sample_shape(model: ShapeModel, rng_seed=0, sigma_scale: float = 1.0) -> TubeMesh:
    rng = np.random.default_rng(rng_seed)
    a = rng.normal(0.0, 1.0, model.n_modes) * sigma_scale
    return model.mesh(reconstruct(model, a, 1.0))
