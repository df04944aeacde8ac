"""Planar contour containers shared by the fitter, the generator and the planner."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Plane

N_CONTOUR_POINTS = 180


@dataclass(frozen=True)
class SliceContour:
    plane: Plane
    points: np.ndarray
    frame: int = 0
    station: int | None = None  # candidate index along the vessel, when known

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def off_plane(self) -> float:
        return float(np.abs(self.plane.signed_distance(self.points)).max())


@dataclass
class SliceSet:
    frames: list[list[SliceContour]] = field(default_factory=list)

    def __post_init__(self):
        if self.frames:
            s = len(self.frames[0])
            if any(len(f) != s for f in self.frames):
                raise ValueError("every frame must carry the same number of slices")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def n_slices(self) -> int:
        return len(self.frames[0]) if self.frames else 0

    def frame_points(self, t: int) -> np.ndarray:
        return np.vstack([c.points for c in self.frames[t]])

    def subset(self, indices) -> "SliceSet":
        """Keep the slices at the given positions (per frame), preserving frame order."""
        return SliceSet([[f[i] for i in indices] for f in self.frames])

    def by_station(self, stations) -> "SliceSet":
        pos = {c.station: i for i, c in enumerate(self.frames[0])}
        return self.subset([pos[s] for s in stations])

    def first_frames(self, n: int) -> "SliceSet":
        return SliceSet(self.frames[:n])
