"""Golden-angle spiral/radial trajectories and frame binning.

k-space coordinates are in cycles/FOV, so a grid of N samples spans
[-N/2, N/2) and ``k_max = N / 2``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0
GOLDEN_ANGLE = 2.0 * np.pi * (1.0 - 1.0 / GOLDEN_RATIO)


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray  # (P, 2) kx, ky
    density_weights: np.ndarray  # (P,)
    angle: float = 0.0

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError("points must have shape (P, 2)")
        if self.density_weights.shape != (self.points.shape[0],):
            raise ValueError("one density weight per point required")
        if np.any(self.density_weights <= 0):
            raise ValueError("density weights must be positive")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def rotated(self, angle: float) -> "Trajectory":
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        return Trajectory(self.points @ rot.T, self.density_weights, self.angle + angle)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.angle == other.angle
                and np.array_equal(self.points, other.points)
                and np.array_equal(self.density_weights, other.density_weights))

    __hash__ = None


def golden_angle(k: int, navigator_every: int = 6) -> float:
    """Rotation of interleave ``k``.

    Navigator interleaves (``k % navigator_every == navigator_every - 1``)
    stay at angle 0; the golden-angle counter only advances on the others.
    """
    if k < 0 or navigator_every < 0:
        raise ValueError("k and navigator_every must be non-negative")
    if navigator_every and k % navigator_every == navigator_every - 1:
        return 0.0
    n_nav_before = k // navigator_every if navigator_every else 0
    return float(np.mod((k - n_nav_before) * GOLDEN_ANGLE, 2.0 * np.pi))


def is_navigator(k: int, navigator_every: int) -> bool:
    return bool(navigator_every) and k % navigator_every == navigator_every - 1


def _ramp_weights(r: np.ndarray, r_floor: float) -> np.ndarray:
    w = np.maximum(r, r_floor)
    return w / w.mean()


def make_spiral(readout_points: int, turns: float, k_max: float) -> Trajectory:
    """Archimedean spiral from the k-space origin out to ``k_max``."""
    if readout_points < 8:
        raise ValueError("readout_points must be >= 8")
    if turns <= 0:
        raise ValueError("turns must be positive")
    if k_max <= 0:
        raise ValueError("k_max must be positive")
    s = np.linspace(0.0, 1.0, readout_points)
    r = k_max * s
    theta = 2.0 * np.pi * turns * s
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    return Trajectory(pts, _ramp_weights(r, k_max / readout_points))


def make_radial(readout_points: int, k_max: float) -> Trajectory:
    """Diameter spoke along kx through the origin; same interface as spirals."""
    if readout_points < 8:
        raise ValueError("readout_points must be >= 8")
    if k_max <= 0:
        raise ValueError("k_max must be positive")
    kx = np.linspace(-k_max, k_max, readout_points, endpoint=False)
    pts = np.stack([kx, np.zeros_like(kx)], axis=1)
    return Trajectory(pts, _ramp_weights(np.abs(kx), k_max / readout_points))


@dataclass(frozen=True)
class FrameBinning:
    frames: tuple[np.ndarray, ...]
    spirals_per_frame: int

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def bin_frames(n_interleaves: int, spirals_per_frame: int = 6, exclude_navigators: bool = False,
               navigator_every: int = 6) -> FrameBinning:
    """Group consecutive retained interleaves into frames; a trailing partial frame is dropped."""
    if not n_interleaves >= spirals_per_frame >= 1:
        raise ValueError("require n_interleaves >= spirals_per_frame >= 1")
    keep = [k for k in range(n_interleaves)
            if not (exclude_navigators and is_navigator(k, navigator_every))]
    n = len(keep) // spirals_per_frame
    keep = np.asarray(keep[: n * spirals_per_frame], dtype=np.int64)
    return FrameBinning(tuple(keep.reshape(n, spirals_per_frame)), spirals_per_frame)


@dataclass(frozen=True)
class AcquisitionSchedule:
    """Sequential per-slice acquisition: ``n_interleaves`` readouts every ``tr_s`` seconds."""

    n_interleaves: int = 480
    tr_s: float = 0.0084
    spirals_per_frame: int = 5
    navigator_every: int = 6
    exclude_navigators: bool = True
    readout_points: int = 256
    turns: float = 2.0
    trajectory: str = "spiral"

    def binning(self) -> FrameBinning:
        return bin_frames(self.n_interleaves, self.spirals_per_frame, self.exclude_navigators,
                          self.navigator_every)

    def interleave_times(self) -> np.ndarray:
        return np.arange(self.n_interleaves) * self.tr_s

    def frame_times(self) -> np.ndarray:
        """Frame-centre times: midpoint of each frame's first and last readout."""
        t = self.interleave_times()
        return np.array([0.5 * (t[f[0]] + t[f[-1]]) for f in self.binning().frames])

    def base_trajectory(self, n: int) -> Trajectory:
        k_max = n / 2.0
        if self.trajectory == "spiral":
            return make_spiral(self.readout_points, self.turns, k_max)
        if self.trajectory == "radial":
            return make_radial(self.readout_points, k_max)
        raise ValueError(f"unknown trajectory kind {self.trajectory!r}")

    def frame_trajectories(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated per-frame k-space points (F, P, 2) and density weights (F, P)."""
        base = self.base_trajectory(n)
        pts, wts = [], []
        for frame in self.binning().frames:
            rot = [base.rotated(golden_angle(int(k), self.navigator_every)) for k in frame]
            pts.append(np.concatenate([r.points for r in rot]))
            wts.append(np.concatenate([r.density_weights for r in rot]))
        return np.stack(pts), np.stack(wts)
