"""Dynamic multislice ellipsoid phantom with per-slice asynchronous motion.

Every acquired frame gets a ground-truth motion state (cardiac and
respiratory phase) and the noiseless volume rendered at that state, so
reconstruction and alignment errors can be measured objectively.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi


class Ellipsoid(NamedTuple):
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    intensity: float


def _default_structures() -> dict[str, Ellipsoid]:
    return {
        "torso": Ellipsoid((0.0, 0.0, 0.0), (140.0, 105.0, 300.0), 0.25),
        "liver": Ellipsoid((-45.0, -60.0, -20.0), (75.0, 45.0, 50.0), 0.5),
        "myocardium": Ellipsoid((10.0, 30.0, 0.0), (52.0, 44.0, 40.0), 0.6),
        "blood_pool": Ellipsoid((10.0, 30.0, 0.0), (36.0, 30.0, 30.0), 1.0),
    }


# painter's order: later structures overwrite earlier ones
_PAINT_ORDER = ("torso", "liver", "myocardium", "blood_pool")


@dataclass(frozen=True)
class PhantomConfig:
    """Geometry, motion rates and structures of the phantom.

    ``slice_offsets_s`` defaults to ``z * slice_period_s``; the rendered
    slices sit ``slice_spacing_mm`` apart, centred on z = 0.
    """

    grid: tuple[int, int, int] = (64, 64, 4)
    fov_mm: float = 320.0
    f_cardiac: float = 1.25
    f_resp: float = 0.25
    slice_offsets_s: tuple[float, ...] | None = None
    slice_period_s: float = 5.0
    slice_spacing_mm: float = 10.0
    # blood-pool radius shrinks by this fraction at phase pi
    contraction: float = 0.3
    # optional in-plane cardiac sway (voxels) along x, proportional to sin(phase_cardiac);
    # nonzero values make phi and -phi distinguishable but add a latent factor
    cardiac_sway_vox: float = 0.0
    # respiratory translation (voxels): d*sin along y, hysteresis*(1-cos) along x
    resp_shift_vox: float = 3.0
    resp_hysteresis_vox: float = 0.0
    edge_vox: float = 0.6
    structures: dict[str, Ellipsoid] = field(default_factory=_default_structures)

    def __post_init__(self):
        nx, ny, nz = self.grid
        if nx < 16 or ny < 16:
            raise ValueError(f"in-plane grid must be >= 16, got {self.grid}")
        if nz < 2:
            raise ValueError(f"need at least 2 slices, got Nz={nz}")
        if not 0 < self.f_resp < self.f_cardiac:
            raise ValueError("require 0 < f_resp < f_cardiac")
        if self.slice_offsets_s is not None and len(self.slice_offsets_s) != nz:
            raise ValueError("slice_offsets_s must have one entry per slice")
        if not 0.0 <= self.contraction < 1.0:
            raise ValueError("contraction must lie in [0, 1)")
        half = self.fov_mm / 2.0
        for name, e in self.structures.items():
            for c, r in zip(e.center_mm[:2], e.radii_mm[:2]):
                if abs(c) + r > half:
                    raise ValueError(f"structure {name!r} extends outside the FOV")

    @property
    def n_slices(self) -> int:
        return self.grid[2]

    @property
    def voxel_mm(self) -> float:
        return self.fov_mm / self.grid[0]

    def offsets(self) -> np.ndarray:
        if self.slice_offsets_s is not None:
            return np.asarray(self.slice_offsets_s, dtype=float)
        return np.arange(self.n_slices) * self.slice_period_s

    def slice_positions_mm(self) -> np.ndarray:
        nz = self.n_slices
        return (np.arange(nz) - (nz - 1) / 2.0) * self.slice_spacing_mm


class MotionState(NamedTuple):
    phase_cardiac: float
    phase_resp: float


def wrap_phase(phi):
    """Wrap angles to [0, 2pi)."""
    out = np.mod(phi, TWO_PI)
    # np.mod returns exactly 2pi for tiny negative inputs
    out = np.where(out >= TWO_PI, 0.0, out)
    return float(out) if out.ndim == 0 else out


def motion_state(cfg: PhantomConfig, t_abs: float, slice_index: int) -> MotionState:
    if not 0 <= slice_index < cfg.n_slices:
        raise IndexError(f"slice_index {slice_index} out of range for {cfg.n_slices} slices")
    if t_abs < 0:
        raise ValueError("t_abs must be non-negative")
    t = t_abs + cfg.offsets()[slice_index]
    return MotionState(wrap_phase(TWO_PI * cfg.f_cardiac * t), wrap_phase(TWO_PI * cfg.f_resp * t))


def _smooth_mask(coords, e: Ellipsoid, center, scale: float, edge_mm: float):
    x, y, z = coords
    rx, ry, rz = (r * scale for r in e.radii_mm)
    rho = np.sqrt(((x - center[0]) / rx) ** 2 + ((y - center[1]) / ry) ** 2 + ((z - center[2]) / rz) ** 2)
    # signed distance along the shortest in-plane radius, soft edge
    width = edge_mm / min(rx, ry)
    return 0.5 * (1.0 + np.tanh((1.0 - rho) / width))


def displacement_vox(cfg: PhantomConfig, state: MotionState) -> tuple[np.ndarray, np.ndarray]:
    """In-plane (x, y) displacement in voxels: respiratory (all structures) and cardiac sway."""
    pr, pc = state.phase_resp, state.phase_cardiac
    resp = np.array([cfg.resp_hysteresis_vox * (1.0 - np.cos(pr)), cfg.resp_shift_vox * np.sin(pr)])
    sway = np.array([cfg.cardiac_sway_vox * np.sin(pc), 0.0])
    return resp, sway


def render_volume(cfg: PhantomConfig, state: MotionState) -> np.ndarray:
    """Real, non-negative volume of shape (Nx, Ny, Nz) at the given motion state."""
    nx, ny, nz = cfg.grid
    vox = cfg.voxel_mm
    xs = (np.arange(nx) - nx / 2) * vox
    ys = (np.arange(ny) - ny / 2) * vox
    coords = np.meshgrid(xs, ys, cfg.slice_positions_mm(), indexing="ij")

    resp, sway = displacement_vox(cfg, state)
    radius_scale = 1.0 - cfg.contraction * 0.5 * (1.0 - np.cos(state.phase_cardiac))
    edge_mm = cfg.edge_vox * vox

    vol = np.zeros((nx, ny, nz))
    for name in _PAINT_ORDER:
        e = cfg.structures.get(name)
        if e is None:
            continue
        shift = resp.copy()
        scale = 1.0
        if name in ("myocardium", "blood_pool"):
            shift = shift + sway
        if name == "blood_pool":
            scale = radius_scale
        center = (e.center_mm[0] + shift[0] * vox, e.center_mm[1] + shift[1] * vox, e.center_mm[2])
        m = _smooth_mask(coords, e, center, scale, edge_mm)
        vol = vol * (1.0 - m) + e.intensity * m
    return vol


@dataclass
class GroundTruth:
    """Ground-truth records for every (slice, frame) of the acquisition.

    ``phases[z, t] = (cardiac, resp)`` and ``volumes[z, t]`` is the full
    noiseless volume rendered at that state.
    """

    phases: np.ndarray  # (Nz, F, 2)
    volumes: np.ndarray  # (Nz, F, Nx, Ny, Nz)
    frame_times: np.ndarray  # (F,) seconds after slice start

    @property
    def n_slices(self) -> int:
        return self.phases.shape[0]

    @property
    def n_frames(self) -> int:
        return self.phases.shape[1]

    def state(self, z: int, t: int) -> MotionState:
        return MotionState(*map(float, self.phases[z, t]))


def simulate_series(cfg: PhantomConfig, schedule) -> GroundTruth:
    """Render one ground-truth record per binned frame at its centre time."""
    times = np.asarray(schedule.frame_times(), dtype=float)
    if times.size == 0:
        raise ValueError("acquisition schedule has no frames")
    nz = cfg.n_slices
    phases = np.empty((nz, times.size, 2))
    volumes = np.empty((nz, times.size, *cfg.grid), dtype=np.float32)
    for z in range(nz):
        for t, tc in enumerate(times):
            st = motion_state(cfg, float(tc), z)
            phases[z, t] = st
            volumes[z, t] = render_volume(cfg, st)
    return GroundTruth(phases=phases, volumes=volumes, frame_times=times)


def render_slice_dictionary(cfg: PhantomConfig, n_bins: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Renders on an ``n_bins x n_bins`` (cardiac, resp) phase grid.

    Returns ``(bin_phases, volumes)`` with shapes (n_bins,) and
    (n_bins, n_bins, Nx, Ny, Nz), indexed [cardiac_bin, resp_bin].
    """
    bins = TWO_PI * np.arange(n_bins) / n_bins
    vols = np.empty((n_bins, n_bins, *cfg.grid))
    for i, pc in enumerate(bins):
        for j, pr in enumerate(bins):
            vols[i, j] = render_volume(cfg, MotionState(pc, pr))
    return bins, vols
