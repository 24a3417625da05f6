"""Multi-coil single-slice non-Cartesian Fourier encoding of a 3D volume.

The forward model of frame t of slice z extracts slice z, weights it by
each coil sensitivity and evaluates the 2D Fourier transform

    F(k) = sum_r x(r) exp(-2 pi i k.r / N)

at the frame's trajectory points (k in cycles/FOV, r centred pixel
indices). ``direct`` evaluates this sum exactly; ``gridded`` uses a
Kaiser-Bessel gridding approximation whose adjoint is its exact
transpose.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .phantom import GroundTruth


class GeometryError(ValueError):
    """Array shape does not match the operator geometry."""


class ConsistencyError(ValueError):
    """Ground truth, trajectories and measurements do not line up."""


def make_coil_maps(grid: tuple[int, int, int], n_coils: int = 4, width: float = 0.75) -> np.ndarray:
    """Smooth Gaussian-profile sensitivities around the FOV, shape (C, Nx, Ny, Nz)."""
    nx, ny, nz = grid
    x = (np.arange(nx) - nx / 2) / (nx / 2)
    y = (np.arange(ny) - ny / 2) / (ny / 2)
    z = (np.arange(nz) - (nz - 1) / 2) / max(nz, 1)
    xx, yy, zz = np.meshgrid(x, y, z, indexing="ij")
    maps = np.empty((n_coils, nx, ny, nz), dtype=np.complex128)
    for c in range(n_coils):
        a = 2.0 * np.pi * c / n_coils
        cx, cy = 1.1 * np.cos(a), 1.1 * np.sin(a)
        mag = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * width**2)) * (1.0 + 0.1 * zz)
        phase = a + 0.5 * np.pi * (xx * np.sin(a) - yy * np.cos(a))
        maps[c] = mag * np.exp(1j * phase)
    return maps


def _kb(s, width: float, beta: float):
    arg = 1.0 - (2.0 * s / width) ** 2
    out = np.i0(beta * np.sqrt(np.clip(arg, 0.0, None)))
    return np.where(arg >= 0.0, out, 0.0)


def kb_transform(f, width: float, beta: float):
    """Continuous Fourier transform of the Kaiser-Bessel kernel at frequency f (cycles/sample)."""
    a = beta**2 - (np.pi * width * np.asarray(f, dtype=float)) ** 2
    r = np.sqrt(np.abs(a))
    with np.errstate(invalid="ignore", divide="ignore"):
        val = np.where(a > 0, np.sinh(r) / np.where(r == 0, 1.0, r), np.sin(r) / np.where(r == 0, 1.0, r))
    return width * np.where(r == 0, 1.0, val)


def kb_beta(width: float, oversamp: float) -> float:
    return float(np.pi * np.sqrt((width / oversamp) ** 2 * (oversamp - 0.5) ** 2 - 0.8))


def _centered(n: int) -> np.ndarray:
    return np.arange(n) - n // 2


def _to_complex_dtype(dtype) -> torch.dtype:
    return {torch.float32: torch.complex64, torch.float64: torch.complex128,
            torch.complex64: torch.complex64, torch.complex128: torch.complex128}[dtype]


class EncodingOperator:
    """A_{t_z}: volume (Nx, Ny, Nz) -> coil k-space samples (C, P) for one frame of one slice.

    Immutable after construction. ``forward``/``adjoint`` take and return
    numpy arrays; ``forward_t``/``adjoint_t`` act on torch slice images with
    arbitrary leading batch dimensions and are differentiable.
    """

    def __init__(self, slice_index: int, points: np.ndarray, maps: np.ndarray, mode: str = "direct",
                 kernel_width: int = 6, oversamp: float = 1.25, dtype=torch.complex128):
        if maps.ndim != 4:
            raise GeometryError("coil maps must have shape (C, Nx, Ny, Nz)")
        if not 0 <= slice_index < maps.shape[3]:
            raise IndexError(f"slice {slice_index} outside coil maps with {maps.shape[3]} slices")
        if mode not in ("direct", "gridded"):
            raise ValueError(f"unknown transform mode {mode!r}")
        points = np.asarray(points, dtype=float)
        if points.ndim != 2 or points.shape[1] != 2:
            raise GeometryError("points must have shape (P, 2)")
        self.slice_index = slice_index
        self.mode = mode
        self.grid = tuple(maps.shape[1:])
        self.n_coils = maps.shape[0]
        self.points = points
        self.dtype = _to_complex_dtype(dtype)
        self.smaps = torch.as_tensor(maps[..., slice_index], dtype=self.dtype)
        nx, ny = self.grid[:2]
        if mode == "direct":
            self._ex = self._phase_matrix(points[:, 0], _centered(nx), nx)
            self._ey = self._phase_matrix(points[:, 1], _centered(ny), ny)
        else:
            self._setup_gridding(kernel_width, oversamp)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def out_shape(self) -> tuple[int, int]:
        return (self.n_coils, self.n_points)

    def _phase_matrix(self, k, r, n, sign=-1.0):
        return torch.as_tensor(np.exp(sign * 2j * np.pi * np.outer(k, r) / n), dtype=self.dtype)

    def _setup_gridding(self, width: int, oversamp: float):
        nx, ny = self.grid[:2]
        gx, gy = int(np.ceil(oversamp * nx)), int(np.ceil(oversamp * ny))
        beta = kb_beta(width, oversamp)
        self.gridded_shape = (gx, gy)
        rx, ry = _centered(nx), _centered(ny)
        deapod = 1.0 / np.outer(kb_transform(rx / gx, width, beta), kb_transform(ry / gy, width, beta))
        self._deapod = torch.as_tensor(deapod, dtype=self.dtype)
        # oversampled DFT matrices: grid frequency m <- centred pixel r
        self._fx = self._phase_matrix(np.arange(gx), rx, gx)
        self._fy = self._phase_matrix(np.arange(gy), ry, gy)

        def neighbours(k, n, g):
            u = k * g / n
            m = np.floor(u - width / 2.0)[:, None] + 1 + np.arange(width)[None, :]
            return np.mod(m, g).astype(np.int64), _kb(u[:, None] - m, width, beta)

        mx, wx = neighbours(self.points[:, 0], nx, gx)
        my, wy = neighbours(self.points[:, 1], ny, gy)
        idx = mx[:, :, None] * gy + my[:, None, :]
        wts = wx[:, :, None] * wy[:, None, :]
        self._idx = torch.as_tensor(idx.reshape(-1))
        self._wts = torch.as_tensor(wts.reshape(self.n_points, -1), dtype=self.dtype)

    # torch paths -------------------------------------------------------

    def forward_t(self, img: torch.Tensor) -> torch.Tensor:
        """(..., Nx, Ny) slice image -> (..., C, P)."""
        u = self.smaps * img.unsqueeze(-3)
        if self.mode == "direct":
            t = torch.einsum("px,...cxy->...cpy", self._ex, u)
            return (t * self._ey).sum(-1)
        g = self._fx @ (u * self._deapod) @ self._fy.T
        g = g.flatten(-2)
        vals = g[..., self._idx].reshape(*g.shape[:-1], self.n_points, -1)
        return (vals * self._wts).sum(-1)

    def adjoint_t(self, y: torch.Tensor) -> torch.Tensor:
        """(..., C, P) -> (..., Nx, Ny), the exact conjugate transpose of ``forward_t``."""
        if self.mode == "direct":
            v = self._ey.conj() * y.unsqueeze(-1)
            u = torch.einsum("px,...cpy->...cxy", self._ex.conj(), v)
        else:
            gx, gy = self.gridded_shape
            contrib = (y.unsqueeze(-1) * self._wts.conj()).flatten(-2)
            g = torch.zeros(*y.shape[:-1], gx * gy, dtype=contrib.dtype)
            g = g.index_add(-1, self._idx, contrib).reshape(*y.shape[:-1], gx, gy)
            u = (self._fx.conj().T @ g @ self._fy.conj()) * self._deapod.conj()
        return (self.smaps.conj() * u).sum(-3)

    # numpy surface -----------------------------------------------------

    def forward(self, x: np.ndarray) -> np.ndarray:
        if tuple(np.shape(x)) != self.grid:
            raise GeometryError(f"volume shape {np.shape(x)} does not match grid {self.grid}")
        img = torch.as_tensor(np.asarray(x)[..., self.slice_index], dtype=self.dtype)
        return self.forward_t(img).numpy()

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        if tuple(np.shape(y)) != self.out_shape:
            raise GeometryError(f"measurement shape {np.shape(y)} does not match {self.out_shape}")
        img = self.adjoint_t(torch.as_tensor(np.asarray(y), dtype=self.dtype)).numpy()
        out = np.zeros(self.grid, dtype=img.dtype)
        out[..., self.slice_index] = img
        return out

    def normal_kernel(self) -> np.ndarray:
        """FFT of the 2N-periodic point-spread kernel so that A^H A is a circular convolution.

        Only defined for the exact (direct) transform:
        ``K(d) = sum_p exp(+2 pi i k_p.d / N)`` for d in [-N, N).
        """
        nx, ny = self.grid[:2]
        dx = np.fft.fftfreq(2 * nx, 1.0 / (2 * nx))
        dy = np.fft.fftfreq(2 * ny, 1.0 / (2 * ny))
        ex = np.exp(2j * np.pi * np.outer(self.points[:, 0], dx) / nx)
        ey = np.exp(2j * np.pi * np.outer(self.points[:, 1], dy) / ny)
        return np.fft.fft2(ex.T @ ey)


def apply_normal(img: torch.Tensor, smaps: torch.Tensor, kernel_f: torch.Tensor) -> torch.Tensor:
    """A^H A img via the Toeplitz embedding; img (..., Nx, Ny), kernel_f (..., 2Nx, 2Ny)."""
    nx, ny = img.shape[-2:]
    u = smaps * img.unsqueeze(-3)
    uf = torch.fft.fft2(u, s=(2 * nx, 2 * ny))
    v = torch.fft.ifft2(uf * kernel_f.unsqueeze(-3))[..., :nx, :ny]
    return (smaps.conj() * v).sum(-3)


@dataclass
class KTSlice:
    """k-t measurements of one slice: data (F, C, P), trajectories (F, P, 2)."""

    slice_index: int
    data: np.ndarray
    trajectories: np.ndarray
    noise_sd: float = 0.0

    def __post_init__(self):
        if self.data.ndim != 3 or self.trajectories.ndim != 3:
            raise GeometryError("data must be (F, C, P) and trajectories (F, P, 2)")
        if self.data.shape[0] != self.trajectories.shape[0]:
            raise ConsistencyError("frame count differs between data and trajectories")
        if self.data.shape[2] != self.trajectories.shape[1]:
            raise ConsistencyError("point count differs between data and trajectories")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    def operator(self, t: int, maps: np.ndarray, mode: str = "direct", dtype=torch.complex128) -> EncodingOperator:
        return EncodingOperator(self.slice_index, self.trajectories[t], maps, mode=mode, dtype=dtype)


def complex_noise(rng: np.random.Generator, shape, sd: float) -> np.ndarray:
    return sd * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def acquire(truth: GroundTruth, maps: np.ndarray, trajectories: np.ndarray, noise_sd: float,
            seed: int, mode: str = "direct") -> list[KTSlice]:
    """Simulate b(t_z) = A_{t_z} x_truth(t_z) + n for every slice and frame.

    ``trajectories`` is (F, P, 2) and shared by all slices. Noise is i.i.d.
    complex Gaussian with per-component standard deviation ``noise_sd``,
    drawn from a stream seeded by (seed, slice).
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if truth.n_frames != trajectories.shape[0]:
        raise ConsistencyError(
            f"ground truth has {truth.n_frames} frames but {trajectories.shape[0]} trajectories were given")
    if maps.shape[3] != truth.n_slices:
        raise ConsistencyError("coil maps and ground truth disagree on the number of slices")
    out = []
    for z in range(truth.n_slices):
        data = np.empty((truth.n_frames, maps.shape[0], trajectories.shape[1]), dtype=np.complex128)
        for t in range(truth.n_frames):
            op = EncodingOperator(z, trajectories[t], maps, mode=mode)
            data[t] = op.forward(truth.volumes[z, t].astype(np.float64))
        if noise_sd > 0:
            rng = np.random.default_rng([seed, z])
            data = data + complex_noise(rng, data.shape, noise_sd)
        out.append(KTSlice(z, data, trajectories.copy(), noise_sd))
    return out
