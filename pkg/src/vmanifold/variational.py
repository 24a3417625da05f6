"""Gaussian latent posteriors, reparameterized sampling and their penalties.

Posteriors are diagonal Gaussians stored as means and log standard
deviations, std = exp(log_std). The functions accept numpy arrays or torch
tensors; torch inputs stay differentiable.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

LOG_STD_MIN = -6.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -2.0
MU_INIT_SD = 0.1


def _xp(a):
    return torch if torch.is_tensor(a) else np


def sample_latent(mu, log_std, eps):
    """c = mu + exp(log_std) * eps, elementwise."""
    if np.shape(mu) != np.shape(log_std) or np.shape(mu) != np.shape(eps):
        raise ValueError(f"shape mismatch: mu {np.shape(mu)}, log_std {np.shape(log_std)}, eps {np.shape(eps)}")
    xp = _xp(log_std)
    return mu + xp.exp(log_std) * eps


def kl_gaussian(mu, log_std):
    """KL(N(mu, diag(exp(2 log_std))) || N(0, I)) summed over the last axis.

    0.5 * [-sum 2 l - n + sum exp(2 l) + mu.mu]
    """
    xp = _xp(mu)
    if xp is np:
        mu = np.asarray(mu, dtype=float)
        log_std = np.asarray(log_std, dtype=float)
        if np.isnan(mu).any() or np.isnan(log_std).any():
            raise FloatingPointError("NaN in posterior parameters")
    elif torch.isnan(mu).any() or torch.isnan(log_std).any():
        raise FloatingPointError("NaN in posterior parameters")
    n = mu.shape[-1]
    return 0.5 * ((-2.0 * log_std).sum(-1) - n + xp.exp(2.0 * log_std).sum(-1) + (mu * mu).sum(-1))


def kl_gaussian_grad(mu, log_std) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of ``kl_gaussian`` with respect to (mu, log_std)."""
    mu = np.asarray(mu, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    return mu.copy(), np.exp(2.0 * log_std) - 1.0


def temporal_penalty(track):
    """Sum of squared first differences along the frame axis (axis -2)."""
    if track.shape[-2] < 2:
        warnings.warn("temporal penalty needs at least two frames; returning 0", stacklevel=2)
        return 0.0 * track.sum()
    d = track[..., 1:, :] - track[..., :-1, :]
    return (d * d).sum()


def temporal_penalty_grad(track) -> np.ndarray:
    track = np.asarray(track, dtype=float)
    g = np.zeros_like(track)
    if track.shape[-2] < 2:
        return g
    d = track[..., 1:, :] - track[..., :-1, :]
    g[..., 1:, :] += 2.0 * d
    g[..., :-1, :] -= 2.0 * d
    return g


def log_q_minus_log_p(c, mu, log_std):
    """log q(c) - log p(c) for q = N(mu, diag std^2), p = N(0, I); the KL integrand."""
    std = np.exp(log_std)
    z = (c - mu) / std
    return (-0.5 * z**2 - log_std + 0.5 * c**2).sum(-1)


@dataclass
class LatentSchedule:
    """Per-slice posterior tracks: ``mu[z]`` and ``log_std[z]`` of shape (N_data_z, n)."""

    mu: list[np.ndarray]
    log_std: list[np.ndarray]

    def __post_init__(self):
        if len(self.mu) != len(self.log_std):
            raise ValueError("one log_std track per mean track required")
        for m, s in zip(self.mu, self.log_std):
            if m.shape != s.shape or m.ndim != 2:
                raise ValueError("mean and log_std tracks must share shape (N_data, n)")

    @property
    def latent_dim(self) -> int:
        return self.mu[0].shape[1]

    @property
    def n_slices(self) -> int:
        return len(self.mu)

    @classmethod
    def initial(cls, frames_per_slice, latent_dim: int, seed: int) -> "LatentSchedule":
        rng = np.random.default_rng([seed, 7919])
        mu = [MU_INIT_SD * rng.standard_normal((f, latent_dim)) for f in frames_per_slice]
        log_std = [np.full((f, latent_dim), LOG_STD_INIT) for f in frames_per_slice]
        return cls(mu, log_std)


def refine_track(track: np.ndarray, factor: int = 2) -> np.ndarray:
    """Linear interpolation of a (F, n) track onto ``factor * F`` frames.

    For factor 2, even rows copy the coarse values and odd rows are the
    mean of their two coarse neighbours (the last odd row repeats the end).
    """
    f = track.shape[0]
    src = np.arange(factor * f) / factor
    left = np.minimum(np.floor(src).astype(int), f - 1)
    right = np.minimum(left + 1, f - 1)
    w = (src - left)[:, None]
    return (1.0 - w) * track[left] + w * track[right]
