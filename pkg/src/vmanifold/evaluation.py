"""Reconstruction quality, latent-distribution agreement and phase alignment.

All metrics compare against the phantom ground truth, so both image
quality and cross-slice alignment are measured objectively.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .phantom import TWO_PI, GroundTruth, PhantomConfig, render_slice_dictionary
from .training import TrainState, decode_latents, decode_track

COV_REG = 1e-6
SAME_ATOM_TOL = 1e-9


def ser_db(recon, truth) -> float:
    """Signal-to-error ratio of magnitude images in dB; +inf when the error vanishes."""
    recon = np.abs(np.asarray(recon))
    truth = np.abs(np.asarray(truth))
    if recon.shape != truth.shape:
        raise ValueError(f"shape mismatch {recon.shape} vs {truth.shape}")
    sig = float(np.sum(truth**2))
    if sig == 0.0:
        raise ValueError("ground truth has zero norm")
    err = float(np.sum((recon - truth) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(sig / err)


def is_saturated(value: float) -> bool:
    return math.isinf(value)


def gaussian_kl(m0, s0, m1, s1) -> float:
    """KL(N(m0, s0) || N(m1, s1)) for full covariances."""
    m0, m1 = np.atleast_1d(m0).astype(float), np.atleast_1d(m1).astype(float)
    s0, s1 = np.atleast_2d(s0).astype(float), np.atleast_2d(s1).astype(float)
    k = m0.size
    l1 = np.linalg.cholesky(s1)
    inv_s1 = np.linalg.inv(s1)
    d = m1 - m0
    _, logdet0 = np.linalg.slogdet(s0)
    logdet1 = 2.0 * np.sum(np.log(np.diag(l1)))
    return 0.5 * (np.trace(inv_s1 @ s0) + d @ inv_s1 @ d - k + logdet1 - logdet0)


def symmetric_kl(m0, s0, m1, s1) -> float:
    return 0.5 * (gaussian_kl(m0, s0, m1, s1) + gaussian_kl(m1, s1, m0, s0))


def track_samples(mu, log_std=None, draws: int = 16, seed: int = 0) -> np.ndarray:
    """Latent samples pooled over frames: (draws * F, n). ``log_std=None`` means point masses."""
    mu = np.asarray(mu, dtype=float)
    if log_std is None:
        return mu.copy()
    eps = np.random.default_rng(seed).standard_normal((draws, *mu.shape))
    return (mu[None] + np.exp(np.asarray(log_std, dtype=float))[None] * eps).reshape(-1, mu.shape[-1])


def fit_gaussian(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = samples.mean(0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False)) + COV_REG * np.eye(samples.shape[1])
    return mean, cov


def latent_divergence(track_a, track_b, draws: int = 16, seed: int = 0) -> float:
    """Symmetric KL between Gaussians fitted to two slices' pooled latent samples.

    Each track is ``(mu, log_std)`` with arrays of shape (F, n); pass
    ``log_std=None`` for non-variational tracks.
    """
    sa = track_samples(*track_a, draws=draws, seed=seed)
    sb = track_samples(*track_b, draws=draws, seed=seed)
    if min(len(track_a[0]), len(track_b[0])) < 2:
        raise ValueError("need at least two frames per track")
    ma, ca = fit_gaussian(sa)
    mb, cb = fit_gaussian(sb)
    try:
        val = symmetric_kl(ma, ca, mb, cb)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError("degenerate latent covariance") from exc
    if not np.isfinite(val):
        raise FloatingPointError("degenerate latent covariance")
    return float(max(val, 0.0))


def cross_excite(state: TrainState, source_slice: int) -> np.ndarray:
    """Volume series (F_source, Nx, Ny, Nz) generated from one slice's mean latent track."""
    if source_slice not in state.slice_ids:
        raise IndexError(f"slice {source_slice} is not covered by this model")
    return decode_track(state, state.slice_ids.index(source_slice))


def circular_distance(a, b):
    d = np.mod(np.asarray(a) - np.asarray(b), TWO_PI)
    return np.minimum(d, TWO_PI - d)


class PhaseDictionary:
    """Rendered phantom slices on an n_bins x n_bins (cardiac, resp) phase grid."""

    def __init__(self, cfg: PhantomConfig, n_bins: int = 16):
        self.n_bins = n_bins
        self.bins, vols = render_slice_dictionary(cfg, n_bins)
        # (Nz, n_bins * n_bins, Nx * Ny), zero-mean unit-norm rows
        flat = np.moveaxis(vols, -1, 0).reshape(cfg.n_slices, n_bins * n_bins, -1)
        self.atoms = _normalise_rows(flat)
        # bins rendering the same image (e.g. phi and -phi of a pure contraction) cannot be told apart
        self.same = np.stack([a @ a.T > 1.0 - SAME_ATOM_TOL for a in self.atoms])

    def match_index(self, images: np.ndarray, z: int) -> np.ndarray:
        rows = _normalise_rows(np.abs(images).reshape(images.shape[0], -1))
        return np.argmax(rows @ self.atoms[z].T, axis=1)

    def match(self, images: np.ndarray, z: int) -> tuple[np.ndarray, np.ndarray]:
        """Best-matching (cardiac, resp) bin phases for magnitude images (F, Nx, Ny) of slice z."""
        best = self.match_index(images, z)
        return self.bins[best // self.n_bins], self.bins[best % self.n_bins]

    def errors(self, best: np.ndarray, z: int, ref_c, ref_r) -> tuple[np.ndarray, np.ndarray]:
        """Circular errors of matched bins against reference phases.

        Each error is taken to the nearest bin whose atom is identical to
        the matched one, so image-indistinguishable phases count as equal.
        """
        cls = self.same[z][best]  # (F, n_bins**2)
        c_all = np.repeat(self.bins, self.n_bins)
        r_all = np.tile(self.bins, self.n_bins)
        ec = np.where(cls, circular_distance(c_all[None], np.asarray(ref_c)[:, None]), np.inf).min(1)
        er = np.where(cls, circular_distance(r_all[None], np.asarray(ref_r)[:, None]), np.inf).min(1)
        return ec, er

    def quantise(self, phases) -> np.ndarray:
        step = TWO_PI / self.n_bins
        return self.bins[np.mod(np.round(np.asarray(phases) / step).astype(int), self.n_bins)]


def _normalise_rows(a):
    a = a - a.mean(-1, keepdims=True)
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(n == 0, 1.0, n)


def phase_alignment_error(series: np.ndarray, source_phases: np.ndarray, dictionary: PhaseDictionary) -> dict:
    """Per-slice circular phase errors of a cross-excited series.

    Each reconstructed slice is matched against the dictionary; the
    recovered bin phase is compared with the source frame's ground-truth
    phase quantised to the same bins (``cardiac``/``resp``) and with the
    exact phase (``*_raw``, floored by the half-bin quantisation). Phases
    whose rendered images coincide are treated as equivalent.
    """
    series = np.asarray(series)
    source_phases = np.asarray(source_phases)
    if source_phases.shape[0] != series.shape[0]:
        raise ValueError("missing ground-truth phases for some frames")
    ref_c = dictionary.quantise(source_phases[:, 0])
    ref_r = dictionary.quantise(source_phases[:, 1])
    out = []
    for z in range(series.shape[-1]):
        best = dictionary.match_index(series[..., z], z)
        ec, er = dictionary.errors(best, z, ref_c, ref_r)
        ec_raw, _ = dictionary.errors(best, z, source_phases[:, 0], source_phases[:, 1])
        out.append({
            "slice": z,
            "cardiac_mean": float(ec.mean()), "cardiac_p95": float(np.percentile(ec, 95)),
            "resp_mean": float(er.mean()), "resp_p95": float(np.percentile(er, 95)),
            "cardiac_raw_mean": float(ec_raw.mean()),
        })
    return {"per_slice": out}


@dataclass
class ReconReport:
    mode: str
    ser_db: list[float]
    divergence: list[list[float]]
    cross_ser: list[list[float]]  # [source][target]
    phase: dict = field(default_factory=dict)
    source_slice: int = 1

    @property
    def max_divergence(self) -> float:
        d = np.asarray(self.divergence)
        return float(d.max())

    def cross_drop(self, source: int | None = None) -> float:
        """Mean over targets of own-latent SER minus source-latent SER."""
        s = self.source_slice if source is None else source
        x = np.asarray(self.cross_ser)
        own = np.diag(x)
        return float(np.mean(own - x[s]))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "ser_db": self.ser_db, "divergence": self.divergence,
                "cross_ser": self.cross_ser, "phase": self.phase, "source_slice": self.source_slice,
                "max_divergence": self.max_divergence, "cross_drop": self.cross_drop()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_float)

    def to_text(self) -> str:
        nz = len(self.ser_db)
        lines = [f"mode {self.mode}", "", "slice  SER[dB]  flag"]
        for z, v in enumerate(self.ser_db):
            lines.append(f"{z:5d}  {v:7.3f}  {'saturated' if is_saturated(v) else 'ok'}")
        lines += ["", "latent divergence (symmetric KL)", "      " + " ".join(f"{j:8d}" for j in range(nz))]
        for i, row in enumerate(self.divergence):
            lines.append(f"{i:5d} " + " ".join(f"{v:8.4f}" for v in row))
        lines += ["", "cross-excitation SER[dB] (row: latent source, column: target slice)",
                  "      " + " ".join(f"{j:8d}" for j in range(nz))]
        for i, row in enumerate(self.cross_ser):
            lines.append(f"{i:5d} " + " ".join(f"{v:8.3f}" for v in row))
        lines.append(f"mean own-minus-slice{self.source_slice} SER drop: {self.cross_drop():.3f} dB")
        if self.phase:
            lines += ["", f"phase alignment, latents of slice {self.source_slice} (radians)",
                      "slice  cardiac_mean  cardiac_p95  resp_mean  resp_p95"]
            for p in self.phase["per_slice"]:
                lines.append(f"{p['slice']:5d}  {p['cardiac_mean']:12.4f}  {p['cardiac_p95']:11.4f}  "
                             f"{p['resp_mean']:9.4f}  {p['resp_p95']:8.4f}")
        return "\n".join(lines) + "\n"


def _json_float(v):
    return float(v)


def _state_for(states: list[TrainState], z: int) -> tuple[TrainState, int]:
    for st in states:
        if z in st.slice_ids:
            return st, st.slice_ids.index(z)
    raise IndexError(f"no model covers slice {z}")


def slice_track(states: list[TrainState], z: int, variational: bool):
    st, i = _state_for(states, z)
    mu = st.mu[i].detach().numpy().astype(float)
    ls = st.log_std[i].detach().numpy().astype(float) if variational else None
    return mu, ls


def evaluate(states: list[TrainState], truth: GroundTruth, phantom: PhantomConfig, mode: str,
             source_slice: int = 1, n_bins: int = 16, dictionary: PhaseDictionary | None = None,
             draws: int = 16) -> ReconReport:
    """Full report for trained model(s) covering every slice of ``truth``."""
    nz = truth.n_slices
    variational = mode.startswith("V-")
    cross = np.zeros((nz, nz))
    for s in range(nz):
        for z in range(nz):
            st, zl = _state_for(states, z)
            mu = slice_track(states, s, False)[0]
            series = decode_latents(st, mu)
            cross[s, z] = ser_db(series[..., zl], truth.volumes[s][..., z])
    tracks = [slice_track(states, z, variational) for z in range(nz)]
    div = np.zeros((nz, nz))
    for a in range(nz):
        for b in range(a + 1, nz):
            div[a, b] = div[b, a] = latent_divergence(tracks[a], tracks[b], draws=draws)
    phase = {}
    if len(states) == 1 and states[0].generator.arch.out_shape[2] == nz:
        dictionary = dictionary or PhaseDictionary(phantom, n_bins)
        series = cross_excite(states[0], source_slice)
        phase = phase_alignment_error(series, truth.phases[source_slice], dictionary)
    return ReconReport(mode, [float(cross[z, z]) for z in range(nz)], div.tolist(), cross.tolist(), phase,
                       source_slice)
