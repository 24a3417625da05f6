"""Joint optimisation of the shared generator and per-slice latent posteriors.

The multislice loss is

    sum_{z,t} ||A_{t_z} D(c(t_z)) - b(t_z)||^2 + sigma2 * KL(q(t_z) || N(0, I))
        + lambda1 * ||theta||_1^2 + lambda2 * sum_z ||grad_t mu(t_z)||^2

with c(t_z) drawn by reparameterization. Gradients come from torch
autograd; the optimiser is a plain Adam kept here so that moment buffers
can be carried across progressive stages and checkpointed.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .encoding import ConsistencyError, EncodingOperator, KTSlice, apply_normal
from .generator import ArchDescriptor, Generator, init_params, to_complex
from .variational import (LOG_STD_MAX, LOG_STD_MIN, LatentSchedule, kl_gaussian, refine_track,
                          temporal_penalty)

log = logging.getLogger(__name__)

MODES = ("V-SToRM:MS", "G-SToRM:MS", "V-SToRM:SS", "G-SToRM:SS")


class ConfigError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "V-SToRM:MS"
    sigma2: float | None = None  # None: 1e-3 * mean per-frame ||b||^2 / n
    lambda1: float = 1e-8
    lambda2: float | None = None  # None: 1e-2 * mean per-frame ||b||^2
    l1_squared: bool = True
    lr: float = 1e-3
    lr_latent: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 2000
    stages: int = 3
    stage_split: tuple[float, ...] = (0.4, 0.3, 0.3)
    batch: int = 16
    seed: int = 0
    dtype: str = "float32"
    data_path: str = "normal"
    zero_eps: bool = False
    freeze_log_std: bool = False

    def __post_init__(self):
        object.__setattr__(self, "stage_split", tuple(float(s) for s in self.stage_split))
        problems = self.violations()
        if problems:
            raise ConfigError("; ".join(problems))

    def violations(self) -> list[str]:
        p = []
        if self.mode not in MODES:
            p.append(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("sigma2", "lambda1", "lambda2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                p.append(f"{name} must be >= 0")
        if self.stages < 1:
            p.append("stages must be >= 1")
        if len(self.stage_split) != self.stages:
            p.append(f"stage_split needs {self.stages} entries")
        elif any(s <= 0 for s in self.stage_split):
            p.append("stage_split entries must be positive")
        if self.iterations < 0 or self.batch < 1:
            p.append("iterations must be >= 0 and batch >= 1")
        if self.dtype not in ("float32", "float64"):
            p.append("dtype must be float32 or float64")
        if self.data_path not in ("normal", "residual"):
            p.append("data_path must be 'normal' or 'residual'")
        return p

    @property
    def variational(self) -> bool:
        return self.mode.startswith("V-")

    @property
    def multislice(self) -> bool:
        return self.mode.endswith(":MS")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float32 if self.dtype == "float32" else torch.float64

    def stage_iterations(self) -> list[int]:
        w = np.asarray(self.stage_split) / sum(self.stage_split)
        its = [int(round(self.iterations * x)) for x in w[:-1]]
        return its + [self.iterations - sum(its)]


# ---------------------------------------------------------------------------
# measurement data prepared for the loss


class FrameData:
    """k-t data for a set of slices in the form the loss consumes.

    Always keeps the raw trajectories/measurements (residual path). For the
    normal path it also holds, per frame, the FFT of the Toeplitz kernel of
    A^H A, the back-projection A^H b and ||b||^2, so the data term
    ||A x - b||^2 = <x, A^H A x> - 2 Re<x, A^H b> + ||b||^2 needs no
    non-uniform transform at training time.
    """

    def __init__(self, kt: list[KTSlice], maps: np.ndarray, dtype=torch.float64, path: str = "normal",
                 _normal=None):
        self.kt = kt
        self.maps = maps  # (C, Nx, Ny, n_local_slices)
        self.path = path
        self.dtype = dtype
        self.cdtype = torch.complex64 if dtype == torch.float32 else torch.complex128
        if maps.shape[3] != len(kt):
            raise ConsistencyError("coil maps must have one slice per k-t slice")
        self.smaps = [torch.as_tensor(maps[..., z], dtype=self.cdtype) for z in range(len(kt))]
        if path == "normal":
            self._normal = _normal if _normal is not None else self._build_normal()

    @property
    def n_slices(self) -> int:
        return len(self.kt)

    @property
    def frames_per_slice(self) -> list[int]:
        return [k.n_frames for k in self.kt]

    def _build_normal(self):
        kern, ahb, bn = [], [], []
        for z, k in enumerate(self.kt):
            kz, az, bz = [], [], []
            for t in range(k.n_frames):
                op = EncodingOperator(z, k.trajectories[t], self.maps)
                kz.append(op.normal_kernel())
                az.append(op.adjoint(k.data[t])[..., z])
                bz.append(float(np.vdot(k.data[t], k.data[t]).real))
            kern.append(np.stack(kz))
            ahb.append(np.stack(az))
            bn.append(np.asarray(bz))
        return self._normal_tensors(kern, ahb, bn)

    def _normal_tensors(self, kern, ahb, bn):
        return ([torch.as_tensor(k, dtype=self.cdtype) for k in kern],
                [torch.as_tensor(a, dtype=self.cdtype) for a in ahb],
                [np.asarray(b, dtype=float) for b in bn],
                kern, ahb)

    def coarsen(self, factor: int) -> "FrameData":
        """Merge each run of ``factor`` consecutive frames into one frame."""
        if factor == 1:
            return self
        kt2 = []
        for k in self.kt:
            f = k.n_frames // factor
            if f < 2:
                raise ConfigError(f"only {k.n_frames} frames: cannot form 2 frames at coarseness {factor}")
            d = k.data[: f * factor].reshape(f, factor, *k.data.shape[1:])
            d = np.concatenate(list(np.moveaxis(d, 1, 0)), axis=-1)
            tr = k.trajectories[: f * factor].reshape(f, factor, *k.trajectories.shape[1:])
            tr = np.concatenate(list(np.moveaxis(tr, 1, 0)), axis=1)
            kt2.append(KTSlice(k.slice_index, d, tr, k.noise_sd))
        normal = None
        if self.path == "normal":
            _, _, bn, kern, ahb = self._normal
            f = [k.n_frames for k in kt2]
            kern2 = [kk[: n * factor].reshape(n, factor, *kk.shape[1:]).sum(1) for kk, n in zip(kern, f)]
            ahb2 = [a[: n * factor].reshape(n, factor, *a.shape[1:]).sum(1) for a, n in zip(ahb, f)]
            bn2 = [b[: n * factor].reshape(n, factor).sum(1) for b, n in zip(bn, f)]
            normal = self._normal_tensors(kern2, ahb2, bn2)
        return FrameData(kt2, self.maps, self.dtype, self.path, _normal=normal)

    def mean_frame_energy(self) -> float:
        return float(np.mean([np.vdot(k.data[t], k.data[t]).real
                              for k in self.kt for t in range(k.n_frames)]))

    def frame_loss(self, imgs: torch.Tensor, frames: list[tuple[int, int]]) -> torch.Tensor:
        """Sum over ``frames`` of ||A_{t_z} img - b(t_z)||^2; imgs (B, Nx, Ny) complex."""
        if self.path == "normal":
            kern, ahb, bn = self._normal[:3]
            total = imgs.real.new_zeros(())
            by_slice: dict[int, list[int]] = {}
            for i, (z, _) in enumerate(frames):
                by_slice.setdefault(z, []).append(i)
            for z, rows in by_slice.items():
                ts = [frames[i][1] for i in rows]
                x = imgs[rows]
                ax = apply_normal(x, self.smaps[z], kern[z][ts])
                quad = (x.conj() * ax).real.sum()
                cross = (x.conj() * ahb[z][ts]).real.sum()
                total = total + quad - 2.0 * cross + float(bn[z][ts].sum())
            return total
        total = imgs.real.new_zeros(())
        for i, (z, t) in enumerate(frames):
            op = EncodingOperator(z, self.kt[z].trajectories[t], self.maps, dtype=self.cdtype)
            r = op.forward_t(imgs[i]) - torch.as_tensor(self.kt[z].data[t], dtype=self.cdtype)
            total = total + (r.real**2 + r.imag**2).sum()
        return total

    def check_frames(self, frames):
        for z, t in frames:
            if not (0 <= z < self.n_slices and 0 <= t < self.kt[z].n_frames):
                raise ConsistencyError(f"frame (slice {z}, frame {t}) does not exist")


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with per-parameter step counters so moments can be reset individually."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.t: dict[str, int] = {}

    def reset(self, name: str):
        self.m.pop(name, None)
        self.v.pop(name, None)
        self.t.pop(name, None)

    @torch.no_grad()
    def step(self, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
             lr: dict[str, float] | None = None):
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = torch.zeros_like(p)
                self.v[name] = torch.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v = self.v[name].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            step = (lr or {}).get(name, self.lr)
            p.sub_(step * mhat / (vhat.sqrt() + self.eps))


# ---------------------------------------------------------------------------
# state


@dataclass
class TrainState:
    generator: Generator
    mu: list[torch.Tensor]
    log_std: list[torch.Tensor]
    adam: Adam
    slice_ids: tuple[int, ...]
    sigma2: float
    lambda2: float
    iteration: int = 0
    stage: int = 1
    history: list[dict] = field(default_factory=list)

    def latent_params(self) -> dict[str, torch.Tensor]:
        out = {f"mu.{i}": m for i, m in enumerate(self.mu)}
        out.update({f"log_std.{i}": s for i, s in enumerate(self.log_std)})
        return out

    def params(self) -> dict[str, torch.Tensor]:
        out = {f"gen.{k}": v for k, v in self.generator.named_tensors().items()}
        out.update(self.latent_params())
        return out

    def schedule(self) -> LatentSchedule:
        return LatentSchedule([m.detach().numpy().astype(float) for m in self.mu],
                              [s.detach().numpy().astype(float) for s in self.log_std])

    def frames(self) -> list[tuple[int, int]]:
        return [(z, t) for z, m in enumerate(self.mu) for t in range(m.shape[0])]


def new_state(data: FrameData, arch: ArchDescriptor, cfg: TrainConfig, slice_ids,
              energy: float | None = None) -> TrainState:
    """Fresh state; default penalty weights scale with the mean per-frame ||b||^2 (``energy``)."""
    if arch.out_shape[2] != data.n_slices:
        raise ConfigError(f"generator emits {arch.out_shape[2]} slices but data has {data.n_slices}")
    gen = init_params(arch, cfg.seed, dtype=cfg.torch_dtype)
    gen.requires_grad_(False)  # gradients are requested per step
    sched = LatentSchedule.initial(data.frames_per_slice, arch.latent_dim, cfg.seed)
    scale = data.mean_frame_energy() if energy is None else energy
    sigma2 = cfg.sigma2 if cfg.sigma2 is not None else 1e-3 * scale / arch.latent_dim
    lambda2 = cfg.lambda2 if cfg.lambda2 is not None else 1e-2 * scale
    as_t = lambda a: torch.as_tensor(a, dtype=cfg.torch_dtype).clone()
    return TrainState(gen, [as_t(m) for m in sched.mu], [as_t(s) for s in sched.log_std],
                      Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps), tuple(slice_ids), sigma2, lambda2)


# ---------------------------------------------------------------------------
# loss


def theta_l1(gen: Generator) -> torch.Tensor:
    return sum(p.abs().sum() for p in gen.parameters())


def _latents(state: TrainState, frames, eps, cfg: TrainConfig):
    mu = torch.stack([state.mu[z][t] for z, t in frames])
    ls = torch.stack([state.log_std[z][t] for z, t in frames])
    if not cfg.variational:
        return mu, mu, ls
    eps_t = torch.as_tensor(np.asarray(eps), dtype=mu.dtype)
    return mu + torch.exp(ls) * eps_t, mu, ls


def data_term(state: TrainState, data: FrameData, frames, eps, cfg: TrainConfig) -> torch.Tensor:
    """Single-sample estimate of sum ||A D(c) - b||^2 over ``frames``."""
    data.check_frames(frames)
    c, _, _ = _latents(state, frames, eps, cfg)
    vols = to_complex(state.generator(c))
    imgs = torch.stack([vols[i, :, :, z] for i, (z, _) in enumerate(frames)])
    return data.frame_loss(imgs, frames)


def total_loss(state: TrainState, data: FrameData, frames, eps, cfg: TrainConfig):
    """Returns (total, breakdown) with breakdown floats for data, kl, l1, smooth.

    ``data`` and ``kl`` in the breakdown are minibatch sums; ``total`` scales
    them by (frames in the model) / (frames in the batch).
    """
    data.check_frames(frames)
    c, mu, ls = _latents(state, frames, eps, cfg)
    vols = to_complex(state.generator(c))
    imgs = torch.stack([vols[i, :, :, z] for i, (z, _) in enumerate(frames)])
    d = data.frame_loss(imgs, frames)
    kl = kl_gaussian(mu, ls).sum() if cfg.variational else d.new_zeros(())
    l1 = theta_l1(state.generator)
    l1 = l1 * l1 if cfg.l1_squared else l1
    smooth = sum(temporal_penalty(m) for m in state.mu)
    # per-frame terms are rescaled so a minibatch is an unbiased estimate of the full-sum loss
    scale = sum(m.shape[0] for m in state.mu) / len(frames)
    total = scale * (d + state.sigma2 * kl) + cfg.lambda1 * l1 + state.lambda2 * smooth
    parts = {k: float(v.detach()) if torch.is_tensor(v) else float(v)
             for k, v in (("total", total), ("data", d), ("kl", kl), ("l1", l1), ("smooth", smooth))}
    return total, parts


# ---------------------------------------------------------------------------
# optimisation


def draw_batch(state: TrainState, cfg: TrainConfig, batch: int):
    """Frame minibatch and eps draws for the current iteration.

    The minibatch stream is seeded by (seed, iteration); each frame's eps by
    (seed, iteration, slice, frame), so results do not depend on batch order.
    """
    frames = state.frames()
    rng = np.random.default_rng([cfg.seed, state.iteration, 0])
    if batch >= len(frames):
        pick = np.arange(len(frames))
    else:
        pick = np.sort(rng.choice(len(frames), size=batch, replace=False))
    chosen = [frames[i] for i in pick]
    n = state.mu[0].shape[1]
    if cfg.zero_eps or not cfg.variational:
        eps = np.zeros((len(chosen), n))
    else:
        eps = np.stack([np.random.default_rng([cfg.seed, state.iteration, 1, z, t]).standard_normal(n)
                        for z, t in chosen])
    return chosen, eps


def trainable(state: TrainState, cfg: TrainConfig) -> dict[str, torch.Tensor]:
    p = state.params()
    if not cfg.variational or cfg.freeze_log_std:
        p = {k: v for k, v in p.items() if not k.startswith("log_std.")}
    return p


def train_step(state: TrainState, data: FrameData, cfg: TrainConfig, batch: int | None = None) -> TrainState:
    frames, eps = draw_batch(state, cfg, batch or cfg.batch)
    params = trainable(state, cfg)
    for p in params.values():
        p.requires_grad_(True)
    total, parts = total_loss(state, data, frames, eps, cfg)
    if not np.isfinite(parts["total"]):
        raise NumericError(f"non-finite loss at iteration {state.iteration}: {parts}")
    grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
    grads = {k: (g if g is not None else torch.zeros_like(params[k])) for k, g in zip(params, grads)}
    for p in params.values():
        p.requires_grad_(False)
    lr_lat = cfg.lr_latent if cfg.lr_latent is not None else cfg.lr
    lrs = {k: lr_lat for k in params if not k.startswith("gen.")}
    state.adam.step(params, grads, lrs)
    with torch.no_grad():
        for s in state.log_std:
            s.clamp_(LOG_STD_MIN, LOG_STD_MAX)
    state.history.append({"iteration": state.iteration, "stage": state.stage, **parts})
    state.iteration += 1
    return state


def _refine_state(state: TrainState, cfg: TrainConfig):
    for lst, prefix in ((state.mu, "mu"), (state.log_std, "log_std")):
        for i, m in enumerate(lst):
            lst[i] = torch.as_tensor(refine_track(m.detach().numpy()), dtype=m.dtype)
            state.adam.reset(f"{prefix}.{i}")


def progressive_train(kt: list[KTSlice], maps: np.ndarray, arch: ArchDescriptor, cfg: TrainConfig,
                      slice_ids=None, callback=None) -> TrainState:
    """Coarse-to-fine training: stage s bins frames 2**(S-s) times coarser.

    Latent tracks are interpolated onto the finer frame grid between
    stages; generator weights and their Adam moments carry over.
    """
    slice_ids = tuple(range(len(kt))) if slice_ids is None else tuple(slice_ids)
    full = FrameData(kt, maps, cfg.torch_dtype, cfg.data_path)
    coarsest = 2 ** (cfg.stages - 1)
    for k in kt:
        if k.n_frames % coarsest or k.n_frames // coarsest < 2:
            raise ConfigError(f"{k.n_frames} frames cannot be binned {coarsest}x coarser into >= 2 whole frames")
    stage_data = [full.coarsen(2 ** (cfg.stages - s)) for s in range(1, cfg.stages + 1)]
    # penalty weights are fixed from the full-resolution data
    state = new_state(stage_data[0], arch, cfg, slice_ids, energy=full.mean_frame_energy())
    for s, (data, its) in enumerate(zip(stage_data, cfg.stage_iterations()), start=1):
        if s > 1:
            _refine_state(state, cfg)
        state.stage = s
        for _ in range(its):
            train_step(state, data, cfg)
            if callback is not None:
                callback(state)
    return state


def train_model(kt: list[KTSlice], maps: np.ndarray, arch: ArchDescriptor, cfg: TrainConfig,
                callback=None) -> list[TrainState]:
    """Train according to ``cfg.mode``.

    Multislice modes return one state covering all slices. Single-slice
    modes train an independent one-slice generator per slice on that
    slice's data only, with a per-step batch of ``batch // Nz`` frames so
    each slice sees the same number of frame visits as in multislice
    training.
    """
    if cfg.multislice:
        return [progressive_train(kt, maps, arch, cfg, callback=callback)]
    nz = len(kt)
    arch1 = replace(arch, out_shape=(*arch.out_shape[:2], 1))
    states = []
    for z, k in enumerate(kt):
        local = KTSlice(0, k.data, k.trajectories, k.noise_sd)
        cfg_z = replace(cfg, batch=max(1, cfg.batch // nz))
        st = progressive_train([local], maps[..., z:z + 1], arch1, cfg_z, slice_ids=(z,), callback=callback)
        states.append(st)
    return states


def decode_latents(state: TrainState, c) -> np.ndarray:
    """Complex volumes (B, Nx, Ny, Nz_out) for latents (B, n)."""
    with torch.no_grad():
        c = torch.as_tensor(np.asarray(c), dtype=state.generator.dense.weight.dtype)
        return to_complex(state.generator(c)).numpy()


def decode_track(state: TrainState, local_slice: int, eps=None) -> np.ndarray:
    """Volumes (F, Nx, Ny, Nz_out) generated from a slice's mean track (plus optional eps)."""
    mu = state.mu[local_slice].detach().numpy()
    if eps is not None:
        mu = mu + np.exp(state.log_std[local_slice].detach().numpy()) * eps
    return decode_latents(state, mu)


def loss_table(history: list[dict]) -> str:
    lines = ["# iteration stage total data kl l1 smooth"]
    for h in history:
        lines.append(f"{h['iteration']} {h['stage']} {h['total']:.9e} {h['data']:.9e} {h['kl']:.9e} "
                     f"{h['l1']:.9e} {h['smooth']:.9e}")
    return "\n".join(lines) + "\n"


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["stage_split"] = list(cfg.stage_split)
    return d
