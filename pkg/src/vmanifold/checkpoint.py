"""Checkpoints: every trainable tensor and Adam moment, stored in the raw array container."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .arrays import load_container, read_manifest, save_container
from .generator import ArchDescriptor, Generator
from .training import Adam, TrainState

CHECKPOINT_VERSION = 1


def save_checkpoint(directory, state: TrainState, seed: int) -> Path:
    """Write ``state`` to ``directory``. Contents depend only on the state, so reruns are byte-identical."""
    dtype = state.generator.dense.weight.dtype
    if dtype != torch.float32:
        raise TypeError("checkpoints store float32 models")
    arrays = {}
    for name, p in state.params().items():
        arrays[f"param.{name}"] = p.detach().numpy()
        if name in state.adam.m:
            arrays[f"adam_m.{name}"] = state.adam.m[name].numpy()
            arrays[f"adam_v.{name}"] = state.adam.v[name].numpy()
    arch = state.generator.arch
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": arch.to_dict(),
        "latent_dim": arch.latent_dim,
        "seed": seed,
        "iteration": state.iteration,
        "stage": state.stage,
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps, "t": dict(sorted(state.adam.t.items()))},
        "sigma2": state.sigma2,
        "lambda2": state.lambda2,
        "slice_ids": list(state.slice_ids),
    }
    return save_container(directory, arrays, meta=meta)


def load_checkpoint(directory) -> tuple[TrainState, dict]:
    """Inverse of :func:`save_checkpoint`; returns (state, metadata)."""
    meta = read_manifest(directory)["meta"]
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
    arrays = load_container(directory)
    a = dict(meta["arch"])
    arch = ArchDescriptor(out_shape=tuple(a.pop("out_shape")), channels=tuple(a.pop("channels")), **a)
    gen = Generator(arch, dtype=torch.float32).requires_grad_(False)
    tensors = gen.named_tensors()
    with torch.no_grad():
        for k, t in tensors.items():
            t.copy_(torch.from_numpy(arrays[f"param.gen.{k}"]))
    n_slices = len(meta["slice_ids"])
    mu = [torch.from_numpy(arrays[f"param.mu.{i}"]) for i in range(n_slices)]
    log_std = [torch.from_numpy(arrays[f"param.log_std.{i}"]) for i in range(n_slices)]
    ad = meta["adam"]
    adam = Adam(ad["lr"], ad["beta1"], ad["beta2"], ad["eps"])
    for name, t in ad["t"].items():
        adam.t[name] = int(t)
        adam.m[name] = torch.from_numpy(arrays[f"adam_m.{name}"])
        adam.v[name] = torch.from_numpy(arrays[f"adam_v.{name}"])
    state = TrainState(gen, mu, log_std, adam, tuple(meta["slice_ids"]), meta["sigma2"], meta["lambda2"],
                       iteration=meta["iteration"], stage=meta["stage"])
    return state, meta


def checkpoint_arrays(directory) -> dict[str, np.ndarray]:
    return load_container(directory)
