"""Convolutional volume generator shared by every slice and frame.

A latent vector c of dimension n is mapped by a dense layer to a small
feature map, upsampled through nearest-neighbour + 3x3 conv + leaky-ReLU
stages, and projected by a 1x1 conv to 2*Nz channels that are read as the
real and imaginary parts of an (Nx, Ny, Nz) volume.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    out_shape: tuple[int, int, int]
    latent_dim: int = 2
    base_channels: int = 32
    channels: tuple[int, ...] = (32, 32, 16, 16)
    negative_slope: float = 0.1
    conv3d: bool = False
    conv3d_features: int = 4

    def __post_init__(self):
        object.__setattr__(self, "out_shape", tuple(int(s) for s in self.out_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        problems = []
        if len(self.out_shape) != 3 or min(self.out_shape) < 1:
            problems.append(f"out_shape must be three positive ints, got {self.out_shape}")
        if self.latent_dim < 1:
            problems.append("latent_dim must be >= 1")
        if self.base_channels < 1 or any(c < 1 for c in self.channels):
            problems.append("channel widths must be positive")
        if self.channels and not problems:
            f = 2 ** len(self.channels)
            nx, ny, _ = self.out_shape
            if nx % f or ny % f:
                problems.append(f"in-plane size {nx}x{ny} is not divisible by 2**{len(self.channels)}")
        if self.conv3d and not self.channels:
            problems.append("conv3d variant needs at least one upsampling stage")
        if problems:
            raise ArchitectureError("; ".join(problems))

    @property
    def base_shape(self) -> tuple[int, int]:
        f = 2 ** len(self.channels)
        return self.out_shape[0] // f, self.out_shape[1] // f

    def to_dict(self) -> dict:
        d = asdict(self)
        d["out_shape"] = list(self.out_shape)
        d["channels"] = list(self.channels)
        return d


def param_count(arch: ArchDescriptor) -> int:
    """Number of scalar parameters implied by the descriptor."""
    nx, ny, nz = arch.out_shape
    n = arch.latent_dim
    if not arch.channels:
        out = 2 * nz * nx * ny
        return n * out + out
    bx, by = arch.base_shape
    dense_out = arch.base_channels * bx * by
    total = n * dense_out + dense_out
    cin = arch.base_channels
    for c in arch.channels:
        total += cin * c * 9 + c
        cin = c
    if arch.conv3d:
        f = arch.conv3d_features
        total += cin * f * nz + f * nz
        total += f * 2 * 27 + 2
    else:
        total += cin * 2 * nz + 2 * nz
    return total


class Generator(nn.Module):
    """D_theta: (B, n) latents -> (B, 2, Nx, Ny, Nz) real/imag volumes."""

    def __init__(self, arch: ArchDescriptor, dtype=torch.float64):
        super().__init__()
        self.arch = arch
        nx, ny, nz = arch.out_shape
        if not arch.channels:
            self.dense = nn.Linear(arch.latent_dim, 2 * nz * nx * ny, dtype=dtype)
            self.stages = nn.ModuleList()
            self.head = None
            self.head3d = None
            return
        bx, by = arch.base_shape
        self.dense = nn.Linear(arch.latent_dim, arch.base_channels * bx * by, dtype=dtype)
        self.stages = nn.ModuleList()
        cin = arch.base_channels
        for c in arch.channels:
            self.stages.append(nn.Conv2d(cin, c, 3, padding=1, dtype=dtype))
            cin = c
        if arch.conv3d:
            self.head = nn.Conv2d(cin, arch.conv3d_features * nz, 1, dtype=dtype)
            self.head3d = nn.Conv3d(arch.conv3d_features, 2, 3, padding=1, dtype=dtype)
        else:
            self.head = nn.Conv2d(cin, 2 * nz, 1, dtype=dtype)
            self.head3d = None

    def forward(self, c: torch.Tensor) -> torch.Tensor:
        arch = self.arch
        nx, ny, nz = arch.out_shape
        b = c.shape[0]
        h = self.dense(c)
        if not arch.channels:
            return h.reshape(b, 2, nz, nx, ny).permute(0, 1, 3, 4, 2)
        h = h.reshape(b, arch.base_channels, *arch.base_shape)
        for conv in self.stages:
            h = nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            h = nn.functional.leaky_relu(conv(h), arch.negative_slope)
        h = self.head(h)
        if self.head3d is not None:
            h = self.head3d(h.reshape(b, arch.conv3d_features, nz, nx, ny))
        else:
            h = h.reshape(b, 2, nz, nx, ny)
        return h.permute(0, 1, 3, 4, 2)

    def layers(self) -> list[nn.Module]:
        mods = [self.dense, *self.stages]
        if self.head is not None:
            mods.append(self.head)
        if self.head3d is not None:
            mods.append(self.head3d)
        return mods

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """Parameters keyed ``layer{i}.weight`` / ``layer{i}.bias`` in network order."""
        out = {}
        for i, layer in enumerate(self.layers()):
            out[f"layer{i}.weight"] = layer.weight
            out[f"layer{i}.bias"] = layer.bias
        return out


GeneratorParams = Generator


def init_params(arch: ArchDescriptor, seed: int, dtype=torch.float64) -> Generator:
    """Fan-in scaled Gaussian weights, zero biases, reproducible from ``seed``."""
    if not isinstance(arch, ArchDescriptor):
        raise ArchitectureError("init_params expects an ArchDescriptor")
    gen = Generator(arch, dtype=dtype)
    rng = torch.Generator().manual_seed(int(seed))
    layers = gen.layers()
    stages = set(gen.stages)
    relu_gain = np.sqrt(2.0 / (1.0 + arch.negative_slope**2))
    with torch.no_grad():
        for i, layer in enumerate(layers):
            w = layer.weight
            fan_in = w[0].numel() if w.ndim > 1 else 1
            if isinstance(layer, nn.Linear):
                fan_in = w.shape[1]
            gain = relu_gain if layer in stages else 1.0
            w.copy_(torch.randn(w.shape, generator=rng, dtype=w.dtype) * (gain / np.sqrt(fan_in)))
            layer.bias.zero_()
    return gen


def as_latent(params: Generator, c) -> torch.Tensor:
    dtype = params.dense.weight.dtype
    c = torch.as_tensor(np.asarray(c) if not torch.is_tensor(c) else c, dtype=dtype)
    if c.shape[-1] != params.arch.latent_dim:
        raise ValueError(f"latent dimension {c.shape[-1]} != {params.arch.latent_dim}")
    return c


def to_complex(out: torch.Tensor) -> torch.Tensor:
    """(..., 2, Nx, Ny, Nz) real channels -> (..., Nx, Ny, Nz) complex."""
    return torch.complex(out[..., 0, :, :, :], out[..., 1, :, :, :])


def decode(params: Generator, c) -> np.ndarray:
    """Complex volume(s) for latent(s) c of shape (n,) or (B, n)."""
    c = as_latent(params, c)
    single = c.ndim == 1
    with torch.no_grad():
        vol = to_complex(params(c.reshape(-1, c.shape[-1]))).numpy()
    return vol[0] if single else vol


def decode_grad(params: Generator, c, cotangent) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of Re<cotangent, decode(c)> with respect to theta and c.

    ``cotangent`` is complex with the volume shape (or real with a leading
    re/im axis of size 2); the inner product is the real one over the two
    channels.
    """
    c = as_latent(params, c).clone().requires_grad_(True)
    nx, ny, nz = params.arch.out_shape
    cot = np.asarray(cotangent)
    if np.iscomplexobj(cot):
        cot = np.stack([cot.real, cot.imag], axis=-4)
    expected = (*c.shape[:-1], 2, nx, ny, nz)
    if cot.shape != expected:
        raise ValueError(f"cotangent shape {cotangent.shape} does not match output {expected}")
    cot_t = torch.as_tensor(cot, dtype=c.dtype)
    out = params(c.reshape(-1, c.shape[-1])).reshape(expected)
    tensors = params.named_tensors()
    grads = torch.autograd.grad((out * cot_t).sum(), [*tensors.values(), c], allow_unused=True)
    g_theta = {k: (g if g is not None else torch.zeros_like(t)).detach().numpy()
               for (k, t), g in zip(tensors.items(), grads[:-1])}
    g_c = grads[-1]
    g_c = torch.zeros_like(c) if g_c is None else g_c
    return g_theta, g_c.detach().numpy()
