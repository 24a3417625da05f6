"""Experiment configuration: nested YAML sections validated against a fixed schema."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .generator import ArchDescriptor
from .phantom import Ellipsoid, PhantomConfig
from .sampling import AcquisitionSchedule
from .training import MODES, TrainConfig
from .training import ConfigError as _TrainConfigError

NUM = (int, float)
_OPT_NUM = (int, float, type(None))

# section -> key -> (accepted types, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "phantom": {
        "grid": (list, [64, 64, 4]),
        "fov_mm": (NUM, 320.0),
        "f_cardiac": (NUM, 1.25),
        "f_resp": (NUM, 0.25),
        "slice_offsets_s": ((list, type(None)), None),
        "slice_period_s": (NUM, 5.0),
        "slice_spacing_mm": (NUM, 10.0),
        "contraction": (NUM, 0.3),
        "cardiac_sway_vox": (NUM, 0.0),
        "resp_shift_vox": (NUM, 3.0),
        "resp_hysteresis_vox": (NUM, 0.0),
        "edge_vox": (NUM, 0.6),
        "structures": ((dict, type(None)), None),
    },
    "sampling": {
        "n_interleaves": (int, 480),
        "tr_s": (NUM, 0.0084),
        "spirals_per_frame": (int, 5),
        "navigator_every": (int, 6),
        "exclude_navigators": (bool, True),
        "readout_points": (int, 256),
        "turns": (NUM, 2.0),
        "trajectory": (str, "spiral"),
    },
    "encoding": {
        "n_coils": (int, 4),
        "noise_sd": (NUM, 0.25),
        "transform": (str, "direct"),
        "coil_map_slices": ((int, type(None)), None),
    },
    "generator": {
        "latent_dim": (int, 2),
        "base_channels": (int, 32),
        "channels": (list, [32, 32, 16, 16]),
        "negative_slope": (NUM, 0.1),
        "conv3d": (bool, False),
        "conv3d_features": (int, 4),
    },
    "train": {
        "mode": (str, "V-SToRM:MS"),
        "sigma2": (_OPT_NUM, None),
        "lambda1": (NUM, 1e-8),
        "lambda2": (_OPT_NUM, None),
        "l1_squared": (bool, True),
        "lr": (NUM, 1e-3),
        "lr_latent": (_OPT_NUM, None),
        "beta1": (NUM, 0.9),
        "beta2": (NUM, 0.999),
        "adam_eps": (NUM, 1e-8),
        "iterations": (int, 2000),
        "stages": (int, 3),
        "stage_split": (list, [0.4, 0.3, 0.3]),
        "batch": (int, 16),
        "dtype": (str, "float32"),
        "data_path": (str, "normal"),
        "zero_eps": (bool, False),
        "freeze_log_std": (bool, False),
        "checkpoint_every": (int, 0),
    },
    "evaluation": {
        "source_slice": (int, 1),
        "n_bins": (int, 16),
        "divergence_draws": (int, 16),
    },
}
TOP_LEVEL = {"output": ((str, type(None)), None), "seed": (int, 0)}


class ConfigError(_TrainConfigError):
    """Invalid experiment configuration; ``violations`` lists every problem with its key path."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


def _type_ok(value, types) -> bool:
    types = types if isinstance(types, tuple) else (types,)
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def defaults() -> dict:
    d = {sec: {k: copy.deepcopy(v[1]) for k, v in keys.items()} for sec, keys in SCHEMA.items()}
    d.update({k: v[1] for k, v in TOP_LEVEL.items()})
    return d


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output(self) -> str | None:
        return self.raw["output"]

    def phantom(self) -> PhantomConfig:
        p = dict(self.raw["phantom"])
        p["grid"] = tuple(p["grid"])
        if p["slice_offsets_s"] is not None:
            p["slice_offsets_s"] = tuple(float(x) for x in p["slice_offsets_s"])
        structs = p.pop("structures")
        if structs is not None:
            p["structures"] = {name: Ellipsoid(tuple(s["center_mm"]), tuple(s["radii_mm"]), float(s["intensity"]))
                               for name, s in structs.items()}
        return PhantomConfig(**p)

    def schedule(self) -> AcquisitionSchedule:
        return AcquisitionSchedule(**self.raw["sampling"])

    def arch(self) -> ArchDescriptor:
        g = dict(self.raw["generator"])
        g["channels"] = tuple(g["channels"])
        return ArchDescriptor(out_shape=tuple(self.raw["phantom"]["grid"]), **g)

    def train(self) -> TrainConfig:
        t = {k: v for k, v in self.raw["train"].items() if k != "checkpoint_every"}
        t["stage_split"] = tuple(t["stage_split"])
        return TrainConfig(seed=self.seed, **t)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def with_overrides(self, seed: int | None = None, mode: str | None = None,
                       output: str | None = None) -> "ExperimentConfig":
        raw = self.to_dict()
        if seed is not None:
            raw["seed"] = seed
        if mode is not None:
            raw["train"]["mode"] = mode
        if output is not None:
            raw["output"] = output
        return validate(raw)


def validate(data: dict) -> ExperimentConfig:
    """Merge ``data`` over the defaults and check every key; collects all violations."""
    if not isinstance(data, dict):
        raise ConfigError(["<root>: expected a mapping of sections"])
    problems: list[str] = []
    merged = defaults()
    for key, value in data.items():
        if key in SCHEMA:
            if not isinstance(value, dict):
                problems.append(f"{key}: expected a mapping")
                continue
            for k, v in value.items():
                if k not in SCHEMA[key]:
                    problems.append(f"{key}.{k}: unknown key")
                elif not _type_ok(v, SCHEMA[key][k][0]):
                    problems.append(f"{key}.{k}: expected {_tname(SCHEMA[key][k][0])}, got {type(v).__name__}")
                else:
                    merged[key][k] = float(v) if SCHEMA[key][k][0] in (NUM,) and isinstance(v, int) else v
        elif key in TOP_LEVEL:
            if not _type_ok(value, TOP_LEVEL[key][0]):
                problems.append(f"{key}: expected {_tname(TOP_LEVEL[key][0])}, got {type(value).__name__}")
            else:
                merged[key] = value
        else:
            problems.append(f"{key}: unknown key")
    if not problems:
        problems += _semantic_checks(merged)
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(merged)


def _tname(types) -> str:
    types = types if isinstance(types, tuple) else (types,)
    return " or ".join("null" if t is type(None) else t.__name__ for t in types)


def _semantic_checks(c: dict) -> list[str]:
    p = []
    grid = c["phantom"]["grid"]
    if len(grid) != 3 or not all(isinstance(g, int) and not isinstance(g, bool) for g in grid):
        p.append("phantom.grid: expected three integers")
        return p
    nz = grid[2]
    cms = c["encoding"]["coil_map_slices"]
    if cms is not None and cms != nz:
        p.append(f"encoding.coil_map_slices ({cms}) does not match phantom.grid[2] ({nz})")
    offs = c["phantom"]["slice_offsets_s"]
    if offs is not None and len(offs) != nz:
        p.append(f"phantom.slice_offsets_s has {len(offs)} entries but phantom.grid[2] is {nz}")
    if c["encoding"]["transform"] not in ("direct", "gridded"):
        p.append("encoding.transform: must be 'direct' or 'gridded'")
    if c["encoding"]["noise_sd"] < 0:
        p.append("encoding.noise_sd: must be >= 0")
    if c["encoding"]["n_coils"] < 1:
        p.append("encoding.n_coils: must be >= 1")
    if c["train"]["mode"] not in MODES:
        p.append(f"train.mode: must be one of {', '.join(MODES)}")
    if not 0 <= c["evaluation"]["source_slice"] < nz:
        p.append(f"evaluation.source_slice ({c['evaluation']['source_slice']}) outside phantom.grid[2] ({nz})")
    if c["train"]["checkpoint_every"] < 0:
        p.append("train.checkpoint_every: must be >= 0")
    for section, build in (("phantom", lambda e: e.phantom()), ("sampling", lambda e: e.schedule()),
                           ("generator", lambda e: e.arch()), ("train", lambda e: e.train())):
        try:
            build(ExperimentConfig(c))
        except (ValueError, TypeError) as exc:
            p.append(f"{section}: {exc}")
    if not p:
        sched = ExperimentConfig(c).schedule()
        try:
            frames = sched.binning().n_frames
        except ValueError as exc:
            p.append(f"sampling: {exc}")
        else:
            coarsest = 2 ** (c["train"]["stages"] - 1)
            if frames % coarsest or frames // coarsest < 2:
                p.append(f"train.stages: {frames} frames per slice cannot be binned {coarsest}x coarser "
                         "(sampling.n_interleaves too small)")
    return p


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: not valid YAML ({exc})"]) from exc
    return validate(data)


def shipped_config(name: str = "default") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.yaml"
