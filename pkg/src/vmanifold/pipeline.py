"""Pipeline stages: simulate -> train -> reconstruct -> evaluate -> export-frames / report.

Output layout under the run directory::

    simulate/        truth/ (volumes, phases, frame_times), kt/ (data, trajectories with density weights, maps)
    train/<mode>/    checkpoint/ or checkpoint_slice<z>/, losses.tsv
    reconstruct/<mode>/  series/ (cross-excited volumes per latent source slice)
    evaluate/<mode>/ report.json, report.txt
    frames/<mode>/   PNG montages
    report/          summary.md, latent plots

Every stage directory also gets ``run.json`` (config copy, seed, version).
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import __version__
from .arrays import load_container, save_container
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, validate
from .encoding import KTSlice, acquire, make_coil_maps
from .evaluation import PhaseDictionary, ReconReport, evaluate, slice_track
from .phantom import GroundTruth, simulate_series
from .training import TrainState, decode_latents, loss_table, train_model

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "train", "reconstruct", "evaluate", "export-frames", "report")


class DependencyError(RuntimeError):
    """An upstream artifact needed by a stage is missing."""


def mode_dir(mode: str) -> str:
    return mode.replace(":", "_")


def write_run_record(directory: Path, cfg: ExperimentConfig, stage: str):
    directory.mkdir(parents=True, exist_ok=True)
    rec = {"stage": stage, "seed": cfg.seed, "version": __version__, "config": cfg.to_dict()}
    (directory / "run.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _require(path: Path, what: str) -> Path:
    if not (path / "manifest.json").exists() and not path.is_file():
        raise DependencyError(f"missing {what}: {path} (run the upstream stage first)")
    return path


# ---------------------------------------------------------------------------
# simulate


def simulate(cfg: ExperimentConfig, out: Path) -> Path:
    d = out / "simulate"
    phantom, sched = cfg.phantom(), cfg.schedule()
    truth = simulate_series(phantom, sched)
    enc = cfg.raw["encoding"]
    maps = make_coil_maps(phantom.grid, n_coils=enc["n_coils"])
    pts, weights = sched.frame_trajectories(phantom.grid[0])
    kt = acquire(truth, maps, pts, enc["noise_sd"], cfg.seed, mode=enc["transform"])
    save_container(d / "truth", {"volumes": truth.volumes, "phases": truth.phases,
                                 "frame_times": truth.frame_times},
                   axes={"volumes": "slice,frame,x,y,z", "phases": "slice,frame,cardiac|resp",
                         "frame_times": "frame"})
    save_container(d / "kt", {"data": np.stack([k.data for k in kt]),
                              "trajectories": np.concatenate([pts, weights[..., None]], axis=-1),
                              "maps": maps},
                   axes={"data": "slice,frame,coil,point", "trajectories": "frame,point,kx|ky|weight",
                         "maps": "coil,x,y,z"},
                   meta={"noise_sd": enc["noise_sd"]})
    write_run_record(d, cfg, "simulate")
    return d


def load_truth(out: Path) -> GroundTruth:
    a = load_container(_require(out / "simulate" / "truth", "ground truth container"))
    return GroundTruth(a["phases"].astype(float), a["volumes"], a["frame_times"].astype(float))


def load_kt(out: Path) -> tuple[list[KTSlice], np.ndarray]:
    path = _require(out / "simulate" / "kt", "k-t container")
    a = load_container(path)
    noise = json.loads((path / "manifest.json").read_text())["meta"]["noise_sd"]
    data = a["data"].astype(np.complex128)
    traj = a["trajectories"][..., :2].astype(np.float64)
    kt = [KTSlice(z, data[z], traj.copy(), noise) for z in range(data.shape[0])]
    return kt, a["maps"].astype(np.complex128)


# ---------------------------------------------------------------------------
# train


def train(cfg: ExperimentConfig, out: Path) -> Path:
    kt, maps = load_kt(out)
    tc = cfg.train()
    d = out / "train" / mode_dir(tc.mode)
    every = cfg.raw["train"]["checkpoint_every"]

    def callback(state: TrainState):
        if every and state.iteration % every == 0:
            log.info("iteration %d loss %.6e", state.iteration, state.history[-1]["total"])

    states = train_model(kt, maps, cfg.arch(), tc, callback=callback)
    for st in states:
        save_checkpoint(d / _ckpt_name(st, tc.multislice), st, cfg.seed)
    (d / "losses.tsv").write_text("".join(
        f"# model {i} slices {list(st.slice_ids)}\n" + loss_table(st.history) for i, st in enumerate(states)))
    write_run_record(d, cfg, "train")
    return d


def _ckpt_name(state: TrainState, multislice: bool) -> str:
    return "checkpoint" if multislice else f"checkpoint_slice{state.slice_ids[0]}"


def load_states(cfg: ExperimentConfig, out: Path) -> list[TrainState]:
    tc = cfg.train()
    d = out / "train" / mode_dir(tc.mode)
    if tc.multislice:
        names = ["checkpoint"]
    else:
        names = [f"checkpoint_slice{z}" for z in range(cfg.phantom().n_slices)]
    return [load_checkpoint(_require(d / n, f"{tc.mode} checkpoint"))[0] for n in names]


# ---------------------------------------------------------------------------
# reconstruct / evaluate


def reconstruct(cfg: ExperimentConfig, out: Path) -> Path:
    """Cross-excited series: volumes decoded from each slice's mean latent track."""
    states = load_states(cfg, out)
    mode = cfg.train().mode
    nz = cfg.phantom().n_slices
    series = []
    for s in range(nz):
        mu = slice_track(states, s, False)[0]
        vols = np.stack([_decode_all_slices(states, mu, z) for z in range(nz)], axis=-1)
        series.append(vols)
    d = out / "reconstruct" / mode_dir(mode)
    save_container(d / "series", {"series": np.stack(series).astype(np.complex64)},
                   axes={"series": "source_slice,frame,x,y,z"})
    write_run_record(d, cfg, "reconstruct")
    return d


def _decode_all_slices(states: list[TrainState], mu: np.ndarray, z: int) -> np.ndarray:
    for st in states:
        if z in st.slice_ids:
            return decode_latents(st, mu)[..., st.slice_ids.index(z)]
    raise IndexError(z)


def run_evaluate(cfg: ExperimentConfig, out: Path) -> Path:
    states = load_states(cfg, out)
    truth = load_truth(out)
    ev = cfg.raw["evaluation"]
    mode = cfg.train().mode
    phantom = cfg.phantom()
    rep = evaluate(states, truth, phantom, mode, source_slice=ev["source_slice"], n_bins=ev["n_bins"],
                   dictionary=PhaseDictionary(phantom, ev["n_bins"]), draws=ev["divergence_draws"])
    d = out / "evaluate" / mode_dir(mode)
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(rep.to_json() + "\n")
    (d / "report.txt").write_text(rep.to_text())
    write_run_record(d, cfg, "evaluate")
    return d


def load_report(out: Path, mode: str) -> ReconReport:
    p = out / "evaluate" / mode_dir(mode) / "report.json"
    if not p.exists():
        raise DependencyError(f"missing evaluation report: {p}")
    r = json.loads(p.read_text())
    return ReconReport(r["mode"], r["ser_db"], r["divergence"], r["cross_ser"], r["phase"], r["source_slice"])


# ---------------------------------------------------------------------------
# figures


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def export_frames(cfg: ExperimentConfig, out: Path, n_frames: int = 8) -> Path:
    """Montage per latent source slice: rows are slices, columns evenly spaced frames."""
    mode = cfg.train().mode
    path = _require(out / "reconstruct" / mode_dir(mode) / "series", "reconstructed series")
    series = np.abs(load_container(path)["series"])
    plt = _plt()
    d = out / "frames" / mode_dir(mode)
    d.mkdir(parents=True, exist_ok=True)
    nz, nf = series.shape[0], series.shape[1]
    cols = np.linspace(0, nf - 1, min(n_frames, nf)).round().astype(int)
    vmax = float(series.max()) or 1.0
    for s in range(nz):
        fig, axes = plt.subplots(nz, len(cols), figsize=(1.2 * len(cols), 1.2 * nz), squeeze=False)
        for z in range(nz):
            for j, t in enumerate(cols):
                ax = axes[z, j]
                ax.imshow(series[s, t, :, :, z].T, cmap="gray", vmin=0, vmax=vmax, origin="lower")
                ax.set_xticks([])
                ax.set_yticks([])
                if z == 0:
                    ax.set_title(f"t{t}", fontsize=7)
            axes[z, 0].set_ylabel(f"z{z}", fontsize=7)
        fig.suptitle(f"{mode}: latents of slice {s}", fontsize=8)
        fig.savefig(d / f"source{s}.png", dpi=80, metadata={"Software": None})
        plt.close(fig)
    write_run_record(d, cfg, "export-frames")
    return d


def report(cfg: ExperimentConfig, out: Path) -> Path:
    """Summary table over every evaluated mode plus latent scatter and time-course plots."""
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    ev_root = out / "evaluate"
    modes = sorted(p.name for p in ev_root.iterdir() if (p / "report.json").exists()) if ev_root.exists() else []
    if not modes:
        raise DependencyError(f"missing evaluation reports under {ev_root}")
    lines = ["| mode | mean SER [dB] | max divergence | cross drop [dB] | max cardiac err [rad] |",
             "|---|---|---|---|---|"]
    for m in modes:
        r = json.loads((ev_root / m / "report.json").read_text())
        rep = ReconReport(r["mode"], r["ser_db"], r["divergence"], r["cross_ser"], r["phase"], r["source_slice"])
        card = max((p["cardiac_mean"] for p in rep.phase.get("per_slice", [])), default=float("nan"))
        lines.append(f"| {rep.mode} | {np.mean(rep.ser_db):.3f} | {rep.max_divergence:.4f} | "
                     f"{rep.cross_drop():.3f} | {card:.4f} |")
    (d / "summary.md").write_text("\n".join(lines) + "\n")
    _latent_plots(cfg, out, d)
    write_run_record(d, cfg, "report")
    return d


def _latent_plots(cfg: ExperimentConfig, out: Path, d: Path):
    plt = _plt()
    nz = cfg.phantom().n_slices
    for mdir in sorted((out / "train").iterdir()) if (out / "train").exists() else []:
        mode = mdir.name.replace("_", ":")
        try:
            states = load_states(with_train(cfg, mode=mode), out)
        except DependencyError:
            continue
        tracks = [slice_track(states, z, False)[0] for z in range(nz)]
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 4))
        for z, mu in enumerate(tracks):
            a1.scatter(mu[:, 0], mu[:, 1] if mu.shape[1] > 1 else np.zeros(len(mu)), s=6, label=f"z{z}")
            a2.plot(mu[:, 0], label=f"z{z} c0")
        a1.set_title("latent means")
        a1.legend(fontsize=7)
        a2.set_title("first latent coordinate over frames")
        a2.set_xlabel("frame")
        fig.suptitle(mode, fontsize=9)
        fig.tight_layout()
        fig.savefig(d / f"latents_{mdir.name}.png", dpi=80, metadata={"Software": None})
        plt.close(fig)


STAGES = {
    "simulate": simulate,
    "train": train,
    "reconstruct": reconstruct,
    "evaluate": run_evaluate,
    "export-frames": export_frames,
    "report": report,
}


def run_pipeline(command: str, cfg: ExperimentConfig, out) -> Path:
    if command not in STAGES:
        raise ValueError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    return STAGES[command](cfg, Path(out))


def with_train(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with train-section keys replaced (used for paired runs)."""
    raw = cfg.to_dict()
    raw["train"].update(changes)
    return validate(raw)


__all__ = ["COMMANDS", "DependencyError", "run_pipeline", "simulate", "train", "reconstruct",
           "run_evaluate", "export_frames", "report", "load_truth", "load_kt", "load_states",
           "load_report", "with_train"]
