import numpy as np
import pytest
import torch

from vmanifold.checkpoint import load_checkpoint, save_checkpoint
from vmanifold.encoding import acquire, make_coil_maps
from vmanifold.generator import ArchDescriptor
from vmanifold.phantom import PhantomConfig, simulate_series
from vmanifold.sampling import AcquisitionSchedule
from vmanifold.training import FrameData, TrainConfig, new_state, total_loss, train_step


@pytest.fixture(scope="module")
def small():
    ph = PhantomConfig(grid=(16, 16, 2))
    sched = AcquisitionSchedule(n_interleaves=48, readout_points=64)
    truth = simulate_series(ph, sched)
    maps = make_coil_maps(ph.grid, n_coils=2)
    pts, _ = sched.frame_trajectories(16)
    kt = acquire(truth, maps, pts, 0.1, 0)
    arch = ArchDescriptor((16, 16, 2), base_channels=8, channels=(8, 8))
    return kt, maps, arch


def trained(small, iters=3):
    kt, maps, arch = small
    cfg = TrainConfig(iterations=iters, batch=4, dtype="float32")
    data = FrameData(kt, maps, dtype=torch.float32)
    st = new_state(data, arch, cfg, (0, 1))
    for _ in range(iters):
        st = train_step(st, data, cfg)
    return st, data, cfg


def test_round_trip_preserves_everything(small, tmp_path):
    st, data, cfg = trained(small)
    save_checkpoint(tmp_path, st, seed=0)
    back, meta = load_checkpoint(tmp_path)
    assert meta["iteration"] == st.iteration == 3
    assert back.slice_ids == st.slice_ids and back.sigma2 == st.sigma2 and back.lambda2 == st.lambda2
    for k, v in st.params().items():
        assert torch.equal(back.params()[k], v.detach()), k
    assert back.adam.t == st.adam.t
    for k in st.adam.m:
        assert torch.equal(back.adam.m[k], st.adam.m[k]) and torch.equal(back.adam.v[k], st.adam.v[k])


def test_resumed_training_matches_uninterrupted(small, tmp_path):
    st, data, cfg = trained(small, 2)
    save_checkpoint(tmp_path, st, seed=0)
    back, _ = load_checkpoint(tmp_path)
    a = train_step(st, data, cfg)
    b = train_step(back, data, cfg)
    for k, v in a.params().items():
        assert torch.equal(b.params()[k], v), k


def test_loss_identical_after_reload(small, tmp_path):
    st, data, cfg = trained(small, 1)
    save_checkpoint(tmp_path, st, seed=0)
    back, _ = load_checkpoint(tmp_path)
    frames = st.frames()[:4]
    eps = torch.zeros(4, 2)
    assert total_loss(st, data, frames, eps, cfg)[0].item() == total_loss(back, data, frames, eps, cfg)[0].item()


def test_byte_identical_rewrite(small, tmp_path):
    st, _, _ = trained(small, 1)
    save_checkpoint(tmp_path / "a", st, seed=0)
    save_checkpoint(tmp_path / "b", st, seed=0)
    for f in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_rejects_double(small, tmp_path):
    kt, maps, arch = small
    cfg = TrainConfig(dtype="float64")
    st = new_state(FrameData(kt, maps), arch, cfg, (0, 1))
    with pytest.raises(TypeError):
        save_checkpoint(tmp_path, st, seed=0)
