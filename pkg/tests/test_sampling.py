import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmanifold.sampling import (GOLDEN_ANGLE, AcquisitionSchedule, Trajectory, bin_frames, golden_angle,
                                is_navigator, make_radial, make_spiral)


def test_golden_angle_value():
    assert GOLDEN_ANGLE == pytest.approx(2.399963, abs=1e-6)
    assert np.degrees(GOLDEN_ANGLE) == pytest.approx(137.5078, abs=1e-4)


def test_first_interleave_zero():
    assert golden_angle(0, 6) == 0.0


def test_navigator_fixed_angle():
    assert golden_angle(5, 6) == 0.0
    assert golden_angle(11, 6) == 0.0
    assert is_navigator(5, 6) and not is_navigator(4, 6)


def test_single_increment_without_navigators():
    assert golden_angle(1, 0) == pytest.approx(2.399963, abs=1e-6)


def test_counter_skips_navigators():
    # interleave 6 is the 6th non-navigator readout (0..4 and 6)
    assert golden_angle(6, 6) == pytest.approx(np.mod(5 * GOLDEN_ANGLE, 2 * np.pi))


def test_negative_index_rejected():
    with pytest.raises(ValueError):
        golden_angle(-1, 6)


@pytest.mark.parametrize("m", [10, 57, 200])
def test_three_gap_property(m):
    angles = np.sort(np.mod([golden_angle(k, 0) for k in range(m)], np.pi))
    gaps = np.diff(np.concatenate([angles, [angles[0] + np.pi]]))
    assert len(np.unique(np.round(gaps, 9))) <= 3


def test_spiral_endpoints():
    tr = make_spiral(256, 2.0, 32.0)
    np.testing.assert_array_equal(tr.points[0], [0.0, 0.0])
    assert np.hypot(*tr.points[-1]) == pytest.approx(32.0)
    assert np.all(np.abs(tr.points) <= 32.0 + 1e-12)


def test_spiral_density_weights():
    tr = make_spiral(64, 2.0, 8.0)
    r = np.hypot(tr.points[:, 0], tr.points[:, 1])
    w = np.maximum(r, 8.0 / 64)
    np.testing.assert_allclose(tr.density_weights, w / w.mean())
    assert tr.density_weights.mean() == pytest.approx(1.0)
    assert np.all(tr.density_weights > 0)


@pytest.mark.parametrize("kw", [dict(readout_points=4, turns=1, k_max=1), dict(readout_points=16, turns=0, k_max=1),
                                dict(readout_points=16, turns=1, k_max=0)])
def test_spiral_argument_errors(kw):
    with pytest.raises(ValueError):
        make_spiral(**kw)


def test_rotation_matches_matrix():
    tr = make_spiral(32, 1.5, 16.0)
    a = golden_angle(1, 0)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    np.testing.assert_allclose(tr.rotated(a).points, (rot @ tr.points.T).T, atol=1e-12)


def test_radial_fallback():
    tr = make_radial(16, 8.0)
    assert tr.n_points == 16 and np.all(tr.points[:, 1] == 0)
    assert tr.points.min() == -8.0


def test_trajectory_validation():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((4, 2)), np.zeros(4))


def test_binning_full_scan_count():
    assert bin_frames(3192, 6, exclude_navigators=False).n_frames == 532


def test_binning_partial_dropped():
    b = bin_frames(13, 6)
    assert b.n_frames == 2
    np.testing.assert_array_equal(np.concatenate(b.frames), np.arange(12))


def test_binning_desk_default():
    b = bin_frames(480, 5, exclude_navigators=True, navigator_every=6)
    assert b.n_frames == 80
    allk = np.concatenate(b.frames)
    assert not any(is_navigator(int(k), 6) for k in allk)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 400), spf=st.integers(1, 12), excl=st.booleans(), ne=st.integers(0, 8))
def test_binning_partition(n, spf, excl, ne):
    if spf > n:
        with pytest.raises(ValueError):
            bin_frames(n, spf, excl, ne)
        return
    b = bin_frames(n, spf, excl, ne)
    kept = [k for k in range(n) if not (excl and is_navigator(k, ne))]
    allk = np.concatenate(b.frames) if b.frames else np.zeros(0, int)
    assert len(set(allk.tolist())) == len(allk)
    assert allk.tolist() == kept[: len(allk)]
    assert len(kept) - len(allk) < spf
    assert all(len(f) == spf for f in b.frames)


def test_navigators_share_trajectory():
    sched = AcquisitionSchedule()
    base = sched.base_trajectory(64)
    navs = [base.rotated(golden_angle(k, 6)) for k in (5, 11, 17)]
    assert navs[0] == navs[1] == navs[2]


def test_frame_trajectories_shapes():
    sched = AcquisitionSchedule(n_interleaves=48, readout_points=32)
    pts, w = sched.frame_trajectories(16)
    assert pts.shape == (8, 5 * 32, 2) and w.shape == (8, 5 * 32)
    assert np.all(np.abs(pts) <= 8.0 + 1e-9)


def test_unknown_trajectory_kind():
    with pytest.raises(ValueError):
        AcquisitionSchedule(trajectory="rosette").base_trajectory(16)
