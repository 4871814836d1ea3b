import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungquant.losses import dice_metric
from lungquant.preprocess import (
    LESION_WINDOW,
    LUNG_WINDOW,
    HuWindow,
    resample,
    resample_mask_to_original,
    window_and_normalize,
)
from lungquant.volume_io import BinaryMask3D, CtVolume


def test_window_examples():
    assert window_and_normalize(np.array([-1000.0]), LUNG_WINDOW)[0] == 0.0
    assert window_and_normalize(np.array([300.0]), LESION_WINDOW)[0] == 1.0
    assert window_and_normalize(np.array([0.0]), LUNG_WINDOW)[0] == pytest.approx(0.5)


def test_window_invalid():
    with pytest.raises(ValueError):
        HuWindow(10, 10)


def test_window_on_volume_keeps_geometry():
    vol = CtVolume(np.full((3, 3, 3), 5000.0), (1, 2, 3), (4, 5, 6))
    out = window_and_normalize(vol, LUNG_WINDOW)
    assert isinstance(out, CtVolume) and out.spacing == vol.spacing and out.origin == vol.origin
    assert np.all(out.voxels == 1.0)


@given(st.lists(st.floats(-3000, 3000), min_size=2, max_size=50))
def test_window_monotone_and_idempotent(values):
    x = np.sort(np.array(values, dtype=np.float32))
    y = window_and_normalize(x, LUNG_WINDOW)
    assert np.all(np.diff(y) >= 0)
    assert np.all((0 <= y) & (y <= 1))
    np.testing.assert_array_equal(window_and_normalize(y, HuWindow(0.0, 1.0)), y)


def test_resample_halves_and_doubles_spacing(rng):
    vol = CtVolume(rng.normal(size=(400, 300, 200)).astype(np.float32), (0.7, 0.7, 2.0))
    out = resample(vol, (200, 150, 100))
    assert out.dims == (200, 150, 100)
    assert out.spacing == pytest.approx((1.4, 1.4, 4.0))


def test_resample_identity(rng):
    vol = CtVolume(rng.normal(size=(7, 8, 9)).astype(np.float32), (1, 1, 1))
    np.testing.assert_array_equal(resample(vol, (7, 8, 9)).voxels, vol.voxels)


def test_all_ones_mask_stays_full():
    m = BinaryMask3D(np.ones((13, 7, 5)), (1, 1, 1))
    out = resample(m, (20, 9, 3))
    assert out.voxels.all() and out.dims == (20, 9, 3)


def test_mask_down_up_cuboid_dice():
    arr = np.zeros((120, 100, 60), np.uint8)
    arr[30:90, 20:75, 10:50] = 1
    m = BinaryMask3D(arr, (0.8, 0.8, 2.5))
    ref = CtVolume(np.zeros(arr.shape), m.spacing)
    back = resample_mask_to_original(resample(m, (50, 40, 25)), ref)
    assert back.dims == m.dims
    assert dice_metric(m, back) >= 0.95


@pytest.mark.parametrize("fill", [0, 1])
def test_empty_and_full_mask_round_trip(fill):
    m = BinaryMask3D(np.full((30, 20, 10), fill), (1, 1, 1))
    ref = CtVolume(np.zeros(m.dims), m.spacing)
    back = resample_mask_to_original(resample(m, (11, 7, 4)), ref)
    assert np.all(back.voxels == fill)


@settings(max_examples=30, deadline=None)
@given(
    src=st.tuples(*[st.integers(2, 20)] * 3),
    dst=st.tuples(*[st.integers(2, 20)] * 3),
    spacing=st.tuples(*[st.floats(0.3, 5.0)] * 3),
    seed=st.integers(0, 2**16),
)
def test_resample_preserves_extent_and_binarity(src, dst, spacing, seed):
    r = np.random.default_rng(seed)
    m = BinaryMask3D(r.random(src) > 0.5, spacing)
    out = resample(m, dst)
    assert set(np.unique(out.voxels)) <= {0, 1}
    for d0, s0, d1, s1 in zip(src, spacing, out.dims, out.spacing):
        assert abs(d0 * s0 - d1 * s1) <= max(s0, s1)
