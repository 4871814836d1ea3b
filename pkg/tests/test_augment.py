import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungquant.augment import (
    TRANSFORMS,
    AugmentationSpec,
    add_gaussian_noise,
    augment_dataset,
    augment_pair,
    elastic_deform,
    motion_blur,
    rotate,
    zoom,
)
from lungquant.losses import dice_metric
from lungquant.phantom import generate_phantom


def cuboid(shape=(64, 64, 8), half=10):
    m = np.zeros(shape, np.uint8)
    c = shape[0] // 2, shape[1] // 2
    m[c[0] - half : c[0] + half, c[1] - half : c[1] + half, 2:6] = 1
    return m


def cylinder(shape=(64, 64, 6), r=14):
    x, y = np.ogrid[: shape[0], : shape[1]]
    disk = (x - (shape[0] - 1) / 2) ** 2 + (y - (shape[1] - 1) / 2) ** 2 <= r * r
    return np.repeat(disk[:, :, None], shape[2], axis=2).astype(np.uint8)


def test_spec_defaults():
    s = AugmentationSpec()
    assert s.factor == 2
    assert s.zoom_factors == (1.05, 1.1, 1.15, 1.2)
    assert s.rotation_angles_deg == (-15, -10, -5, 5, 10, 15)
    assert s.noise_mean_range_hu == (-400.0, 200.0)
    assert s.noise_std_choices_hu == (25.0, 50.0, 75.0)
    assert (s.elastic_coefficient, s.elastic_scale, s.blur_kernel) == (12.0, 1000.0, (4, 3, 3))
    with pytest.raises(ValueError):
        AugmentationSpec(factor=-1)


def test_zoom_identity_and_area_scale():
    m = cuboid()
    v = np.where(m, 0.0, -1000.0).astype(np.float32)
    v1, m1 = zoom(v, m, 1.0)
    np.testing.assert_array_equal(m1, m)
    np.testing.assert_allclose(v1, v, atol=1e-3)
    _, m2 = zoom(v, m, 1.2)
    assert m2.sum() / m.sum() == pytest.approx(1.44, rel=0.05)
    assert set(np.unique(m2)) <= {0, 1}


def test_rotation_inverse_and_symmetry(phantom):
    v, m = phantom.volume.voxels, phantom.lung.voxels
    v1, m1 = rotate(v, m, 10)
    _, m2 = rotate(v1, m1, -10)
    assert dice_metric(m, m2) >= 0.9
    assert abs(int(m1.sum()) - int(m.sum())) / m.sum() < 0.05

    c = cylinder()
    for angle in (-15, 5, 37):
        assert dice_metric(c, rotate(c.astype(np.float32), c, angle)[1]) >= 0.98


def test_noise_statistics():
    base = np.zeros((64, 64, 40), np.float32)
    n = base.size
    d = add_gaussian_noise(base, 0.0, 25.0, np.random.default_rng(0)) - base
    assert abs(d.std() - 25.0) <= 2.0
    d = add_gaussian_noise(base, -400.0, 50.0, np.random.default_rng(1)) - base
    assert abs(d.mean() + 400.0) <= 3 * 50.0 / np.sqrt(n)
    a = add_gaussian_noise(base, 10, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(a, add_gaussian_noise(base, 10, 5, np.random.default_rng(3)))


def test_elastic(phantom):
    v, m = phantom.volume.voxels, phantom.lung.voxels
    v0, m0 = elastic_deform(v, m, scale=0, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(v0, v)
    np.testing.assert_array_equal(m0, m)
    _, m1 = elastic_deform(v, m, rng=np.random.default_rng(0))
    assert set(np.unique(m1)) <= {0, 1}
    assert abs(int(m1.sum()) - int(m.sum())) / m.sum() < 0.10


def test_blur_properties():
    const = np.full((10, 12, 8), -300.0, np.float32)
    np.testing.assert_allclose(motion_blur(const), const, atol=1e-3)

    impulse = np.zeros((15, 15, 15), np.float32)
    impulse[7, 7, 7] = 1.0
    out = motion_blur(impulse)
    assert out.sum() == pytest.approx(1.0, abs=1e-5)
    support = np.argwhere(out > 1e-7)
    extent = tuple(support.max(axis=0) - support.min(axis=0) + 1)
    assert extent == (3, 4, 3)

    step = np.zeros((12, 12, 12), np.float32)
    step[:, 6:, :] = 1000.0
    once = motion_blur(step)
    assert not np.allclose(motion_blur(once), once)


def test_image_and_mask_get_same_geometry(phantom):
    m = phantom.lung.voxels
    as_image = m.astype(np.float32)
    for fn in (lambda v, mm: zoom(v, mm, 1.15), lambda v, mm: rotate(v, mm, -15)):
        v, mm = fn(as_image, m)
        assert dice_metric(v > 0.5, mm) >= 0.95
    v, mm = elastic_deform(as_image, m, rng=np.random.default_rng(4))
    assert dice_metric(v > 0.5, mm) >= 0.95


def test_intensity_transforms_leave_mask(phantom):
    spec = AugmentationSpec()
    m = phantom.lung.voxels
    rng = np.random.default_rng(0)
    for _ in range(20):
        v, mm, record = augment_pair(phantom.volume.voxels, m, spec, rng)
        names = [r["transform"] for r in record]
        assert len(names) == 2 and len(set(names)) == 2 and set(names) <= set(TRANSFORMS)
        if set(names) <= {"noise", "blur"}:
            np.testing.assert_array_equal(mm, m)
        assert mm.shape == m.shape and set(np.unique(mm)) <= {0, 1}


def _small_pairs(k):
    out = []
    for i in range(k):
        p = generate_phantom(i, 0.1, shape=(24, 24, 10), spacing=(12, 12, 30))
        out.append((p.volume.voxels, p.lesion.voxels))
    return out


def test_dataset_counts_and_determinism():
    pairs = _small_pairs(3)
    spec = AugmentationSpec(factor=2, rng_seed=5)
    a = augment_dataset(pairs, spec)
    assert len(a) == 6
    b = augment_dataset(pairs, spec, jobs=3)
    for (va, ma), (vb, mb) in zip(a, b):
        np.testing.assert_array_equal(va, vb)
        np.testing.assert_array_equal(ma, mb)
    assert augment_dataset(pairs, AugmentationSpec(factor=0)) == []


@settings(max_examples=5, deadline=None)
@given(factor=st.integers(0, 3), n=st.integers(0, 3))
def test_dataset_size_is_factor_times_input(factor, n):
    pairs = _small_pairs(n)
    assert len(augment_dataset(pairs, AugmentationSpec(factor=factor))) == factor * n
