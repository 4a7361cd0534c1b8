import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from adnet import data
from adnet.data import (
    PreprocessConfig,
    SceneSample,
    crop_patches,
    gamma_correct,
    make_synthetic_scene,
    patch_offsets,
    sample_gamma,
)
from adnet.formats import DimensionMismatchError, ExposureOrderError


def test_gamma_correct_examples():
    assert gamma_correct(0.5, 4, 2) == 0.0625
    assert gamma_correct(1.0, 1.0, 3.7) == 1.0
    assert gamma_correct(0.0, 2.0, 2.2) == 0.0
    with pytest.raises(ValueError):
        gamma_correct(0.5, 0.0, 2.2)
    with pytest.raises(ValueError):
        gamma_correct(0.5, 1.0, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 10), st.floats(1.0, 3.0))
def test_gamma_correct_monotone_and_invertible(a, b, t, g):
    lo, hi = sorted((a, b))
    assert gamma_correct(lo, t, g) <= gamma_correct(hi, t, g)
    back = (gamma_correct(hi, t, g) * t) ** (1 / g)
    assert back == pytest.approx(hi, abs=1e-6)


def test_sample_gamma_defaults_and_determinism():
    cfg = PreprocessConfig(disturb_probability=0.0)
    rng = np.random.default_rng(0)
    assert all(sample_gamma(rng, cfg) == 2.2 for _ in range(100))
    a = [sample_gamma(np.random.default_rng([4, i]), PreprocessConfig()) for i in range(50)]
    b = [sample_gamma(np.random.default_rng([4, i]), PreprocessConfig()) for i in range(50)]
    assert a == b


def test_sample_gamma_distribution():
    cfg = PreprocessConfig()
    rng = np.random.default_rng(123)
    draws = np.array([sample_gamma(rng, cfg) for _ in range(100_000)])
    disturbed = draws[draws != cfg.gamma_default]
    assert 0.29 <= disturbed.size / draws.size <= 0.31
    assert disturbed.min() >= 2.14 and disturbed.max() <= 2.34
    # uniform on the interval: the mean sits at the centre
    assert abs(disturbed.mean() - 2.24) < 0.002


def test_preprocess_config_validation():
    with pytest.raises(ValueError):
        PreprocessConfig(disturb_probability=1.5)
    with pytest.raises(ValueError):
        PreprocessConfig(disturb_halfwidth=-0.1)


def _scene(h, w, rng=None):
    rng = rng or np.random.default_rng(0)
    frames = tuple(rng.random((h, w, 3)) for _ in range(3))
    return SceneSample(frames, (0.25, 1.0, 4.0), rng.random((h, w, 3)))


@pytest.mark.parametrize("n,count,last", [(256, 1, 0), (512, 3, 256), (300, 2, 44)])
def test_patch_offsets(n, count, last):
    offs = patch_offsets(n, 256, 128)
    assert len(offs) == count and offs[-1] == last


def test_crop_patches_examples():
    assert len(crop_patches(_scene(256, 256), 256, 128)) == 1
    assert len(crop_patches(_scene(512, 512), 256, 128)) == 9
    with pytest.raises(ValueError):
        crop_patches(_scene(100, 300), 128, 64)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 60), st.integers(8, 60), st.integers(1, 8), st.integers(1, 12))
def test_crop_patches_cover_image(h, w, size, stride):
    size = min(size, h, w)
    assume(stride <= size)
    covered = np.zeros((h, w), dtype=int)
    for y in patch_offsets(h, size, stride):
        for x in patch_offsets(w, size, stride):
            assert 0 <= y and y + size <= h and 0 <= x and x + size <= w
            covered[y : y + size, x : x + size] += 1
    assert covered.min() >= 1


def test_patches_crop_all_images_alike():
    scene = _scene(40, 50)
    p = crop_patches(scene, 32, 16)[-1]
    np.testing.assert_array_equal(p.ldr[2], scene.ldr[2][8:40, 18:50])
    np.testing.assert_array_equal(p.gt, scene.gt[8:40, 18:50])


def test_scene_invariants():
    rng = np.random.default_rng(1)
    f = tuple(rng.random((4, 4, 3)) for _ in range(3))
    with pytest.raises(ExposureOrderError):
        SceneSample(f, (4.0, 2.0, 1.0))
    with pytest.raises(DimensionMismatchError):
        SceneSample(f, (1.0, 2.0, 4.0), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        SceneSample((f[0] + 1.0, f[1], f[2]), (1.0, 2.0, 4.0))


def test_synthetic_inversion_consistency():
    scene = make_synthetic_scene(np.random.default_rng(2), 48, 40)
    lin = [gamma_correct(f, t, data.SYNTH_GAMMA) for f, t in zip(scene.ldr, scene.exposures)]
    ok = np.all([(f > 0) & (f < 1) for f in scene.ldr], axis=0)
    assert ok.mean() > 0.5
    for i in (0, 2):
        assert np.abs(lin[i] - lin[1])[ok].max() < 2e-3


def test_synthetic_properties():
    a = make_synthetic_scene(np.random.default_rng(3), 32, 32, motion=(2, -1), noise_sigma=0.01)
    b = make_synthetic_scene(np.random.default_rng(3), 32, 32, motion=(2, -1), noise_sigma=0.01)
    for x, y in zip(a.ldr + (a.gt,), b.ldr + (b.gt,)):
        assert x.tobytes() == y.tobytes()
    clipped = [np.mean(f >= 1.0) for f in a.ldr]
    assert clipped[2] == max(clipped) and clipped[2] > 0
    assert a.gt.min() >= 0 and a.gt.max() <= 1
    # 16-bit quantised
    for f in a.ldr:
        np.testing.assert_array_equal(np.round(f * 65535) / 65535, f)


def test_synthetic_motion_translates_frames():
    still = make_synthetic_scene(np.random.default_rng(4), 24, 24)
    moved = make_synthetic_scene(np.random.default_rng(4), 24, 24, motion=(3, 2))
    np.testing.assert_array_equal(moved.ldr[1], still.ldr[1])
    np.testing.assert_array_equal(moved.ldr[0][3:, 2:], still.ldr[0][:-3, :-2])
    np.testing.assert_array_equal(moved.ldr[0][:3], 0.0)
    np.testing.assert_array_equal(moved.ldr[2][:-3, :-2], still.ldr[2][3:, 2:])


def test_network_io_layout():
    scene = _scene(8, 12)
    x = data.to_network_input(scene, 2.0)
    assert x.shape == (1, 18, 8, 12)
    np.testing.assert_array_equal(x[0, 3:6], scene.ldr[1].transpose(2, 0, 1))
    np.testing.assert_allclose(x[0, 15:18], scene.ldr[2].transpose(2, 0, 1) ** 2 / 4.0)
    np.testing.assert_array_equal(data.from_network_output(data.to_network_target(scene)), scene.gt)
