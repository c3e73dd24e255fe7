import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from srw.augment import (AugmentConfig, add_gaussian_noise, augment_batch, doppler_mirror_index, flip_doppler,
                         make_stability_batch, shift_range)
from srw.radar import RadarConfig, RDISample, TargetTrack, macro_rdi, mti_filter, synthesize_if_frame

CFG = RadarConfig()
images = arrays(np.float64, (8, 6, 4), elements=st.floats(-10, 10))


@given(images)
def test_flip_is_involution(x):
    assert np.array_equal(flip_doppler(flip_doppler(x)), x)


@given(images)
def test_shift_zero_is_identity(x):
    assert np.array_equal(shift_range(x, 0), x)


def test_flip_delta_mirrors_about_center():
    x = np.zeros((32, 32, 4))
    x[20, 5, :] = 1
    y = flip_doppler(x)
    assert y[2 * 16 - 20, 5, 0] == 1 and y.sum() == 4
    assert list(doppler_mirror_index(8)) == [0, 7, 6, 5, 4, 3, 2, 1]


def test_flip_keeps_label_and_shape():
    s = RDISample(np.arange(32 * 32 * 4, dtype=np.float32).reshape(32, 32, 4), 2, 7, 0)
    f = flip_doppler(s)
    assert f.label == 2 and f.sample_id == 7 and f.x.shape == s.x.shape


def test_flipped_negative_velocity_matches_positive():
    rng = np.random.default_rng(0)
    for db in (1, 3, 7, 12):
        v = db * CFG.velocity_resolution
        minus = macro_rdi(mti_filter(synthesize_if_frame(CFG, [TargetTrack(1.35, -v)], rng)))
        plus = macro_rdi(mti_filter(synthesize_if_frame(CFG, [TargetTrack(1.35, v)], rng)))
        np.testing.assert_allclose(flip_doppler(np.abs(minus)[..., None])[..., 0], np.abs(plus), atol=1e-5)


def test_shift_delta_example():
    x = np.zeros((4, 8, 1))
    x[1, 3, 0] = 1
    x[1, 0, 0] = 5      # below R_s: kept verbatim
    y = shift_range(x, 2)
    assert y[1, 5, 0] == 1 and y[1, 3, 0] == 0
    assert y[1, 0, 0] == 5 and y[1, 2, 0] == 5
    z = shift_range(x, 2, zero_fill=True)
    assert z[1, 0, 0] == 0 and z[1, 5, 0] == 1


def test_shift_out_of_range():
    with pytest.raises(ValueError):
        shift_range(np.zeros((4, 8, 1)), 6, max_shift=5)
    with pytest.raises(ValueError):
        shift_range(np.zeros((4, 8, 1)), -1)


@pytest.mark.parametrize("zero_fill", [False, True])
def test_shift_moves_simulated_peak(zero_fill):
    rng = np.random.default_rng(1)
    for rb in (6, 12, 20):
        for rs in range(0, 6):
            t = TargetTrack(rb * CFG.range_resolution, 4 * CFG.velocity_resolution)
            rdi = np.abs(macro_rdi(mti_filter(synthesize_if_frame(CFG, [t], rng))))[..., None]
            out = shift_range(rdi, rs, zero_fill=zero_fill)[..., 0]
            assert np.unravel_index(out.argmax(), out.shape)[1] == rb + rs


@given(st.integers(0, 5), images)
def test_shift_commutes_with_channel_split(rs, x):
    whole = shift_range(x, rs)
    parts = np.concatenate([shift_range(x[..., k:k + 1], rs) for k in range(4)], axis=-1)
    assert np.array_equal(whole, parts)
    parts = np.concatenate([flip_doppler(x[..., k:k + 1]) for k in range(4)], axis=-1)
    assert np.array_equal(flip_doppler(x), parts)


def test_noise_std_and_determinism():
    x = np.zeros((10_000,))
    e = add_gaussian_noise(x, 0.01, np.random.default_rng(5))
    assert abs(e.std() / 0.01 - 1) < 0.05
    assert np.array_equal(e, add_gaussian_noise(x, 0.01, np.random.default_rng(5)))
    assert np.array_equal(add_gaussian_noise(np.ones(3), 0.0, None), np.ones(3))


def test_stability_batch_layout():
    x = np.random.default_rng(0).standard_normal((18, 32, 32, 4)).astype(np.float32)
    b = make_stability_batch(x, 0.01, np.random.default_rng(1))
    assert b.shape[0] == 36 and np.array_equal(b[:18], x)
    d = (b[18:] - b[:18]).astype(np.float64)
    assert abs(d.mean()) < 1e-3 and abs(d.std() / 0.01 - 1) < 0.05


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(flip_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(max_shift=-1)


def test_augment_batch_flip_rate_and_shape():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2000, 8, 8, 1)).astype(np.float32)
    cfg = AugmentConfig(max_shift=0, flip_prob=0.1)
    out = augment_batch(x, cfg, np.random.default_rng(4))
    flipped = np.array([not np.array_equal(a, b) for a, b in zip(out, x)])
    assert out.shape == x.shape and 0.08 < flipped.mean() < 0.12
