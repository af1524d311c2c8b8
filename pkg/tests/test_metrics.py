import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cocoa.errors import InputError, UndefinedMetricError
from cocoa.forward import NoiseModel, apply_noise
from cocoa.metrics import (MetricsReport, SbrConfig, camera_gain, emd_sliced, image_contrast, pcc,
                           piecewise_cutoff, radial_psd, sbr, snr, snr_from_mean, wavefront_rms_error)
from cocoa.optics import WavefrontAberration


def test_gain_recovered_from_simulated_frames():
    rng = np.random.default_rng(0)
    lam = rng.uniform(20, 400, size=(32, 32))
    frames = np.stack([apply_noise(lam, NoiseModel(gain=2.19, seed=s)) for s in range(200)])
    assert camera_gain(frames) == pytest.approx(2.19, abs=0.05)


def test_gain_needs_signal():
    with pytest.raises(InputError):
        camera_gain(np.zeros((5, 4, 4)))
    with pytest.raises(InputError):
        camera_gain(np.ones((1, 4, 4)))


@pytest.mark.parametrize("mean,gain,readout,expected", [
    (100.0, 1.0, 0.0, 10.0),
    (200.0, 2.0, 0.0, 10.0),
    (90.0, 1.0, np.sqrt(10.0), 9.0),
    (0.0, 1.0, 2.0, 0.0),
])
def test_snr_arithmetic(mean, gain, readout, expected):
    assert snr_from_mean(mean, gain, readout) == expected


def test_snr_uses_mask_mean():
    stack = np.array([[[100.0, 4.0], [100.0, 4.0]]])
    mask = stack > 50
    assert snr(stack, mask, 1.0, 0.0) == 10.0
    with pytest.raises(InputError):
        snr(stack, np.zeros_like(mask), 1.0, 0.0)


def two_level_stack(ratio=2.0, background=100.0, fraction=0.05):
    stack = np.full((16, 48, 48), background)
    mask = np.zeros(stack.shape, dtype=bool)
    rng = np.random.default_rng(3)
    while mask.mean() < fraction:
        z, y, x = rng.integers(0, [13, 43, 43])
        mask[z:z + 3, y:y + 5, x:x + 5] = True
    stack[mask] = ratio * background
    return stack


@pytest.mark.parametrize("noisy", [False, True])
def test_sbr_two_level_synthetic(noisy):
    stack = two_level_stack()
    if noisy:
        stack = apply_noise(stack, NoiseModel(seed=1))
    result = sbr(stack)
    assert result.sbr == pytest.approx(2.0, rel=0.10)
    assert result.signal_mask.shape == (16, 48, 48)
    assert not np.any(result.signal_mask & result.background_mask)


def test_sbr_undefined_for_constant_stack():
    with pytest.raises(UndefinedMetricError):
        sbr(np.full((4, 8, 8), 3.0))
    with pytest.raises(InputError):
        SbrConfig(lowpass_sigma=5, highpass_sigma=2)


def test_pcc_identities(rng):
    x = rng.random((4, 5, 6))
    assert pcc(x, x) == pytest.approx(1.0)
    assert pcc(x, -x) == pytest.approx(-1.0)
    assert pcc(x, 3 * x + 2) == pytest.approx(1.0)
    with pytest.raises(UndefinedMetricError):
        pcc(x, np.ones_like(x))
    with pytest.raises(InputError):
        pcc(x, x[:2])


def test_emd_zero_for_identical_volumes(rng):
    x = rng.random((4, 6, 6))
    assert emd_sliced(x, x) == pytest.approx(0.0, abs=1e-12)


def test_emd_point_masses_match_sliced_closed_form():
    a = np.zeros((9, 9, 9))
    b = np.zeros((9, 9, 9))
    a[2, 3, 1] = 1
    b[6, 5, 7] = 1
    v = np.array([4, 2, 6])
    # E[(v . u)^2] = |v|^2 / 3 for u uniform on the sphere
    assert emd_sliced(a, b, projections=200, seed=0) == pytest.approx(np.linalg.norm(v) / np.sqrt(3), rel=0.05)


def test_emd_respects_pitch():
    a = np.zeros((3, 3, 3))
    b = np.zeros((3, 3, 3))
    a[0, 1, 1] = b[2, 1, 1] = 1
    d1 = emd_sliced(a, b, seed=1)
    d2 = emd_sliced(a, b, seed=1, pitch=(2.0, 1.0, 1.0))
    assert d2 == pytest.approx(2 * d1)


def test_emd_needs_mass():
    with pytest.raises(InputError):
        emd_sliced(np.zeros((2, 2, 2)), np.ones((2, 2, 2)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_emd_symmetric_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 4, 4)), rng.random((3, 4, 4))
    d_ab = emd_sliced(a, b, projections=20, seed=seed)
    assert d_ab >= 0
    assert d_ab == pytest.approx(emd_sliced(b, a, projections=20, seed=seed), rel=1e-9)


def test_image_contrast():
    img = np.linspace(1, 100, 10_000).reshape(100, 100)
    assert image_contrast(img) == pytest.approx(np.percentile(img, 99) / np.percentile(img, 1))
    with pytest.raises(InputError):
        image_contrast(np.zeros((4, 4)))


def test_radial_psd_parseval(rng):
    img = rng.random((32, 32))
    psd = radial_psd(img, pitch=0.1)
    assert np.sum(psd.power * psd.counts) == pytest.approx(np.sum(img ** 2))
    assert psd.frequency[0] == 0 and psd.frequency[1] == pytest.approx(1 / 3.2)


def test_wavefront_error():
    est = WavefrontAberration({7: 0.14, 8: 0.01})
    truth = WavefrontAberration({7: 0.15})
    assert wavefront_rms_error(est, truth) == pytest.approx(np.hypot(0.01, 0.01))


def test_piecewise_cutoff_recovers_hinge():
    xs = np.linspace(0, 10, 21)
    ys = np.where(xs < 4, 0.2 + 0.1 * xs, 0.6 + 0.01 * (xs - 4))
    fit = piecewise_cutoff(xs, ys)
    assert fit.breakpoint == pytest.approx(4.0, abs=0.1)
    assert fit.slopes[0] == pytest.approx(0.1, abs=1e-3)
    assert fit.slopes[1] == pytest.approx(0.01, abs=1e-3)
    np.testing.assert_allclose(fit.predict(xs), ys, atol=2e-3)


def test_piecewise_cutoff_validation():
    with pytest.raises(InputError):
        piecewise_cutoff([0, 1, 2], [0, 1, 2])
    with pytest.raises(InputError):
        piecewise_cutoff([0, 2, 1, 3], [0, 1, 2, 3])


def test_report_serializes_and_validates():
    report = MetricsReport(snr=10.0, pcc=0.9, rms_wavefront_error=0.01)
    data = json.loads(report.to_json())
    assert data["snr"] == 10.0 and data["sbr"] is None
    with pytest.raises(ValueError):
        MetricsReport(pcc=1.5)


def test_sbr_deterministic():
    stack = apply_noise(two_level_stack(), NoiseModel(seed=2))
    np.testing.assert_array_equal(sbr(stack).signal_mask, sbr(stack).signal_mask)


def test_sbr_untied_variance_option():
    result = sbr(apply_noise(two_level_stack(), NoiseModel(seed=2)), SbrConfig(tied_variance=False))
    assert result.sbr > 1
