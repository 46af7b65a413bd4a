"""Tests of trace handling, resampling, conditioning and detection."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from headstage.signal_core import (
    KERNEL_HALF_WIDTH,
    TEMPLATE_LEN,
    NeuralTrace,
    SpikeTemplate,
    bandpass_filter,
    condition,
    detect_in_uv,
    detect_spikes,
    estimate_noise_sigma,
    load_trace,
    passband_for_rate,
    resample_trace,
    save_trace,
    whiten,
)


def single(x, rate=30_000.0, uv_per_count=1.0):
    return NeuralTrace.from_array(np.asarray(x), rate, uv_per_count)


def butterworth_bandpass_gain(f, fs, low, high, order=2):
    """Magnitude of the bilinear-transformed analog Butterworth band-pass."""
    warp = lambda x: 2 * fs * np.tan(np.pi * x / fs)
    w, wl, wh = warp(f), warp(low), warp(high)
    q = (w ** 2 - wl * wh) / (w * (wh - wl))
    return 1 / np.sqrt(1 + q ** (2 * order))


def interior_snr_db(y, ref, margin):
    e = y[margin:-margin] - ref[margin:-margin]
    return 10 * np.log10(np.sum(ref[margin:-margin] ** 2) / np.sum(e ** 2))


#------------------------------------------------------------------------------
# NeuralTrace / SpikeTemplate
#------------------------------------------------------------------------------

def test_trace_rejects_bad_fields():
    with pytest.raises(ValueError):
        NeuralTrace.from_array(np.zeros(10), 0.0)
    with pytest.raises(ValueError):
        NeuralTrace.from_array(np.zeros(10), 100.0, uv_per_count=0.0)
    with pytest.raises(ValueError):
        NeuralTrace.from_array(np.zeros((2, 10)), 100.0, channel_ids=[3, 3])


def test_trace_channels_must_share_a_duration():
    # 1 s at 100 Hz next to 1 s at 50 Hz is fine, 2 s at 50 Hz is not
    NeuralTrace((np.zeros(100), np.zeros(50)), (100.0, 50.0), 1.0, (0, 1))
    NeuralTrace((np.zeros(100), np.zeros(51)), (100.0, 50.0), 1.0, (0, 1))
    with pytest.raises(ValueError):
        NeuralTrace((np.zeros(100), np.zeros(100)), (100.0, 50.0), 1.0, (0, 1))


def test_unknown_channel():
    with pytest.raises(KeyError):
        single(np.zeros(100)).channel(5)


def test_template_ingest_crops_and_pads():
    long = np.arange(TEMPLATE_LEN + 10, dtype=float) + 1
    t = SpikeTemplate.ingest(0, long)
    assert_array_equal(t.waveform, long[5:5 + TEMPLATE_LEN])
    short = -np.ones(11)
    t = SpikeTemplate.ingest(0, short)
    assert t.waveform.shape == (TEMPLATE_LEN,)
    assert t.waveform.sum() == -11
    assert_array_equal(t.waveform[24:37], [0] + [-1] * 11 + [0])


def test_template_must_be_nondegenerate():
    with pytest.raises(ValueError):
        SpikeTemplate(0, np.zeros(TEMPLATE_LEN))
    with pytest.raises(ValueError):
        SpikeTemplate(0, np.ones(TEMPLATE_LEN - 1))


def test_trace_binary_roundtrip(tmp_path):
    data = np.random.default_rng(0).integers(-2000, 2000, size=(3, 500)).astype(np.int16)
    tr = NeuralTrace.from_array(data, 30_000.0, 0.195, [4, 7, 9])
    save_trace(tr, tmp_path / "x.bin")
    back = load_trace(tmp_path / "x.bin")
    assert back.channel_ids == (4, 7, 9)
    assert back.uv_per_count == 0.195
    for a, b in zip(tr.samples, back.samples):
        assert_array_equal(a, b)
    # channel-interleaved on disk
    raw = np.fromfile(tmp_path / "x.bin", dtype="<i2")
    assert_array_equal(raw[:3], data[:, 0])


#------------------------------------------------------------------------------
# Resampling
#------------------------------------------------------------------------------

@pytest.mark.parametrize("target", [10_000.0, 7_500.0, 12_345.0, 60_000.0])
def test_resample_constant(target):
    y = resample_trace(single(np.full(3000, 100.0)), 0, target)
    assert y.rate == target
    assert_allclose(y.samples[0], 100.0, atol=1e-9)


def test_resample_same_rate_is_bitwise_identity():
    x = np.random.default_rng(1).standard_normal(1000)
    y = resample_trace(single(x), 0, 30_000.0)
    assert_array_equal(y.samples[0], x)


def test_resample_output_length():
    y = resample_trace(single(np.zeros(3001)), 0, 10_000.0)
    assert len(y.samples[0]) == 1001


@pytest.mark.parametrize("target", [10_000.0, 7_500.0, 6_000.0, 3_000.0, 11_111.0])
def test_resample_sine_snr(target):
    src, f = 30_000.0, 1_000.0
    if f > 0.45 * target:
        f = 0.2 * target
    n = 30_000
    x = np.sin(2 * np.pi * f * np.arange(n) / src)
    y = resample_trace(single(x), 0, target).samples[0]
    ref = np.sin(2 * np.pi * f * np.arange(len(y)) / target)
    assert interior_snr_db(y, ref, KERNEL_HALF_WIDTH + 2) >= 40


def test_resample_suppresses_alias():
    # 4 kHz lies above 0.45 x 5 kHz and must not fold back into the output
    src = 30_000.0
    x = np.sin(2 * np.pi * 4_000 * np.arange(30_000) / src)
    y = resample_trace(single(x), 0, 5_000.0).samples[0]
    m = KERNEL_HALF_WIDTH + 2
    assert np.sqrt(np.mean(y[m:-m] ** 2)) < 0.01


def test_resample_errors():
    with pytest.raises(ValueError):
        resample_trace(single(np.zeros(10)), 0, 0.0)
    with pytest.raises(KeyError):
        resample_trace(single(np.zeros(10)), 3, 1000.0)


@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2**16),
       target=st.sampled_from([5_000.0, 10_000.0, 13_000.0, 45_000.0]))
def test_resample_is_linear(a, b, seed, target):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal(600), r.standard_normal(600)
    f = lambda v: resample_trace(single(v), 0, target).samples[0]
    lhs = f(a * x + b * y)
    rhs = a * f(x) + b * f(y)
    scale = max(np.max(np.abs(rhs)), 1e-12)
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * scale + 1e-12


#------------------------------------------------------------------------------
# Band-pass
#------------------------------------------------------------------------------

def test_bandpass_rejects_dc():
    y = bandpass_filter(single(np.full(30_000, 500.0))).samples[0]
    assert y.shape == (30_000,)
    assert np.max(np.abs(y[-15_000:])) < 1.0


@pytest.mark.parametrize("f", [600.0, 1_000.0, 2_000.0])
def test_bandpass_passband_gain(f):
    fs = 30_000.0
    t = np.arange(60_000) / fs
    y = bandpass_filter(single(np.sin(2 * np.pi * f * t))).samples[0]
    amp = np.sqrt(2 * np.mean(y[-30_000:] ** 2))
    expected = butterworth_bandpass_gain(f, fs, 300.0, 3_000.0)
    assert abs(20 * np.log10(amp / expected)) < 0.05
    assert abs(20 * np.log10(amp)) <= 1.0


def test_bandpass_stopband():
    fs = 30_000.0
    t = np.arange(60_000) / fs
    y = bandpass_filter(single(np.sin(2 * np.pi * 10_000 * t))).samples[0]
    amp = np.sqrt(2 * np.mean(y[-30_000:] ** 2))
    assert 20 * np.log10(amp) <= -20
    assert abs(amp - butterworth_bandpass_gain(10_000.0, fs, 300.0, 3_000.0)) < 1e-3


def test_bandpass_is_causal():
    x = np.zeros(2000)
    x[1000] = 1.0
    y = bandpass_filter(single(x)).samples[0]
    assert np.all(y[:1000] == 0)


def test_bandpass_rejects_band_above_nyquist():
    with pytest.raises(ValueError):
        bandpass_filter(single(np.zeros(1000), rate=5_000.0))


def test_passband_clamp(caplog):
    assert passband_for_rate(30_000.0) == (300.0, 3_000.0)
    assert passband_for_rate(6_700.0) == (300.0, 3_000.0)
    with caplog.at_level("WARNING"):
        low, high = passband_for_rate(5_000.0)
    assert (low, high) == (300.0, 2_250.0)
    # the clamped band is usable
    condition(single(np.zeros(1000), rate=5_000.0))


#------------------------------------------------------------------------------
# Noise, whitening, detection
#------------------------------------------------------------------------------

def test_noise_sigma_examples():
    assert estimate_noise_sigma(single(np.zeros(500))) == 0.0
    assert estimate_noise_sigma(single(np.full(500, 7.0))) == 0.0
    x = np.random.default_rng(0).standard_normal(300_000)
    assert 0.97 <= estimate_noise_sigma(single(x)) <= 1.03
    # reported in microvolts, not counts
    assert 1.9 <= estimate_noise_sigma(single(x, uv_per_count=2.0)) <= 2.1


def test_noise_sigma_needs_samples():
    with pytest.raises(ValueError):
        estimate_noise_sigma(single(np.zeros(99)))


def test_whiten_examples():
    x = single(np.array([-5.0, 5.0]))
    assert_array_equal(whiten(x, 1.0).samples[0], [-5.0, 5.0])
    assert_array_equal(whiten(x, 2.5).samples[0], [-2.0, 2.0])
    assert whiten(x, 2.5).unit == "sigma"
    with pytest.raises(ValueError):
        whiten(x, 0.0)


@given(a=st.floats(0.1, 10), b=st.floats(0.1, 10))
def test_whiten_composition(a, b):
    x = single(np.linspace(-20, 20, 41))
    assert_allclose(whiten(whiten(x, a), b).samples[0], whiten(x, a * b).samples[0], rtol=1e-12)


def test_detect_examples():
    assert detect_spikes(single(np.zeros(1000)), -3.0) == []
    x = np.zeros(1000)
    x[295:306] = -5 + np.abs(np.arange(-5, 6))  # triangle with apex -5 at sample 300
    ev = detect_spikes(single(x), -3.0)
    assert len(ev) == 1
    assert ev[0].time_s == pytest.approx(0.010)
    assert ev[0].peak_amplitude == -5


def test_dead_time_merges_close_dips():
    x = np.zeros(3000)
    x[300] = -5
    x[315] = -5  # 0.5 ms later
    assert len(detect_spikes(single(x), -3.0, dead_time_s=1e-3)) == 1
    assert len(detect_spikes(single(x), -3.0, dead_time_s=0.0)) == 2


def test_detect_rejects_positive_threshold():
    with pytest.raises(ValueError):
        detect_spikes(single(np.zeros(10)), 0.0)
    with pytest.raises(ValueError):
        detect_spikes(single(np.zeros(10)), -1.0, dead_time_s=-1.0)


def test_detect_events_ordered_and_inside_trace():
    x = np.random.default_rng(3).standard_normal(30_000)
    ev = detect_spikes(single(x), -2.5)
    t = [e.time_s for e in ev]
    assert t == sorted(t)
    assert all(0 <= v < 1.0 for v in t)


@given(seed=st.integers(0, 2**16), t1=st.floats(-4, -0.5), t2=st.floats(-4, -0.5))
def test_detect_count_monotone_in_threshold(seed, t1, t2):
    x = single(np.random.default_rng(seed).standard_normal(3000))
    lo, hi = sorted([t1, t2])  # hi is the milder threshold
    assert len(detect_spikes(x, lo)) <= len(detect_spikes(x, hi))


@given(seed=st.integers(0, 2**16), sigma=st.floats(0.5, 20), th=st.floats(-5, -1))
def test_whitening_preserves_crossings(seed, sigma, th):
    x = single(np.random.default_rng(seed).standard_normal(3000) * sigma)
    raw = detect_spikes(x, th * sigma)
    white = detect_spikes(whiten(x, sigma), th)
    assert [e.time_s for e in raw] == [e.time_s for e in white]


@given(amp=st.floats(20, 400), width=st.floats(0.3, 1.0), shift=st.integers(0, 9),
       factor=st.sampled_from([2, 3, 4, 5, 6, 8, 10]))
def test_decimation_never_splits_a_spike(amp, width, shift, factor):
    from headstage.synthetic import biphasic_waveform

    x = np.zeros(6000)
    wf = biphasic_waveform(amp, width)
    x[3000 + shift:3000 + shift + len(wf)] += wf
    th = -0.3 * amp
    full = detect_spikes(condition(single(x)), th)
    dec = detect_spikes(condition(resample_trace(single(x), 0, 30_000.0 / factor)), th)
    assert len(dec) <= max(len(full), 1)


def test_detect_in_uv_matches_direct_threshold():
    x = single(np.random.default_rng(5).standard_normal(30_000) * 4.0)
    direct = detect_spikes(x, -12.0)
    via = detect_in_uv(x, -12.0)
    assert [e.time_s for e in direct] == [e.time_s for e in via]
    assert_allclose([e.peak_amplitude for e in direct], [e.peak_amplitude for e in via])
