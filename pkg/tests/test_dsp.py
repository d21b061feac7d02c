import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from somnus import dsp
from somnus.dsp import SleepStage
from somnus.edf import SampleSeries
from somnus.synthdata import _beat_times, ecg_waveform


def sine(freq, rate, seconds=10.0, amp=1.0, phase=0.3):
    t = np.arange(int(seconds * rate)) / rate
    return SampleSeries(amp * np.sin(2 * np.pi * freq * t + phase), rate)


def steady_rms(x, rate, skip_s=None):
    if skip_s is None:
        skip_s = len(x) / rate / 2 if len(x) / rate > 10 else 2.0
    x = np.asarray(x)[int(skip_s * rate):]
    return float(np.sqrt(np.mean(x ** 2)))


def gain_db(filt, freq, rate, **kw):
    s = sine(freq, rate, **kw)
    return 20 * math.log10(steady_rms(filt(s).samples, rate) / steady_rms(s.samples, rate))


# --- notch -------------------------------------------------------------------

@pytest.mark.parametrize("mains,rate", [(50, 256), (60, 256), (50, 200), (60, 128)])
def test_notch_attenuates_mains(mains, rate):
    # Near Nyquist the notch pole sits close to the unit circle; wait out the transient.
    gain = gain_db(lambda s: dsp.notch(s, mains), mains, rate, seconds=30)
    assert gain <= -40


def test_notch_sine_rms_below_one_percent():
    s = sine(50, 256)
    assert steady_rms(dsp.notch(s, 50).samples, 256) <= 0.01 * steady_rms(s.samples, 256)


@pytest.mark.parametrize("mains", [50, 60])
@pytest.mark.parametrize("offset", [-5, 5, -10, 20])
def test_notch_passband(mains, offset):
    assert abs(gain_db(lambda s: dsp.notch(s, mains), mains + offset, 256)) <= 1.0


def test_notch_ten_hz_preserved_and_dc_unchanged():
    assert abs(gain_db(lambda s: dsp.notch(s, 50), 10, 256)) <= 1.0
    dc = SampleSeries(np.full(1000, 7.25), 256)
    np.testing.assert_allclose(dsp.notch(dc, 50).samples, 7.25, rtol=1e-6)


def test_notch_refuses_mains_at_or_above_nyquist():
    with pytest.raises(dsp.NyquistViolation):
        dsp.notch(sine(10, 64), 50)
    with pytest.raises(dsp.NyquistViolation):
        dsp.notch(sine(10, 100), 50)


# --- high-pass ---------------------------------------------------------------

def test_highpass_cutoff_is_minus_3db():
    assert abs(gain_db(dsp.highpass_emg, 15, 200) + 3.0103) <= 0.5


def test_highpass_fifteen_hz_amplitude_ratio():
    s = sine(15, 200)
    ratio = steady_rms(dsp.highpass_emg(s).samples, 200) / steady_rms(s.samples, 200)
    assert abs(ratio - 1 / math.sqrt(2)) <= 0.06 / math.sqrt(2)


@pytest.mark.parametrize("rate", [128, 200, 256])
def test_highpass_passes_four_times_cutoff(rate):
    assert gain_db(dsp.highpass_emg, 60, rate) >= -0.5


def test_highpass_follows_first_order_response():
    for f in (5, 10, 30):
        analytic = 20 * math.log10(f / math.hypot(f, 15))
        assert abs(gain_db(dsp.highpass_emg, f, 1000, seconds=20) - analytic) < 0.1


def test_highpass_rejects_dc():
    out = dsp.highpass_emg(SampleSeries(np.full(2000, 40.0), 200)).samples
    assert np.max(np.abs(out[200:])) <= 1e-3 * 40.0


def test_highpass_needs_rate_above_thirty():
    with pytest.raises(dsp.NyquistViolation):
        dsp.highpass_emg(sine(5, 30))


# --- ECG cancellation --------------------------------------------------------

def ecg_fixture(seconds=300, rate=100, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(seconds * rate) / rate
    ecg = ecg_waveform(_beat_times(rng, seconds), t)
    eeg = 20 * rng.standard_normal(len(t))
    return eeg, ecg


def test_ecg_absent_leaves_target_unchanged():
    s = sine(10, 100)
    assert dsp.ecg_cancel(s, None) is s
    assert dsp.ecg_cancel(s, SampleSeries(np.zeros(0), 100)) is s


def test_ecg_correlation_reduced_by_eighty_percent():
    eeg, ecg = ecg_fixture()
    target = eeg + 0.3 * ecg
    out = dsp.ecg_cancel(SampleSeries(target, 100), SampleSeries(ecg, 100)).samples
    before = abs(np.corrcoef(target, ecg)[0, 1])
    after = abs(np.corrcoef(out, ecg)[0, 1])
    assert after <= 0.2 * before


def test_ecg_cancel_spares_uncorrelated_noise():
    eeg, ecg = ecg_fixture(seed=1)
    out = dsp.ecg_cancel(SampleSeries(eeg, 100), SampleSeries(ecg, 100)).samples
    assert abs(np.sqrt(np.mean(out ** 2)) / np.sqrt(np.mean(eeg ** 2)) - 1) <= 0.05


def test_ecg_rate_mismatch():
    with pytest.raises(dsp.RateMismatch):
        dsp.ecg_cancel(sine(10, 100), sine(1, 200))


# --- resampling --------------------------------------------------------------

def test_resample_sine_amplitude_200_to_100():
    out = dsp.resample_to(sine(10, 200, seconds=10, phase=0.0), 100)
    t = np.arange(len(out)) / 100
    ref = np.sin(2 * np.pi * 10 * t)
    core = slice(200, -200)
    amp = np.sqrt(2) * steady_rms(out.samples[core], 100, 0)
    assert abs(amp - 1.0) <= 0.01
    assert np.max(np.abs(out.samples[core] - ref[core])) <= 0.01


@pytest.mark.parametrize("rate", [64, 128, 200, 256, 250, 512])
def test_resample_length_formula_and_dc(rate):
    n = 30 * rate + 7
    out = dsp.resample_to(SampleSeries(np.full(n, 3.5), rate), 100)
    assert out.sampling_rate_hz == 100
    assert len(out) == math.floor(n * 100 / rate + 0.5)
    np.testing.assert_allclose(out.samples[50:-50], 3.5, rtol=1e-6)


def test_resample_identity_when_rates_match():
    s = SampleSeries(np.random.default_rng(0).standard_normal(3000), 100)
    out = dsp.resample_to(s, 100)
    assert np.array_equal(out.samples, s.samples)


def test_resample_upsampling_preserves_low_band():
    out = dsp.resample_to(sine(5, 64, seconds=20, phase=0.0), 100)
    t = np.arange(len(out)) / 100
    core = slice(300, -300)
    assert np.max(np.abs(out.samples[core] - np.sin(2 * np.pi * 5 * t)[core])) < 0.01


def test_resample_suppresses_aliasing():
    # 80 Hz at 256 Hz would alias to 20 Hz at 100 Hz without filtering.
    out = dsp.resample_to(sine(80, 256, seconds=10), 100)
    assert steady_rms(out.samples, 100) < 0.01


def test_resample_empty_refused():
    with pytest.raises(dsp.DSPError):
        dsp.resample_to(SampleSeries(np.zeros(0), 200))


# --- linearity ---------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.floats(min_value=-1e3, max_value=1e3).filter(lambda a: abs(a) > 1e-3))
def test_filters_are_linear(a):
    rng = np.random.default_rng(5)
    x = SampleSeries(rng.standard_normal(2000), 200)
    ax = SampleSeries(a * x.samples, 200)
    for f in (lambda s: dsp.notch(s, 50), dsp.highpass_emg, lambda s: dsp.resample_to(s, 100)):
        np.testing.assert_allclose(f(ax).samples, a * f(x).samples, rtol=1e-6, atol=1e-9 * abs(a))


def test_filters_keep_length_and_rate():
    x = sine(3, 200, seconds=7.3)
    for out in (dsp.notch(x, 60), dsp.highpass_emg(x)):
        assert len(out) == len(x) and out.sampling_rate_hz == 200


# --- epochs and stages -------------------------------------------------------

def four_channels(n, seed=0):
    rng = np.random.default_rng(seed)
    return [SampleSeries(rng.standard_normal(n), 100) for _ in range(4)]


def test_build_epochs_exact_tiling():
    ch = four_channels(9000)
    eps = dsp.build_epochs(ch, [SleepStage.W, SleepStage.N2, SleepStage.N3], ("D", "r"))
    assert [e.label for e in eps] == [SleepStage.W, SleepStage.N2, SleepStage.N3]
    assert eps[2].source == ("D", "r", 2)
    rebuilt = np.concatenate([e.data for e in eps], axis=1)
    np.testing.assert_array_equal(rebuilt, np.stack([c.samples for c in ch]))


def test_build_epochs_drops_excluded_and_tail():
    ch = four_channels(9050)
    eps = dsp.build_epochs(ch, [SleepStage.W, SleepStage.EXCLUDED, SleepStage.N2])
    assert [e.source[-1] for e in eps] == [0, 2]
    np.testing.assert_array_equal(eps[1].data[0], ch[0].samples[6000:9000])


def test_build_epochs_errors():
    with pytest.raises(dsp.ChannelCountMismatch):
        dsp.build_epochs(four_channels(3000)[:3], [SleepStage.W])
    with pytest.raises(dsp.ChannelTooShort):
        dsp.build_epochs(four_channels(5999), [SleepStage.W, SleepStage.W])
    with pytest.raises(dsp.RateMismatch):
        dsp.build_epochs([SampleSeries(np.zeros(6000), 200)] * 4, [SleepStage.W])


@pytest.mark.parametrize("raw,std,expected", [
    ("S4", "RK", SleepStage.N3), ("S3", "RK", SleepStage.N3), ("S1", "RK", SleepStage.N1),
    ("S2", "RK", SleepStage.N2), ("REM", "RK", SleepStage.R), ("W", "RK", SleepStage.W),
    ("N2", "AASM", SleepStage.N2), ("R", "AASM", SleepStage.R),
    ("MOVEMENT", "RK", SleepStage.EXCLUDED), ("?", "AASM", SleepStage.EXCLUDED),
    ("S4", "AASM", SleepStage.EXCLUDED),
])
def test_map_stage(raw, std, expected):
    assert dsp.map_stage(raw, std) is expected


def test_condition_channels_order_and_skips():
    rate = 200
    t = np.arange(60 * rate) / rate
    rng = np.random.default_rng(0)
    channels = {r: SampleSeries(rng.standard_normal(len(t)) + np.sin(2 * np.pi * 50 * t), rate)
                for r in dsp.CHANNEL_ROLES}
    channels["EMG"] = SampleSeries(rng.standard_normal(60 * 64), 64)
    log = dsp.ConditioningLog()
    out = dsp.condition_channels(channels, None, 50, True, log)
    assert [len(c) for c in out] == [6000] * 4
    assert all(c.sampling_rate_hz == 100 for c in out)
    assert any("EMG notch" in s for s in log.skipped)
    # mains removed before the 100 Hz conversion (50 Hz would sit at Nyquist)
    raw = dsp.condition_channels(channels, None, 50, False)
    assert np.std(out[0].samples[500:]) < np.std(raw[0].samples[500:])
