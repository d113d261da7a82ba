import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualppg import signalcore as sc
from dualppg.signalcore import Waveform
from dualppg.synth import gen_bvp

from .oracles import butterworth_bandpass_gain, direct_dft_power, fitted_amplitude, pearson_loop

FS = 30.0


def sine(f, dur=60.0, fs=FS, amp=1.0, phase=0.0):
    t = np.arange(int(round(dur * fs))) / fs
    return Waveform(amp * np.sin(2 * np.pi * f * t + phase), fs)


def mid(x, frac=0.25):
    n = len(x)
    return x[int(n * frac) : int(n * (1 - frac))]


# -- Waveform ---------------------------------------------------------------


def test_waveform_invariants():
    with pytest.raises(sc.SignalError):
        Waveform([1.0], FS)
    with pytest.raises(sc.SignalError):
        Waveform([1.0, np.nan], FS)
    with pytest.raises(sc.SignalError):
        Waveform([1.0, 2.0], 0.0)
    w = Waveform([1.0, 2.0, 3.0], FS, start_time=2.0)
    assert w.end_time == pytest.approx(2.0 + 2 / FS)
    with pytest.raises(ValueError):
        w.samples[0] = 5.0


# -- bandpass ---------------------------------------------------------------


def test_bandpass_removes_dc():
    out = sc.bandpass(Waveform(np.full(1800, 5.0), FS))
    assert np.max(np.abs(mid(out.samples))) <= 1e-6


def test_bandpass_passband_center():
    x = sine(1.5)
    out = sc.bandpass(x)
    expected = butterworth_bandpass_gain(1.5, FS, 0.75, 2.5, 2)
    amp = fitted_amplitude(mid(out.samples), 1.5, FS)
    assert 0.95 <= amp <= 1.05
    assert amp == pytest.approx(expected, abs=1e-3)


def test_bandpass_stopband():
    out = sc.bandpass(sine(10.0))
    assert butterworth_bandpass_gain(10.0, FS, 0.75, 2.5, 2) < 0.05
    assert fitted_amplitude(mid(out.samples), 10.0, FS) < 0.05


def test_bandpass_errors():
    with pytest.raises(sc.InvalidBandError):
        sc.bandpass(sine(1.0), lo=0.75, hi=20.0)
    with pytest.raises(sc.InvalidBandError):
        sc.bandpass(sine(1.0), lo=2.0, hi=1.0)
    with pytest.raises(sc.SignalLengthError):
        sc.bandpass(Waveform(np.arange(5.0), FS))


def test_bandpass_keeps_length_and_rate():
    x = Waveform(np.random.default_rng(0).standard_normal(333), 25.0, 1.5)
    y = sc.bandpass(x)
    assert len(y) == len(x) and y.fs == 25.0 and y.start_time == 1.5


@settings(max_examples=25, deadline=None)
@given(
    a=st.floats(-10, 10),
    b=st.floats(-10, 10),
    seed=st.integers(0, 2**16),
)
def test_bandpass_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(300)
    y = rng.standard_normal(300)
    lhs = sc.bandpass(Waveform(a * x + b * y, FS)).samples
    rhs = a * sc.bandpass(Waveform(x, FS)).samples + b * sc.bandpass(Waveform(y, FS)).samples
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


# -- maxmin -----------------------------------------------------------------


def test_maxmin_examples():
    assert np.array_equal(sc.maxmin_normalize(Waveform([2.0, 4.0, 6.0], FS)).samples, [0.0, 0.5, 1.0])
    assert np.array_equal(sc.maxmin_normalize(Waveform([0.0, 0.5, 1.0], FS)).samples, [0.0, 0.5, 1.0])
    with pytest.raises(sc.DegenerateRangeError):
        sc.maxmin_normalize(Waveform([3.0, 3.0, 3.0], FS))


def test_maxmin_preserves_order():
    x = np.random.default_rng(1).uniform(-3, 7, 1000)
    y = sc.maxmin_normalize(Waveform(x, FS)).samples
    assert y.min() == 0.0 and y.max() == 1.0
    assert np.array_equal(np.argsort(x, kind="stable"), np.argsort(y, kind="stable"))


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 60), elements=finite))
def test_maxmin_idempotent(x):
    if np.ptp(x) == 0:
        return
    once = sc.maxmin_normalize(Waveform(x, FS))
    twice = sc.maxmin_normalize(once)
    assert np.allclose(once.samples, twice.samples, atol=1e-12, rtol=0)
    assert once.samples.min() == 0.0 and once.samples.max() == 1.0


# -- first difference -------------------------------------------------------


def test_first_difference_examples():
    assert np.array_equal(sc.first_difference(Waveform([1.0, 3.0, 6.0], FS)).samples, [2.0, 3.0])
    assert np.all(sc.first_difference(Waveform(np.full(10, 4.2), FS)).samples == 0)
    with pytest.raises(sc.SignalLengthError):
        sc.first_difference(Waveform([1.0, 2.0], FS))


def test_first_difference_gain():
    f0 = 1.3
    d = sc.first_difference(sine(f0, dur=20))
    expected = 2 * np.sin(np.pi * f0 / FS)
    assert fitted_amplitude(d.samples, f0, FS) == pytest.approx(expected, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(3, 50), elements=st.floats(-100, 100)))
def test_difference_inverts_cumsum(x):
    c = sc.cumulative_sum(Waveform(x, FS))
    assert np.allclose(sc.first_difference(c).samples, x[1:], atol=1e-9)


# -- spectrum and HR --------------------------------------------------------


def test_spectrum_peak_and_grid():
    spec = sc.power_spectrum(sine(1.2))
    assert np.all(np.diff(spec.freqs_bpm) > 0)
    assert spec.freqs_bpm[1] - spec.freqs_bpm[0] <= 0.5
    assert spec.freqs_bpm[np.argmax(spec.power)] == pytest.approx(72.0)


def test_spectrum_zero_signal():
    spec = sc.power_spectrum(Waveform(np.zeros(100), FS))
    assert np.all(spec.power == 0)


def test_spectrum_two_tone_against_direct_dft():
    t = np.arange(1800) / FS
    x = np.sin(2 * np.pi * 1.0 * t) + 0.5 * np.sin(2 * np.pi * 2.0 * t)
    spec = sc.power_spectrum(Waveform(x, FS))
    oracle = direct_dft_power(x, FS, [1.0, 2.0])
    assert spec.at(60.0) == pytest.approx(oracle[0], rel=1e-9)
    assert spec.at(120.0) == pytest.approx(oracle[1], rel=1e-9)
    assert spec.at(60.0) / spec.at(120.0) == pytest.approx(4.0, rel=1e-6)


def test_estimate_hr_examples():
    assert sc.estimate_hr(sine(1.2)) == pytest.approx(72.0, abs=0.5)
    t = np.arange(1800) / FS
    x = np.sin(2 * np.pi * 1.0 * t) + np.sin(2 * np.pi * 3.5 * t)
    assert sc.estimate_hr(Waveform(x, FS)) == pytest.approx(60.0, abs=0.5)
    bvp = gen_bvp(95, FS, 60, harmonic_ratio=0.3, seed=4)
    assert sc.estimate_hr(bvp) == pytest.approx(95.0, abs=1.0)


def test_estimate_hr_errors():
    with pytest.raises(sc.HREstimationError):
        sc.estimate_hr(Waveform(np.full(600, 2.0), FS))
    with pytest.raises(sc.InvalidBandError):
        sc.estimate_hr(sine(1.0), band_bpm=(45, 1000))


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(1e-3, 1e3), offset=st.floats(-1e3, 1e3), seed=st.integers(0, 1000))
def test_estimate_hr_scale_offset_invariant(scale, offset, seed):
    rng = np.random.default_rng(seed)
    x = sine(rng.uniform(0.9, 2.3), dur=30).samples + 0.3 * rng.standard_normal(900)
    ref = sc.estimate_hr(Waveform(x, FS))
    assert sc.estimate_hr(Waveform(scale * x + offset, FS)) == ref


# -- pearson ----------------------------------------------------------------


def test_pearson_examples():
    a = np.random.default_rng(5).standard_normal(50)
    b = np.random.default_rng(6).standard_normal(50)
    assert sc.pearson(a, a) == pytest.approx(1.0)
    assert sc.pearson(a, -a) == pytest.approx(-1.0)
    assert abs(sc.pearson(a, b) - pearson_loop(list(a), list(b))) <= 1e-12
    with pytest.raises(sc.UndefinedCorrelationError):
        sc.pearson(a, np.ones(50))
    with pytest.raises(sc.SignalLengthError):
        sc.pearson([1.0], [2.0])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), s1=st.floats(0.01, 100), s2=st.floats(0.01, 100), o=st.floats(-100, 100))
def test_pearson_affine_invariant(seed, s1, s2, o):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(20), rng.standard_normal(20)
    assert sc.pearson(s1 * a + o, s2 * b - o) == pytest.approx(sc.pearson(a, b), abs=1e-9)


# -- resampling and CSV -----------------------------------------------------


def test_resample_identity_and_ramp():
    w = Waveform(np.arange(30.0), FS)
    assert sc.resample_linear(w, FS) == w
    up = sc.resample_linear(w, 2 * FS)
    assert len(up) == 59
    assert np.allclose(up.samples, up.times * FS, atol=1e-12)


def test_resample_sinusoid():
    w = sine(1.0, dur=10)
    r = sc.resample_linear(w, 25.0)
    assert np.max(np.abs(r.samples - np.sin(2 * np.pi * r.times))) <= 0.01
    with pytest.raises(sc.SignalError):
        sc.resample_linear(w, 0)


def test_waveform_csv_roundtrip(tmp_path):
    w = Waveform(np.random.default_rng(2).standard_normal(100), FS, 3.25)
    path = tmp_path / "w.csv"
    sc.write_waveform_csv(w, path)
    assert path.read_text().splitlines()[0] == "t_s,value"
    back = sc.read_waveform_csv(path)
    assert np.array_equal(back.samples, w.samples)
    assert back.fs == FS and back.start_time == 3.25
