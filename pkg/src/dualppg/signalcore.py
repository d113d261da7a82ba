"""Waveform primitives: filtering, normalization, spectra and heart-rate estimation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal


class SignalError(ValueError):
    """Base class for waveform errors."""


class InvalidBandError(SignalError):
    pass


class SignalLengthError(SignalError):
    pass


class DegenerateRangeError(SignalError):
    """Raised when a signal has no variation to normalize."""


class HREstimationError(SignalError):
    pass


class UndefinedCorrelationError(SignalError):
    pass


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Waveform:
    """Uniformly sampled real signal.

    ``start_time`` is the offset (s) of the first sample on the shared trial clock.
    """

    samples: np.ndarray
    fs: float
    start_time: float = 0.0

    def __post_init__(self):
        samples = _frozen(self.samples)
        if samples.ndim != 1:
            raise SignalError(f"samples must be 1-D, got shape {samples.shape}")
        if not self.fs > 0:
            raise SignalError(f"fs must be positive, got {self.fs}")
        if samples.size < 2:
            raise SignalLengthError(f"waveform needs at least 2 samples, got {samples.size}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("waveform samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "fs", float(self.fs))
        object.__setattr__(self, "start_time", float(self.start_time))

    def __len__(self):
        return self.samples.size

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return (
            self.fs == other.fs
            and self.start_time == other.start_time
            and np.array_equal(self.samples, other.samples)
        )

    @property
    def duration(self) -> float:
        return len(self) / self.fs

    @property
    def end_time(self) -> float:
        """Timestamp of the last sample."""
        return self.start_time + (len(self) - 1) / self.fs

    @property
    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self)) / self.fs

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.fs, self.start_time)

    def slice_seconds(self, start_s: float, stop_s: float | None = None) -> "Waveform":
        """Sub-waveform by offsets (s) relative to ``start_time``."""
        i0 = int(round(start_s * self.fs))
        i1 = len(self) if stop_s is None else int(round(stop_s * self.fs))
        return Waveform(self.samples[i0:i1], self.fs, self.start_time + i0 / self.fs)


@dataclass(frozen=True)
class PowerSpectrum:
    freqs_bpm: np.ndarray
    power: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.freqs_bpm.shape != self.power.shape:
            raise SignalError("frequency and power arrays differ in length")

    def band(self, lo_bpm: float, hi_bpm: float) -> "PowerSpectrum":
        mask = (self.freqs_bpm >= lo_bpm) & (self.freqs_bpm <= hi_bpm)
        return PowerSpectrum(self.freqs_bpm[mask], self.power[mask])

    def at(self, bpm: float) -> float:
        """Power at the grid point nearest ``bpm``."""
        return float(self.power[np.argmin(np.abs(self.freqs_bpm - bpm))])


def butter_sos(fs: float, lo: float = 0.75, hi: float = 2.5, order: int = 2) -> np.ndarray:
    if not 0 < lo < hi < fs / 2:
        raise InvalidBandError(f"band [{lo}, {hi}] Hz must satisfy 0 < lo < hi < fs/2 = {fs / 2}")
    return signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def bandpass(w: Waveform, lo: float = 0.75, hi: float = 2.5, order: int = 2) -> Waveform:
    """Zero-phase (forward-backward) Butterworth band-pass.

    The effective magnitude response is the squared Butterworth magnitude.
    """
    sos = butter_sos(w.fs, lo, hi, order)
    if len(w) < 3 * order:
        raise SignalLengthError(f"band-pass needs at least {3 * order} samples, got {len(w)}")
    padlen = min(3 * (2 * len(sos) + 1), len(w) - 1)
    return w.with_samples(signal.sosfiltfilt(sos, w.samples, padlen=padlen))


def maxmin_normalize(w: Waveform) -> Waveform:
    lo, hi = w.samples.min(), w.samples.max()
    if not hi > lo:
        raise DegenerateRangeError("cannot max-min normalize a constant signal")
    out = (w.samples - lo) / (hi - lo)
    # guard the endpoints against rounding so the range is exactly [0, 1]
    out[w.samples == lo] = 0.0
    out[w.samples == hi] = 1.0
    return w.with_samples(out)


def first_difference(w: Waveform) -> Waveform:
    if len(w) < 3:
        # the output must itself be a valid (>= 2 sample) waveform
        raise SignalLengthError(f"first difference needs at least 3 samples, got {len(w)}")
    return Waveform(np.diff(w.samples), w.fs, w.start_time)


def cumulative_sum(w: Waveform) -> Waveform:
    """Inverse of :func:`first_difference` up to the initial value."""
    return w.with_samples(np.cumsum(w.samples))


def spectrum_nfft(n: int, fs: float, resolution_bpm: float) -> int:
    return max(n, int(math.ceil(60.0 * fs / resolution_bpm)))


def power_spectrum(w: Waveform, resolution_bpm: float = 0.5) -> PowerSpectrum:
    """Periodogram of the mean-removed, zero-padded signal (no taper)."""
    x = w.samples - w.samples.mean()
    nfft = spectrum_nfft(len(x), w.fs, resolution_bpm)
    power = np.abs(np.fft.rfft(x, n=nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, d=1.0 / w.fs) * 60.0
    return PowerSpectrum(freqs, power)


def estimate_hr(
    w: Waveform,
    band_bpm: tuple[float, float] = (45.0, 150.0),
    resolution_bpm: float = 0.5,
    filtered: bool = True,
) -> float:
    """Heart rate (BPM) at the in-band spectral peak of the band-passed signal."""
    lo, hi = band_bpm
    if not 0 < lo < hi < w.fs * 60 / 2:
        raise InvalidBandError(f"HR band {band_bpm} BPM outside (0, {w.fs * 30}) BPM")
    if np.ptp(w.samples) == 0:
        raise HREstimationError("constant signal has no spectral peak")
    x = bandpass(w) if filtered else w
    spec = power_spectrum(x, resolution_bpm).band(lo, hi)
    if spec.power.size == 0 or not spec.power.max() > 0:
        raise HREstimationError("no in-band spectral content")
    return float(spec.freqs_bpm[np.argmax(spec.power)])


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise SignalLengthError(f"pearson needs equal-length 1-D arrays, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise SignalLengthError("pearson needs at least 2 points")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.dot(da, da)), np.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def resample_linear(w: Waveform, fs_target: float) -> Waveform:
    """Linear interpolation onto a uniform ``fs_target`` grid over the same span."""
    if not fs_target > 0:
        raise SignalError(f"fs_target must be positive, got {fs_target}")
    if fs_target == w.fs:
        return w
    span = (len(w) - 1) / w.fs
    n = int(math.floor(span * fs_target + 1e-9)) + 1
    t_new = np.arange(n) / fs_target
    t_old = np.arange(len(w)) / w.fs
    return Waveform(np.interp(t_new, t_old, w.samples), fs_target, w.start_time)


def interp_onto(w: Waveform, times: np.ndarray, fs: float) -> Waveform:
    """Linearly sample ``w`` at absolute ``times`` (which must be uniform at ``fs``)."""
    return Waveform(np.interp(times, w.times, w.samples), fs, float(times[0]))


def standardize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


# ---------------------------------------------------------------------------
# Waveform CSV: header ``t_s,value``


def write_waveform_csv(w: Waveform, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_s", "value"])
        for t, v in zip(w.times, w.samples):
            writer.writerow([repr(float(t)), repr(float(v))])


def read_waveform_csv(path, fs: float | None = None, start_time: float | None = None) -> Waveform:
    """Read a ``t_s,value`` CSV.

    ``fs``/``start_time`` override values inferred from the time column, which
    are only accurate to the printed precision.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t_s", "value"]:
            raise SignalError(f"{path.name}: expected header 't_s,value', got {header}")
        rows = [(float(t), float(v)) for t, v in reader]
    if len(rows) < 2:
        raise SignalLengthError(f"{path.name}: need at least 2 samples")
    t = np.array([r[0] for r in rows])
    v = np.array([r[1] for r in rows])
    if fs is None:
        fs = float(f"{1.0 / np.median(np.diff(t)):.9g}")
    if start_time is None:
        start_time = float(t[0])
    return Waveform(v, fs, start_time)
