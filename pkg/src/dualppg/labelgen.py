"""Pseudo PPG labels from the rear (fingertip) camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import FrameSequence, spatial_mean_channel
from .signalcore import (
    SignalLengthError,
    Waveform,
    bandpass,
    estimate_hr,
    maxmin_normalize,
    pearson,
)

MIN_FRAMES = 60


def extract_finger_ppg(rear: FrameSequence, channel: str = "R") -> Waveform:
    """Spatial mean of the red channel, max-min normalized over the whole segment.

    Raises DegenerateRangeError when the channel is constant (no finger on the lens).
    """
    if len(rear) < MIN_FRAMES:
        raise SignalLengthError(f"finger clip needs >= {MIN_FRAMES} frames, got {len(rear)}")
    return maxmin_normalize(spatial_mean_channel(rear, channel))


@dataclass(frozen=True)
class LabelQuality:
    hr_diff: float
    rho: float


def label_quality(pseudo: Waveform, gold: Waveform) -> LabelQuality:
    """Compare a pseudo label against a reference waveform over their common span."""
    hr_diff = abs(estimate_hr(pseudo) - estimate_hr(gold))
    start = max(pseudo.start_time, gold.start_time)
    stop = min(pseudo.end_time, gold.end_time)
    if stop <= start:
        raise SignalLengthError("pseudo and gold waveforms do not overlap")
    fs = pseudo.fs
    n = int(np.floor((stop - start) * fs + 1e-9)) + 1
    t = start + np.arange(n) / fs
    a = bandpass(Waveform(np.interp(t, pseudo.times, pseudo.samples), fs, start))
    b = bandpass(Waveform(np.interp(t, gold.times, gold.samples), fs, start))
    return LabelQuality(hr_diff=hr_diff, rho=pearson(a.samples, b.samples))
