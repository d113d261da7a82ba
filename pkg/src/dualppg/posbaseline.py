"""Plane-orthogonal-to-skin (POS) pulse extraction.

Used to produce the pseudo labels of the POS-driven meta-learning baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .ingest import FrameSequence
from .signalcore import SignalLengthError, Waveform

# rows: G - B and -2R + G + B
PROJECTION = np.array([[0.0, 1.0, -1.0], [-2.0, 1.0, 1.0]])


@dataclass(frozen=True, eq=False)
class RgbTrace:
    values: np.ndarray  # T x 3, columns R, G, B
    fs: float
    start_time: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"RGB trace must be T x 3, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("RGB trace must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def rgb_trace_from_clip(front: FrameSequence) -> RgbTrace:
    means = front.frames.reshape(len(front), -1, 3).mean(axis=1, dtype=np.float64)
    return RgbTrace(means, front.fs, front.start_time)


DEGENERATE_STD = 1e-12


def pos_pulse(trace: RgbTrace, window_s: float = 1.6) -> Waveform:
    """Sliding-window POS with a one-frame hop and mean-removed overlap-add."""
    c = trace.values
    n = c.shape[0]
    win = int(math.ceil(window_s * trace.fs))
    if n < win:
        raise SignalLengthError(f"POS needs >= {win} samples, got {n}")
    # windows: (n_win, 3, win)
    windows = sliding_window_view(c, win, axis=0)
    mu = windows.mean(axis=2, keepdims=True)
    safe_mu = np.where(mu == 0, 1.0, mu)
    cn = np.where(mu == 0, 0.0, windows / safe_mu)
    s = np.einsum("pc,kcw->kpw", PROJECTION, cn)
    s1, s2 = s[:, 0, :], s[:, 1, :]
    sd1 = s1.std(axis=1, keepdims=True)
    sd2 = s2.std(axis=1, keepdims=True)
    # degenerate second projection: fall back to s1 alone. Normalized channels
    # are O(1), so an absolute floor separates rounding residue from signal.
    alpha = np.divide(sd1, sd2, out=np.zeros_like(sd1), where=sd2 > DEGENERATE_STD)
    h = s1 + alpha * s2
    h = h - h.mean(axis=1, keepdims=True)
    out = np.zeros(n)
    for k in range(h.shape[0]):
        out[k : k + win] += h[k]
    return Waveform(out, trace.fs, trace.start_time)
