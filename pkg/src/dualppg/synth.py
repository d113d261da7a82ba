"""Synthetic ground truth: pulse waveforms, face and fingertip clips, task suites."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .ingest import CameraConfig, FrameSequence, Trial, TrialMeta, save_trial
from .signalcore import Waveform

# relative pulse strength per channel (R, G, B); green dominates
CHANNEL_STRENGTH = np.array([0.5, 1.0, 0.4])

SKIN_BASE = {
    "light": np.array([205.0, 160.0, 135.0]),
    "medium": np.array([170.0, 120.0, 90.0]),
    "dark": np.array([95.0, 62.0, 45.0]),
}
# melanin absorbs more of the pulsatile light
SKIN_PULSE_GAIN = {"light": 1.0, "medium": 0.8, "dark": 0.5}
SKIN_GROUP = {"light": "I+II", "medium": "III+IV", "dark": "V+VI"}

BACKGROUND = np.array([28.0, 28.0, 32.0])
FRAME_SIZE = 72


def gen_bvp(hr_bpm, fs=30.0, dur_s=60.0, harmonic_ratio=0.3, jitter_bpm=0.0, seed=0) -> Waveform:
    """Sinusoidal pulse with a second harmonic and optional slow HR wander.

    The wander is a single slow sinusoid (period 20-40 s) of peak deviation
    ``jitter_bpm``, so the instantaneous rate stays within that bound.
    """
    if not 40 <= hr_bpm <= 180:
        raise ValueError(f"hr_bpm must lie in [40, 180], got {hr_bpm}")
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(dur_s * fs))) / fs
    phase = 2 * np.pi * hr_bpm / 60.0 * t
    if jitter_bpm:
        period = rng.uniform(20.0, 40.0)
        ph0 = rng.uniform(0, 2 * np.pi)
        # integral of jitter * sin(2 pi t / period + ph0), in cycles
        wander = -jitter_bpm / 60.0 * period / (2 * np.pi) * (np.cos(2 * np.pi * t / period + ph0) - np.cos(ph0))
        phase = phase + 2 * np.pi * wander
    x = np.sin(phase) + harmonic_ratio * np.sin(2 * phase)
    return Waveform(x, fs)


@dataclass(frozen=True)
class Ambient:
    """Face-only in-band light fluctuation (e.g. screen content or a second lamp).

    ``chroma`` is its per-channel relative strength; ``freqs_hz`` are the
    components of the fluctuation, each with random phase.
    """

    amp: float = 0.0
    chroma: tuple[float, float, float] = (1.0, 1.0, 1.0)
    freqs_hz: tuple[float, ...] = (1.0,)


def _face_mask(size, cx, cy, rx, ry):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    r = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    # soft edge over ~1.5 px keeps translations smooth
    return np.clip((1.0 - r) * min(rx, ry) / 3.0, 0.0, 1.0)


def _motion_path(motion, t, size, rng):
    n = t.size
    dx = np.zeros(n)
    dy = np.zeros(n)
    mouth = np.zeros(n)
    if motion == "yaw":
        dx = 0.12 * size * np.sin(2 * np.pi * 0.25 * t + rng.uniform(0, 2 * np.pi))
    elif motion == "random":
        # a new target roughly once per second, reached smoothly
        n_sec = int(math.ceil(t[-1])) + 2
        tx = rng.uniform(-0.1, 0.1, n_sec) * size
        ty = rng.uniform(-0.06, 0.06, n_sec) * size
        knots = np.arange(n_sec, dtype=float)
        dx = np.interp(t, knots, tx)
        dy = np.interp(t, knots, ty)
    elif motion == "talking":
        mouth = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(3.0, 4.0) * t) * rng.uniform(0.5, 1.0, n)
    elif motion != "stationary":
        raise ValueError(f"unknown motion mode {motion!r}")
    return dx, dy, mouth


def gen_face_clip(
    bvp: Waveform,
    skin_level: str = "light",
    pulse_amp: float = 0.015,
    noise_sigma: float = 2.0,
    motion: str = "stationary",
    light_drift_amp: float = 0.0,
    seed: int = 0,
    size: int = FRAME_SIZE,
    base_rgb=None,
    illuminant=(1.0, 1.0, 1.0),
    ambient: Ambient | None = None,
    channel_strength=None,
) -> FrameSequence:
    """Front-camera clip of a pulsing face on a dark background.

    Face pixels follow ``base * light(t) * (1 + pulse_amp * gain * k_c * bvp(t))``
    where ``gain`` is lower for darker skin. ``light(t)`` carries a slow global
    drift (<= 0.1 Hz) and, optionally, an in-band ambient fluctuation that only
    reaches the face.
    """
    if not pulse_amp >= 0:
        raise ValueError("pulse_amp must be non-negative")
    if skin_level not in SKIN_BASE:
        raise ValueError(f"skin_level must be one of {tuple(SKIN_BASE)}")
    rng = np.random.default_rng(seed)
    n = len(bvp)
    t = np.arange(n) / bvp.fs
    base = np.asarray(SKIN_BASE[skin_level] if base_rgb is None else base_rgb, dtype=np.float64)
    k = np.asarray(CHANNEL_STRENGTH if channel_strength is None else channel_strength, dtype=np.float64)
    illum = np.asarray(illuminant, dtype=np.float64)
    amp = pulse_amp * SKIN_PULSE_GAIN[skin_level]

    drift = np.ones(n)
    if light_drift_amp:
        f_d = rng.uniform(0.03, 0.1)
        drift = 1.0 + light_drift_amp * np.sin(2 * np.pi * f_d * t + rng.uniform(0, 2 * np.pi))
    face_light = np.ones((n, 3))
    if ambient is not None and ambient.amp:
        s = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in ambient.freqs_hz)
        s = s / max(len(ambient.freqs_hz), 1)
        face_light = 1.0 + ambient.amp * s[:, None] * np.asarray(ambient.chroma)[None, :]
    pulse = 1.0 + amp * bvp.samples[:, None] * k[None, :]  # n x 3

    dx, dy, mouth = _motion_path(motion, t, size, rng)
    texture = 1.0 + 0.04 * rng.standard_normal((size, size, 1)).astype(np.float32)
    bg_texture = 1.0 + 0.15 * rng.standard_normal((size, size, 1)).astype(np.float32)
    background = (BACKGROUND * illum)[None, None, :] * bg_texture
    face_rgb = (base * illum)[None, None, :] * texture
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cx0, cy0 = size / 2, size / 2
    rx, ry = 0.3 * size, 0.4 * size
    static_mask = _face_mask(size, cx0, cy0, rx, ry) if not (dx.any() or dy.any()) else None
    mouth_region = ((xx - cx0) / (0.1 * size)) ** 2 + ((yy - (cy0 + 0.22 * size)) / (0.05 * size)) ** 2 < 1

    frames = np.empty((n, size, size, 3), dtype=np.uint8)
    for i in range(n):
        mask = static_mask if static_mask is not None else _face_mask(size, cx0 + dx[i], cy0 + dy[i], rx, ry)
        m = mask[..., None]
        face = face_rgb * (pulse[i] * face_light[i])[None, None, :]
        if mouth[i]:
            shade = np.where(mouth_region[..., None], 1.0 - 0.35 * mouth[i], 1.0)
            face = face * shade
        img = (m * face + (1 - m) * background) * drift[i]
        if noise_sigma:
            img = img + rng.normal(0.0, noise_sigma, img.shape)
        frames[i] = np.clip(np.rint(img), 0, 255)
    return FrameSequence(frames, bvp.start_time + t)


def face_centroid_trace(clip: FrameSequence, threshold: float = 60.0) -> np.ndarray:
    """Per-frame x centroid of bright (skin) pixels; a cheap motion probe."""
    bright = clip.frames.mean(axis=-1) > threshold
    xs = np.arange(clip.frames.shape[2])[None, None, :]
    return (bright * xs).sum(axis=(1, 2)) / np.maximum(bright.sum(axis=(1, 2)), 1)


def gen_finger_clip(bvp: Waveform, noise_sigma: float = 0.0, seed: int = 0, amp: float = 0.02, size: int = 32) -> FrameSequence:
    """Rear-camera clip with a finger over the lens and the flash on (red dominant)."""
    rng = np.random.default_rng(seed)
    n = len(bvp)
    # spatial shading dithers the 8-bit quantization away in the spatial mean
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    base_r = 180.0 + 40.0 * (0.6 * xx + 0.4 * yy)
    frames = np.empty((n, size, size, 3), dtype=np.uint8)
    frames[..., 1] = 12
    frames[..., 2] = 6
    for i in range(n):
        r = base_r * (1.0 + amp * bvp.samples[i])
        if noise_sigma:
            r = r + rng.normal(0.0, noise_sigma, r.shape)
        frames[i, :, :, 0] = np.clip(np.rint(r), 0, 255)
    return FrameSequence(frames, bvp.start_time + np.arange(n) / bvp.fs)


def finger_noise_for_snr(bvp: Waveform, snr_db: float, amp: float = 0.02, size: int = 32) -> float:
    """Per-pixel noise sigma giving ``snr_db`` (pulse vs. noise power) in the spatial-mean red trace."""
    mean_base = 180.0 + 40.0 * 0.5
    pulse_power = np.var(mean_base * amp * bvp.samples)
    noise_power_mean = pulse_power / 10 ** (snr_db / 10)
    return float(np.sqrt(noise_power_mean * size * size))


# ---------------------------------------------------------------------------
# task suites


@dataclass(frozen=True)
class Condition:
    """Recording condition, mapped onto TrialMeta fields and generator knobs."""

    name: str
    lighting: str = "led"
    lux: int | str = 110
    motion: str = "stationary"
    exercise: bool = False
    illuminant: tuple[float, float, float] = (1.0, 1.0, 1.0)
    light_drift_amp: float = 0.0
    ambient_amp: float = 0.0
    ambient_chroma: tuple[float, float, float] = (1.0, 1.0, 1.0)


CONDITIONS = {
    "led": Condition("led", "led", 110),
    "led-220": Condition("led-220", "led", 220),
    "led-55": Condition("led-55", "led", 55, illuminant=(0.5, 0.5, 0.5)),
    "natural": Condition("natural", "natural", "unknown", illuminant=(1.0, 0.97, 0.92), light_drift_amp=0.05),
    "incandescent": Condition("incandescent", "incandescent", "unknown", illuminant=(1.0, 0.72, 0.42)),
    "random": Condition("random", "natural", "unknown", motion="random", illuminant=(1.0, 0.97, 0.92)),
    "yaw": Condition("yaw", "natural", "unknown", motion="yaw", illuminant=(1.0, 0.97, 0.92)),
    "talking": Condition("talking", "natural", "unknown", motion="talking", illuminant=(1.0, 0.97, 0.92)),
    "exercise": Condition("exercise", "natural", "unknown", exercise=True, illuminant=(1.0, 0.97, 0.92)),
}


@dataclass(frozen=True)
class Domain:
    """Ranges from which per-subject appearance and per-trial nuisances are drawn."""

    skin_levels: tuple[str, ...] = ("light", "medium")
    pulse_amp: tuple[float, float] = (0.012, 0.02)
    hr_bpm: tuple[float, float] = (55.0, 95.0)
    jitter_bpm: tuple[float, float] = (2.0, 6.0)
    noise_sigma: float = 2.0
    light_drift_amp: tuple[float, float] = (0.0, 0.0)
    ambient_amp: tuple[float, float] = (0.0, 0.0)
    ambient_chroma: tuple[tuple[float, float, float], ...] = ((1.0, 1.0, 1.0),)
    # spread of the per-subject pulse colour (log-normal jitter on CHANNEL_STRENGTH)
    strength_spread: float = 0.1
    # optional per-subject (pulse strengths, ambient chroma) pairs; when set, each
    # subject draws one pair and all its trials use that ambient colour
    chroma_pairs: tuple = ()


IN_DISTRIBUTION = Domain()


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: str
    skin_level: str
    base_rgb: tuple[float, float, float]
    channel_strength: tuple[float, float, float]
    pulse_amp: float
    hr_bpm: float
    jitter_bpm: float
    seed: int
    ambient_chroma: tuple[float, float, float] | None = None


@dataclass
class TaskDataset:
    """Trials grouped per subject with their generator ground truth."""

    trials: list = field(default_factory=list)
    profiles: dict = field(default_factory=dict)
    true_hr: dict = field(default_factory=dict)  # trial key -> nominal HR

    def by_subject(self) -> dict:
        out = {}
        for key, trial in zip(self.keys(), self.trials):
            out.setdefault(trial.meta.subject_id, []).append((key, trial))
        return out

    def keys(self):
        return [trial_key(t.meta) for t in self.trials]


def trial_key(meta: TrialMeta) -> str:
    return f"{meta.subject_id}_t{meta.trial_no:02d}"


def sample_subject(rng: np.random.Generator, domain: Domain, subject_id: str) -> SubjectProfile:
    level = domain.skin_levels[rng.integers(len(domain.skin_levels))]
    base = SKIN_BASE[level] * rng.uniform(0.9, 1.1, 3)
    strength = CHANNEL_STRENGTH * np.exp(domain.strength_spread * rng.standard_normal(3))
    ambient_chroma = None
    if domain.chroma_pairs:
        k, amb = domain.chroma_pairs[rng.integers(len(domain.chroma_pairs))]
        strength = np.asarray(k, dtype=np.float64) * strength / CHANNEL_STRENGTH
        ambient_chroma = tuple(float(c) for c in amb)
    return SubjectProfile(
        subject_id=subject_id,
        skin_level=level,
        base_rgb=tuple(float(x) for x in base),
        channel_strength=tuple(float(x) for x in strength),
        pulse_amp=float(rng.uniform(*domain.pulse_amp)),
        hr_bpm=float(rng.uniform(*domain.hr_bpm)),
        jitter_bpm=float(rng.uniform(*domain.jitter_bpm)),
        seed=int(rng.integers(2**31)),
        ambient_chroma=ambient_chroma,
    )


def gen_trial(
    profile: SubjectProfile,
    condition: Condition,
    trial_no: int,
    domain: Domain = IN_DISTRIBUTION,
    fs: float = 30.0,
    dur_s: float = 60.0,
    size: int = FRAME_SIZE,
    finger_noise_sigma: float = 1.0,
) -> tuple[Trial, float]:
    """One synchronized trial (front clip, rear clip, gold waveform) and its nominal HR."""
    rng = np.random.default_rng([profile.seed, trial_no])
    hr = profile.hr_bpm
    if condition.exercise:
        hr = min(hr + rng.uniform(25.0, 40.0), 150.0)
    bvp = gen_bvp(hr, fs, dur_s, jitter_bpm=profile.jitter_bpm, seed=int(rng.integers(2**31)))
    drift = condition.light_drift_amp + rng.uniform(*domain.light_drift_amp)
    amb_amp = condition.ambient_amp + rng.uniform(*domain.ambient_amp)
    ambient = None
    if amb_amp:
        chroma = np.array(domain.ambient_chroma[rng.integers(len(domain.ambient_chroma))])
        if profile.ambient_chroma is not None:
            chroma = np.array(profile.ambient_chroma)
        if condition.ambient_amp:
            chroma = np.array(condition.ambient_chroma)
        freqs = tuple(rng.uniform(0.8, 2.4, 2))
        ambient = Ambient(float(amb_amp), tuple(float(c) for c in chroma), freqs)
    front = gen_face_clip(
        bvp,
        skin_level=profile.skin_level,
        pulse_amp=profile.pulse_amp,
        noise_sigma=domain.noise_sigma,
        motion=condition.motion,
        light_drift_amp=drift,
        seed=int(rng.integers(2**31)),
        size=size,
        base_rgb=profile.base_rgb,
        illuminant=condition.illuminant,
        ambient=ambient,
        channel_strength=profile.channel_strength,
    )
    rear = gen_finger_clip(bvp, finger_noise_sigma, seed=int(rng.integers(2**31)))
    meta = TrialMeta(
        subject_id=profile.subject_id,
        device="other",
        lighting=condition.lighting,
        lux=condition.lux,
        motion=condition.motion,
        exercise=condition.exercise,
        skin_group=SKIN_GROUP[profile.skin_level],
        trial_no=trial_no,
        duration_s=dur_s,
        camera=CameraConfig(),
        extra={"condition": condition.name, "true_hr_bpm": hr},
    )
    return Trial(meta, front, rear=rear, gold_ppg=bvp), hr


def gen_task_suite(
    n_subjects: int,
    conditions=("led",),
    seed: int = 0,
    domain: Domain = IN_DISTRIBUTION,
    subject_prefix: str = "s",
    **trial_kwargs,
) -> tuple[TaskDataset, list]:
    """Generate ``n_subjects`` x ``len(conditions)`` trials, deterministic per seed."""
    rng = np.random.default_rng(seed)
    ds = TaskDataset()
    conds = [CONDITIONS[c] if isinstance(c, str) else c for c in conditions]
    for i in range(n_subjects):
        prof = sample_subject(rng, domain, f"{subject_prefix}{i:03d}")
        ds.profiles[prof.subject_id] = prof
        for j, cond in enumerate(conds, start=1):
            trial, hr = gen_trial(prof, cond, j, domain, **trial_kwargs)
            ds.trials.append(trial)
            ds.true_hr[trial_key(trial.meta)] = hr
    return ds, ds.trials


def save_suite(ds: TaskDataset, out_dir) -> None:
    """Persist every trial plus a ``suite.json`` manifest of ground-truth HRs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for key, trial in zip(ds.keys(), ds.trials):
        save_trial(trial, out / key)
        entries.append({"trial": key, "subject_id": trial.meta.subject_id, "true_hr_bpm": ds.true_hr[key]})
    (out / "suite.json").write_text(json.dumps({"trials": entries}, indent=2) + "\n", encoding="utf-8")
