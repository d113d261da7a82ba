"""Trial data model, frame decoding, stream synchronization and dataset persistence.

On-disk trial layout::

    meta.json               TrialMeta fields (plus any unknown keys, kept verbatim)
    front_frames.bin        b"MPFS" + u32 T, H, W (little-endian) + T*H*W*3 uint8
    front_timestamps.csv    header ``t_s``, one timestamp per frame
    rear_frames.bin         optional, same format
    rear_timestamps.csv     optional
    finger_ppg.csv          optional waveform (``t_s,value``)
    gold_ppg.csv            optional waveform
"""

from __future__ import annotations

import json
import math
import os
import shutil
import struct
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from .signalcore import Waveform, read_waveform_csv, write_waveform_csv

DEVICES = ("xiaomi8", "iphone11", "other")
LIGHTING = ("natural", "incandescent", "led")
LUX = (220, 110, 55, "unknown")
MOTIONS = ("stationary", "yaw", "talking", "random")
SKIN_GROUPS = ("I+II", "III+IV", "V+VI")

FRAME_MAGIC = b"MPFS"
TARGET_FS = 30.0


class TrialSchemaError(ValueError):
    """A trial directory or metadata record is malformed."""


class SyncError(ValueError):
    pass


def _check_enum(name, value, allowed):
    if value not in allowed:
        raise TrialSchemaError(f"{name}={value!r} not one of {allowed}")


@dataclass(frozen=True)
class CameraConfig:
    awb: bool = True
    exposure_time: float = 1 / 60
    sensitivity: int = 100

    def __post_init__(self):
        if not self.exposure_time > 0 or not self.sensitivity > 0:
            raise TrialSchemaError("exposure_time and sensitivity must be positive")


@dataclass(frozen=True)
class TrialMeta:
    subject_id: str
    device: str = "other"
    lighting: str = "natural"
    lux: int | str = "unknown"
    motion: str = "stationary"
    exercise: bool = False
    skin_group: str = "I+II"
    trial_no: int = 1
    duration_s: float = 60.0
    camera: CameraConfig = field(default_factory=CameraConfig)
    extra: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        _check_enum("device", self.device, DEVICES)
        _check_enum("lighting", self.lighting, LIGHTING)
        _check_enum("lux", self.lux, LUX)
        _check_enum("motion", self.motion, MOTIONS)
        _check_enum("skin_group", self.skin_group, SKIN_GROUPS)
        if not self.duration_s > 0:
            raise TrialSchemaError("duration_s must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        return {**extra, **d}

    @classmethod
    def from_json(cls, d: dict) -> "TrialMeta":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__ if f != "extra"}
        missing = {"subject_id"} - d.keys()
        if missing:
            raise TrialSchemaError(f"meta.json missing keys {sorted(missing)}")
        kwargs = {k: d.pop(k) for k in list(d) if k in known}
        if "camera" in kwargs:
            kwargs["camera"] = CameraConfig(**kwargs["camera"])
        return cls(**kwargs, extra=d)


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """T x H x W x 3 uint8 frames with per-frame timestamps (s)."""

    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        ts = np.array(self.timestamps, dtype=np.float64)
        if frames.dtype != np.uint8 or frames.ndim != 4 or frames.shape[-1] != 3:
            raise TrialSchemaError(f"frames must be uint8 T x H x W x 3, got {frames.dtype} {frames.shape}")
        if frames.shape[0] < 2 or ts.shape != (frames.shape[0],):
            raise TrialSchemaError("need >= 2 frames and one timestamp per frame")
        if not np.all(np.diff(ts) > 0):
            raise TrialSchemaError("timestamps must be strictly increasing")
        frames.setflags(write=False)
        ts.setflags(write=False)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return self.frames.shape[0]

    def __eq__(self, other):
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return np.array_equal(self.frames, other.frames) and np.array_equal(self.timestamps, other.timestamps)

    @property
    def fs(self) -> float:
        return float((len(self) - 1) / (self.timestamps[-1] - self.timestamps[0]))

    @property
    def start_time(self) -> float:
        return float(self.timestamps[0])

    @property
    def end_time(self) -> float:
        return float(self.timestamps[-1])

    def slice_seconds(self, start_s: float, stop_s: float) -> "FrameSequence":
        """Frames with ``start_time + start_s <= t < start_time + stop_s``."""
        t = self.timestamps - self.timestamps[0]
        # tolerance keeps grid-aligned boundaries stable under float rounding
        sel = (t >= start_s - 1e-9) & (t < stop_s - 1e-9)
        return FrameSequence(self.frames[sel], self.timestamps[sel])


@dataclass(frozen=True, eq=False)
class Trial:
    meta: TrialMeta
    front: FrameSequence
    rear: FrameSequence | None = None
    finger_ppg: Waveform | None = None
    gold_ppg: Waveform | None = None

    def __post_init__(self):
        if self.rear is None and self.finger_ppg is None:
            raise TrialSchemaError("trial needs a rear stream or a pre-extracted finger_ppg")

    def __eq__(self, other):
        if not isinstance(other, Trial):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.meta.extra == other.meta.extra
            and self.front == other.front
            and self.rear == other.rear
            and self.finger_ppg == other.finger_ppg
            and self.gold_ppg == other.gold_ppg
        )

    def streams(self) -> dict:
        return {
            k: v
            for k, v in (("front", self.front), ("rear", self.rear), ("finger_ppg", self.finger_ppg), ("gold_ppg", self.gold_ppg))
            if v is not None
        }

    def overlap(self) -> tuple[float, float]:
        spans = [_span(s) for s in self.streams().values()]
        return max(s[0] for s in spans), min(s[1] for s in spans)

    def validate(self) -> None:
        """Check that all streams overlap for nearly the whole trial."""
        lo, hi = self.overlap()
        if hi - lo < self.meta.duration_s - 2.0:
            raise TrialSchemaError(
                f"streams overlap for {hi - lo:.2f} s, expected >= {self.meta.duration_s - 2.0:.2f} s"
            )


def _span(stream) -> tuple[float, float]:
    return stream.start_time, stream.end_time


# ---------------------------------------------------------------------------
# decoding and spatial averaging


def decode_argb(packed):
    """Split Android ARGB color integers into (A, R, G, B) uint8 arrays."""
    p = np.asarray(packed).astype(np.uint32)
    return (
        ((p >> 24) & 0xFF).astype(np.uint8),
        ((p >> 16) & 0xFF).astype(np.uint8),
        ((p >> 8) & 0xFF).astype(np.uint8),
        (p & 0xFF).astype(np.uint8),
    )


def pack_argb(a, r, g, b) -> np.ndarray:
    a, r, g, b = (np.asarray(c).astype(np.uint32) for c in (a, r, g, b))
    return (a << 24) | (r << 16) | (g << 8) | b


def frames_from_argb(packed: np.ndarray, timestamps) -> FrameSequence:
    """Build a FrameSequence from T x H x W packed ARGB pixels (alpha dropped)."""
    _, r, g, b = decode_argb(packed)
    return FrameSequence(np.stack([r, g, b], axis=-1), timestamps)


CHANNELS = {"R": 0, "G": 1, "B": 2}


def spatial_mean_channel(fs: FrameSequence, channel: str = "R") -> Waveform:
    """Per-frame mean of one colour channel over the whole frame."""
    if channel not in CHANNELS:
        raise ValueError(f"channel must be one of {tuple(CHANNELS)}, got {channel!r}")
    chan = fs.frames[..., CHANNELS[channel]]
    means = chan.reshape(len(fs), -1).mean(axis=1, dtype=np.float64)
    return Waveform(means, fs.fs, fs.start_time)


# ---------------------------------------------------------------------------
# synchronization


def _grid(start: float, end: float, fs: float) -> np.ndarray:
    n = int(math.floor((end - start) * fs + 1e-9)) + 1
    return start + np.arange(n) / fs


def _nearest_frames(seq: FrameSequence, times: np.ndarray) -> FrameSequence:
    ts = seq.timestamps
    idx = np.clip(np.searchsorted(ts, times), 1, len(ts) - 1)
    left, right = ts[idx - 1], ts[idx]
    idx = np.where(times - left <= right - times, idx - 1, idx)
    return FrameSequence(seq.frames[idx], times)


def synchronize(trial: Trial, trigger_time: float, fs: float = TARGET_FS) -> Trial:
    """Crop every stream to the common overlap starting at ``trigger_time``
    and resample onto one uniform grid.

    Frames are picked by nearest timestamp; waveforms are interpolated linearly.
    Clock offsets are assumed constant and already folded into the timestamps.
    """
    streams = trial.streams()
    for name, s in streams.items():
        lo, hi = _span(s)
        if not lo - 1e-9 <= trigger_time <= hi + 1e-9:
            raise SyncError(f"trigger {trigger_time} outside {name} span [{lo}, {hi}]")
    end = min(_span(s)[1] for s in streams.values())
    if end - trigger_time < 1.0 / fs:
        raise SyncError("streams have no common overlap after the trigger")
    times = _grid(trigger_time, end, fs)
    out = {}
    for name, s in streams.items():
        if isinstance(s, FrameSequence):
            out[name] = _nearest_frames(s, times)
        else:
            out[name] = Waveform(np.interp(times, s.times, s.samples), fs, float(times[0]))
    return replace(trial, **out)


# ---------------------------------------------------------------------------
# persistence


def write_frames_bin(seq: FrameSequence, path) -> None:
    t, h, w, _ = seq.frames.shape
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC + struct.pack("<III", t, h, w))
        fh.write(np.ascontiguousarray(seq.frames).tobytes())


def read_frames_bin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != FRAME_MAGIC:
            raise TrialSchemaError(f"{Path(path).name}: bad frame header")
        t, h, w = struct.unpack("<III", head[4:])
        data = fh.read()
    if len(data) != t * h * w * 3:
        raise TrialSchemaError(f"{Path(path).name}: expected {t * h * w * 3} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(t, h, w, 3).copy()


def _write_timestamps(ts: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_s\n")
        fh.writelines(f"{float(t)!r}\n" for t in ts)


def _read_timestamps(path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != "t_s":
        raise TrialSchemaError(f"{Path(path).name}: expected header 't_s'")
    return np.array([float(x) for x in lines[1:] if x.strip()])


def save_trial(trial: Trial, dir_path) -> None:
    """Write ``trial`` to ``dir_path`` atomically (build in a temp dir, then rename)."""
    dest = Path(dir_path)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{dest.name}.", dir=dest.parent))
    try:
        meta = trial.meta.to_json()
        # exact rate/start so waveforms round-trip bit-for-bit
        meta["streams"] = {
            name: {"fs": w.fs, "start_time": w.start_time}
            for name, w in (("finger_ppg", trial.finger_ppg), ("gold_ppg", trial.gold_ppg))
            if w is not None
        }
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        for name in ("front", "rear"):
            seq = getattr(trial, name)
            if seq is not None:
                write_frames_bin(seq, tmp / f"{name}_frames.bin")
                _write_timestamps(seq.timestamps, tmp / f"{name}_timestamps.csv")
        for name in ("finger_ppg", "gold_ppg"):
            w = getattr(trial, name)
            if w is not None:
                write_waveform_csv(w, tmp / f"{name}.csv")
        old = None
        if dest.exists():
            old = dest.with_name(f".{dest.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(dest, old)
        os.replace(tmp, dest)
        if old is not None:
            shutil.rmtree(old)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _require(path: Path) -> Path:
    if not path.is_file():
        raise TrialSchemaError(f"missing required file {path.name} in {path.parent}")
    return path


def load_trial(dir_path) -> Trial:
    d = Path(dir_path)
    try:
        raw = json.loads(_require(d / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise TrialSchemaError(f"meta.json is not valid JSON: {exc}") from exc
    streams = raw.pop("streams", {})
    meta = TrialMeta.from_json(raw)

    def frames(name):
        fpath = d / f"{name}_frames.bin"
        if name != "front" and not fpath.exists():
            return None
        arr = read_frames_bin(_require(fpath))
        ts = _read_timestamps(_require(d / f"{name}_timestamps.csv"))
        return FrameSequence(arr, ts)

    def wave(name):
        path = d / f"{name}.csv"
        if not path.exists():
            return None
        info = streams.get(name, {})
        return read_waveform_csv(path, fs=info.get("fs"), start_time=info.get("start_time"))

    return Trial(meta, frames("front"), frames("rear"), wave("finger_ppg"), wave("gold_ppg"))
