"""Two-branch convolutional attention network with temporal shift.

The motion branch sees normalized frame differences and predicts the first
derivative of the pulse per frame; the appearance branch sees standardized raw
frames and produces soft spatial attention masks that gate the motion features.

Parameters live in a plain ``name -> tensor`` mapping (:class:`NetworkParams`)
and :func:`network_output` is a pure function of that mapping, so adaptation
code can build updated parameter sets without touching module state.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .ingest import FrameSequence
from .signalcore import SignalLengthError, Waveform, first_difference, standardize


class ConfigError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 36
    frame_depth: int = 10
    shift_fraction: float = 0.125
    conv_filters: tuple[int, int] = (32, 64)
    dense_width: int = 128
    kernel_size: int = 3
    dropout: float = 0.0
    eps: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(c) for c in self.conv_filters))
        if self.frame_depth < 2:
            raise ConfigError("frame_depth must be >= 2")
        if not 0 < self.shift_fraction <= 0.5:
            raise ConfigError("shift_fraction must lie in (0, 1/2]")
        if self.input_size < 8:
            raise ConfigError("input_size must be >= 8")
        if len(self.conv_filters) != 2 or min(self.conv_filters) < 1:
            raise ConfigError("conv_filters needs two positive stage widths")

    def to_json(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def spatial_sizes(self) -> tuple[int, int]:
        """Feature-map side after the first and second pooling stages."""
        k = self.kernel_size
        s1 = math.ceil((self.input_size - (k - 1)) / 2)
        s2 = math.ceil((s1 - (k - 1)) / 2)
        if s2 < 1:
            raise ConfigError(f"input_size {self.input_size} too small for kernel {k}")
        return s1, s2

    def param_shapes(self) -> "OrderedDict[str, tuple[int, ...]]":
        c1, c2 = self.conv_filters
        k = self.kernel_size
        _, s2 = self.spatial_sizes()
        shapes = OrderedDict()
        for branch in ("motion", "appearance"):
            shapes[f"{branch}.conv1.weight"] = (c1, 3, k, k)
            shapes[f"{branch}.conv1.bias"] = (c1,)
            shapes[f"{branch}.conv2.weight"] = (c1, c1, k, k)
            shapes[f"{branch}.conv2.bias"] = (c1,)
            shapes[f"{branch}.conv3.weight"] = (c2, c1, k, k)
            shapes[f"{branch}.conv3.bias"] = (c2,)
            shapes[f"{branch}.conv4.weight"] = (c2, c2, k, k)
            shapes[f"{branch}.conv4.bias"] = (c2,)
        shapes["attention1.weight"] = (1, c1, 1, 1)
        shapes["attention1.bias"] = (1,)
        shapes["attention2.weight"] = (1, c2, 1, 1)
        shapes["attention2.bias"] = (1,)
        shapes["dense1.weight"] = (self.dense_width, c2 * s2 * s2)
        shapes["dense1.bias"] = (self.dense_width,)
        shapes["dense2.weight"] = (1, self.dense_width)
        shapes["dense2.bias"] = (1,)
        return shapes


@dataclass(eq=False)
class NetworkParams:
    """Parameter snapshot. Treat as a value: operations return new instances."""

    config: ModelConfig
    tensors: "OrderedDict[str, torch.Tensor]" = field(repr=False)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if list(self.tensors) != list(expected):
            raise ConfigError("parameter names do not match the config layout")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigError(f"{name}: shape {tuple(self.tensors[name].shape)} != {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def clone(self) -> "NetworkParams":
        return NetworkParams(self.config, OrderedDict((k, v.detach().clone()) for k, v in self.items()))

    def to(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, OrderedDict((k, v.detach().to(dtype)) for k, v in self.items()))

    def map(self, fn, *others: "NetworkParams") -> "NetworkParams":
        return NetworkParams(
            self.config, OrderedDict((k, fn(v, *(o[k] for o in others))) for k, v in self.items())
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.detach().cpu().numpy().ravel() for v in self.tensors.values()])

    def equal(self, other: "NetworkParams") -> bool:
        return self.config == other.config and all(torch.equal(v, other[k]) for k, v in self.items())

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.tensors.values())

    def numel(self) -> int:
        return sum(v.numel() for v in self.tensors.values())


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> NetworkParams:
    """Glorot-uniform kernels, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    tensors = OrderedDict()
    for name, shape in cfg.param_shapes().items():
        if name.endswith("bias"):
            tensors[name] = torch.zeros(shape, dtype=dtype)
            continue
        receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = (torch.rand(shape, generator=gen, dtype=torch.float64) * 2 - 1).mul(limit).to(dtype)
    return NetworkParams(cfg, tensors)


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True, eq=False)
class PreprocessedClip:
    motion: np.ndarray  # T' x S x S x 3
    appearance: np.ndarray  # T' x S x S x 3
    fs: float

    def __post_init__(self):
        if self.motion.shape != self.appearance.shape:
            raise ConfigError("motion and appearance frames are not aligned")

    def __len__(self):
        return self.motion.shape[0]

    @property
    def size(self) -> int:
        return self.motion.shape[1]


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix that area-averages ``n_in`` samples into ``n_out`` bins."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(math.floor(lo)), min(int(math.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def downscale_frames(frames: np.ndarray, size: int) -> np.ndarray:
    """Area-average T x H x W x 3 frames to T x size x size x 3 (float32)."""
    _, h, w, _ = frames.shape
    mh = _area_matrix(h, size).astype(np.float32)
    mw = _area_matrix(w, size).astype(np.float32)
    return np.einsum("ih,thwc,jw->tijc", mh, frames.astype(np.float32), mw, optimize=True)


def preprocess_frames(small: np.ndarray, fs: float, cfg: ModelConfig) -> PreprocessedClip:
    """Build motion/appearance inputs from already-downscaled frames."""
    t = small.shape[0]
    n = ((t - 1) // cfg.frame_depth) * cfg.frame_depth
    if n < cfg.frame_depth:
        raise SignalLengthError(f"clip of {t} frames is shorter than frame_depth + 1 = {cfg.frame_depth + 1}")
    c = small.astype(np.float64)
    diff = (c[1:] - c[:-1]) / (c[1:] + c[:-1] + cfg.eps)
    motion = standardize(diff[:n])
    appearance = standardize(c[:n])
    return PreprocessedClip(motion.astype(np.float32), appearance.astype(np.float32), fs)


def preprocess_clip(front: FrameSequence, cfg: ModelConfig) -> PreprocessedClip:
    if len(front) < cfg.frame_depth + 1:
        raise SignalLengthError(f"clip of {len(front)} frames is shorter than frame_depth + 1")
    return preprocess_frames(downscale_frames(front.frames, cfg.input_size), front.fs, cfg)


# ---------------------------------------------------------------------------
# building blocks


def temporal_shift(features, frame_depth: int, shift_fraction: float, channel_axis: int = -1):
    """Shift channel blocks by one frame within consecutive groups of ``frame_depth`` frames.

    The first ``floor(C * shift_fraction)`` channels move one frame forward in
    time, the next block moves one frame backward, the rest stay put. Vacated
    slots are zero; nothing crosses a group boundary. Works on numpy arrays and
    torch tensors with time on axis 0.
    """
    is_torch = isinstance(features, torch.Tensor)
    x = features
    nt = x.shape[0]
    axis = channel_axis % x.ndim
    c = x.shape[axis]
    fold = int(math.floor(c * shift_fraction + 1e-9))
    if fold == 0:
        return x
    if nt % frame_depth:
        raise AlignmentError(f"{nt} frames is not a multiple of frame_depth {frame_depth}")
    g = x.reshape((nt // frame_depth, frame_depth) + tuple(x.shape[1:]))
    out = torch.zeros_like(g) if is_torch else np.zeros_like(g)
    ch = axis + 1  # channel axis in the grouped view

    def sl(channels, frames):
        idx = [slice(None)] * g.ndim
        idx[1] = frames
        idx[ch] = channels
        return tuple(idx)

    out[sl(slice(0, fold), slice(1, None))] = g[sl(slice(0, fold), slice(None, -1))]
    out[sl(slice(fold, 2 * fold), slice(None, -1))] = g[sl(slice(fold, 2 * fold), slice(1, None))]
    out[sl(slice(2 * fold, None), slice(None))] = g[sl(slice(2 * fold, None), slice(None))]
    return out.reshape(x.shape)


def _normalize_mask(gate):
    # gate: N x 1 x H x W (torch), values in (0, 1)
    h, w = gate.shape[-2:]
    return h * w * gate / (2.0 * gate.sum(dim=(-2, -1), keepdim=True))


def attention_mask(appearance_features, weight, bias=0.0) -> np.ndarray:
    """Soft spatial mask from channels-last features (T' x S x S x C).

    Logistic gate of a 1x1 projection, rescaled so each frame's mean is 1/2.
    """
    f = torch.as_tensor(np.asarray(appearance_features), dtype=torch.float64)
    w = torch.as_tensor(np.asarray(weight, dtype=np.float64).reshape(-1))
    gate = torch.sigmoid(f @ w + float(bias)).unsqueeze(1)  # T' x 1 x S x S
    return _normalize_mask(gate).squeeze(1).unsqueeze(-1).numpy()


def _conv(x, p, name, padding):
    return torch.tanh(F.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], padding=padding))


def _gate(r, p, name):
    return _normalize_mask(torch.sigmoid(F.conv2d(r, p[f"{name}.weight"], p[f"{name}.bias"])))


def network_output(tensors, motion: torch.Tensor, appearance: torch.Tensor, cfg: ModelConfig, training=False):
    """Per-frame prediction (T',) from NCHW motion/appearance tensors."""
    p = tensors
    pad = cfg.kernel_size // 2

    def shift(x):
        return temporal_shift(x, cfg.frame_depth, cfg.shift_fraction, channel_axis=1)

    def drop(x):
        return F.dropout(x, cfg.dropout, training=True) if training and cfg.dropout > 0 else x

    d = _conv(shift(motion), p, "motion.conv1", pad)
    d = _conv(shift(d), p, "motion.conv2", 0)
    r = _conv(appearance, p, "appearance.conv1", pad)
    r = _conv(r, p, "appearance.conv2", 0)
    d = drop(F.avg_pool2d(d * _gate(r, p, "attention1"), 2, ceil_mode=True))
    r = drop(F.avg_pool2d(r, 2, ceil_mode=True))

    d = _conv(shift(d), p, "motion.conv3", pad)
    d = _conv(shift(d), p, "motion.conv4", 0)
    r = _conv(r, p, "appearance.conv3", pad)
    r = _conv(r, p, "appearance.conv4", 0)
    d = drop(F.avg_pool2d(d * _gate(r, p, "attention2"), 2, ceil_mode=True))

    h = torch.tanh(F.linear(d.flatten(1), p["dense1.weight"], p["dense1.bias"]))
    return F.linear(drop(h), p["dense2.weight"], p["dense2.bias"]).squeeze(1)


def clip_tensors(clip: PreprocessedClip, dtype=torch.float32):
    def conv(a):
        return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2))).to(dtype)

    return conv(clip.motion), conv(clip.appearance)


def _check_clip(params: NetworkParams, clip: PreprocessedClip):
    cfg = params.config
    if clip.size != cfg.input_size or len(clip) % cfg.frame_depth:
        raise ConfigError(
            f"clip {clip.motion.shape} does not fit config (input_size={cfg.input_size}, frame_depth={cfg.frame_depth})"
        )


def forward(params: NetworkParams, clip: PreprocessedClip) -> Waveform:
    """Predicted pulse derivative, one sample per preprocessed frame."""
    _check_clip(params, clip)
    with torch.no_grad():
        out = network_output(params.tensors, *clip_tensors(clip, params.dtype), params.config)
    return Waveform(out.double().numpy(), clip.fs)


# ---------------------------------------------------------------------------
# objective


def prepare_label(label: Waveform, n_frames: int) -> np.ndarray:
    """Standardized first difference of ``label``, aligned to ``n_frames`` motion frames."""
    if len(label) < n_frames + 1:
        raise AlignmentError(f"label has {len(label)} samples, need {n_frames + 1} for {n_frames} frames")
    return standardize(first_difference(label).samples[:n_frames])


def loss(pred, label: Waveform) -> float:
    """Mean squared error between ``pred`` and the prepared ``label``."""
    p = pred.samples if isinstance(pred, Waveform) else np.asarray(pred, dtype=np.float64)
    target = prepare_label(label, len(p))
    return float(np.mean((p - target) ** 2))


def loss_tensor(tensors, clip_t, target: torch.Tensor, cfg: ModelConfig, training=False):
    return torch.mean((network_output(tensors, *clip_t, cfg, training=training) - target) ** 2)


class Example:
    """A preprocessed clip paired with its prepared target, cached as tensors."""

    def __init__(self, clip: PreprocessedClip, label: Waveform):
        self.clip = clip
        self.label = label
        self.target = prepare_label(label, len(clip))
        self._cache = {}

    def tensors(self, dtype):
        if dtype not in self._cache:
            self._cache[dtype] = (clip_tensors(self.clip, dtype), torch.from_numpy(self.target).to(dtype))
        return self._cache[dtype]


def loss_and_grad(params: NetworkParams, example: Example, create_graph=False):
    """Loss value and gradient mapping at ``params`` for one example."""
    cfg = params.config
    leaves = OrderedDict((k, v if create_graph else v.detach().requires_grad_(True)) for k, v in params.items())
    clip_t, target = example.tensors(params.dtype)
    value = loss_tensor(leaves, clip_t, target, cfg)
    grads = torch.autograd.grad(value, list(leaves.values()), create_graph=create_graph)
    return value, NetworkParams(cfg, OrderedDict(zip(leaves, grads)))


def grad(params: NetworkParams, clip: PreprocessedClip, label: Waveform) -> NetworkParams:
    """Gradient of ``loss(forward(params, clip), label)`` w.r.t. every parameter."""
    _check_clip(params, clip)
    _, g = loss_and_grad(params, Example(clip, label))
    return g.map(lambda t: t.detach())


# ---------------------------------------------------------------------------
# checkpoints: config.json + params.bin (float32 LE) + layout.json


def save_checkpoint(params: NetworkParams, dir_path) -> None:
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    layout, chunks, offset = OrderedDict(), [], 0
    for name, t in params.items():
        arr = t.detach().cpu().numpy().astype("<f4").ravel()
        layout[name] = {"offset": offset, "shape": list(t.shape)}
        offset += arr.size
        chunks.append(arr)
    tmp = d / "params.bin.tmp"
    tmp.write_bytes(np.concatenate(chunks).tobytes())
    tmp.replace(d / "params.bin")
    (d / "config.json").write_text(json.dumps(params.config.to_json(), indent=2, sort_keys=True) + "\n")
    (d / "layout.json").write_text(json.dumps(layout, indent=2) + "\n")


def load_checkpoint(dir_path) -> NetworkParams:
    d = Path(dir_path)
    for name in ("config.json", "params.bin", "layout.json"):
        if not (d / name).is_file():
            raise ConfigError(f"checkpoint {d} is missing {name}")
    cfg = ModelConfig.from_json(json.loads((d / "config.json").read_text()))
    layout = json.loads((d / "layout.json").read_text(), object_pairs_hook=OrderedDict)
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f4")
    tensors = OrderedDict()
    for name in cfg.param_shapes():
        if name not in layout:
            raise ConfigError(f"layout.json has no entry for {name}")
        shape = tuple(layout[name]["shape"])
        off = layout[name]["offset"]
        size = int(np.prod(shape))
        tensors[name] = torch.from_numpy(flat[off : off + size].astype(np.float32).reshape(shape))
    return NetworkParams(cfg, tensors)
