"""Few-shot personalization by gradient-based meta-learning.

Inner loop: plain gradient descent on a task's support loss.
Outer loop: Adam on the sum of post-adaptation query losses.
Also holds supervised pretraining and the fine-tuning baseline, which share
the same task construction.
"""

from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .ingest import FrameSequence, Trial, TrialMeta
from .labelgen import extract_finger_ppg
from .model import (
    Example,
    ModelConfig,
    NetworkParams,
    downscale_frames,
    loss_tensor,
    preprocess_frames,
    save_checkpoint,
)
from .posbaseline import RgbTrace, pos_pulse
from .signalcore import SignalLengthError, Waveform, bandpass

log = logging.getLogger(__name__)

LABEL_SOURCES = ("finger", "gold", "pos")


class DivergenceError(RuntimeError):
    """Non-finite loss. ``last_params`` holds the last finite parameters, if any."""

    def __init__(self, msg, last_params=None):
        super().__init__(msg)
        self.last_params = last_params


class MissingLabelSourceError(ValueError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.003
    outer_lr: float = 0.001
    support_s: float = 18.0
    inner_steps: int = 1
    epochs: int = 10
    first_order: bool = True
    task_batch: int = 4
    seed: int = 0
    label_bandpass: bool = True

    def __post_init__(self):
        if not self.inner_lr >= 0 or not self.outer_lr > 0:
            raise ValueError("learning rates must be positive")
        if self.inner_steps < 0 or self.epochs < 0 or self.task_batch < 1:
            raise ValueError("inner_steps/epochs must be >= 0 and task_batch >= 1")

    @classmethod
    def from_json(cls, d: dict) -> "MetaConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown MetaConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TaskData:
    support: Example
    query: Example
    source_trial: TrialMeta | None = None
    task_id: str = ""


# ---------------------------------------------------------------------------
# building examples from trials


class TrialView:
    """A trial with its front frames downscaled once, for repeated segmenting.

    Only the downscaled front frames are kept; area averaging preserves the
    per-frame spatial mean, so POS traces can be taken from them.
    """

    def __init__(self, trial: Trial, size: int):
        self.meta = trial.meta
        self.timestamps = trial.front.timestamps
        self.fs = trial.front.fs
        self.rear = trial.rear
        self.finger_ppg = trial.finger_ppg
        self.gold_ppg = trial.gold_ppg
        self.small = downscale_frames(trial.front.frames, size)

    def __len__(self):
        return len(self.timestamps)

    @property
    def duration(self) -> float:
        return len(self) / self.fs

    def indices(self, start_s: float, stop_s: float | None) -> slice:
        i0 = int(round(start_s * self.fs))
        i1 = len(self) if stop_s is None else min(int(round(stop_s * self.fs)), len(self))
        return slice(i0, i1)


def _label_on(times: np.ndarray, w: Waveform, fs: float) -> Waveform:
    return Waveform(np.interp(times, w.times, w.samples), fs, float(times[0]))


def segment_label(view: TrialView, sl: slice, source: str, bandpass_label: bool) -> Waveform:
    """Label waveform sampled on the front frames of ``sl``."""
    times = view.timestamps[sl]
    fs = view.fs
    if source == "finger":
        if view.rear is not None:
            t0, t1 = times[0], times[-1]
            ts = view.rear.timestamps
            sel = (ts >= t0 - 0.5 / fs) & (ts <= t1 + 0.5 / fs)
            rear = FrameSequence(view.rear.frames[sel], ts[sel])
            label = _label_on(times, extract_finger_ppg(rear), fs)
        elif view.finger_ppg is not None:
            label = _label_on(times, view.finger_ppg, fs)
        else:
            raise MissingLabelSourceError("trial has neither a rear stream nor finger_ppg to derive labels from")
    elif source == "gold":
        if view.gold_ppg is None:
            raise MissingLabelSourceError("trial has no gold_ppg")
        label = _label_on(times, view.gold_ppg, fs)
    elif source == "pos":
        rgb = view.small[sl].reshape(len(times), -1, 3).mean(axis=1, dtype=np.float64)
        label = pos_pulse(RgbTrace(rgb, fs, float(times[0])))
    else:
        raise ValueError(f"label source must be one of {LABEL_SOURCES}, got {source!r}")
    return bandpass(label) if bandpass_label else label


def make_example(
    view: TrialView, cfg: ModelConfig, start_s: float, stop_s: float | None, source: str, bandpass_label: bool = True
) -> Example:
    sl = view.indices(start_s, stop_s)
    clip = preprocess_frames(view.small[sl], view.fs, cfg)
    return Example(clip, segment_label(view, sl, source, bandpass_label))


def make_task(
    view: TrialView, cfg: ModelConfig, meta_cfg: MetaConfig, source: str = "finger", task_id: str = ""
) -> TaskData:
    """Support = first ``support_s`` seconds, query = the rest of the trial."""
    if view.duration < meta_cfg.support_s + (cfg.frame_depth + 1) / view.fs:
        raise SignalLengthError(f"trial of {view.duration:.1f} s leaves no query data after the support window")
    s = meta_cfg.support_s
    return TaskData(
        support=make_example(view, cfg, 0.0, s, source, meta_cfg.label_bandpass),
        query=make_example(view, cfg, s, None, source, meta_cfg.label_bandpass),
        source_trial=view.meta,
        task_id=task_id or f"{view.meta.subject_id}_t{view.meta.trial_no:02d}",
    )


def support_example(trial: Trial | TrialView, cfg: ModelConfig, meta_cfg: MetaConfig, source: str) -> Example:
    view = trial if isinstance(trial, TrialView) else TrialView(trial, cfg.input_size)
    if view.duration + 1e-9 < meta_cfg.support_s:
        raise SignalLengthError(f"support needs {meta_cfg.support_s} s of video, trial has {view.duration:.2f} s")
    if meta_cfg.support_s * view.fs < cfg.frame_depth + 1:
        raise SignalLengthError("support window shorter than frame_depth + 1 frames")
    return make_example(view, cfg, 0.0, meta_cfg.support_s, source, meta_cfg.label_bandpass)


# ---------------------------------------------------------------------------
# generic parameter handling: NetworkParams or a plain name -> tensor mapping

LossFn = Callable[[dict, object], torch.Tensor]


def network_loss(tensors, example: Example, cfg: ModelConfig):
    dtype = next(iter(tensors.values())).dtype
    clip_t, target = example.tensors(dtype)
    return loss_tensor(tensors, clip_t, target, cfg)


def _unpack(params):
    if isinstance(params, NetworkParams):
        cfg = params.config
        return OrderedDict(params.items()), (lambda t, ex: network_loss(t, ex, cfg)), cfg
    return OrderedDict(params.items()), None, None


def _repack(like, tensors):
    if isinstance(like, NetworkParams):
        return NetworkParams(like.config, OrderedDict(tensors))
    return OrderedDict(tensors)


def _check_finite(value, what, last=None):
    if not torch.isfinite(value):
        raise DivergenceError(f"non-finite {what} ({value.detach().item()})", last)


def _adapt_tensors(tensors, support, loss_fn, alpha, steps, create_graph):
    cur = tensors
    for _ in range(steps):
        if create_graph:
            leaves = cur
        else:
            leaves = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in cur.items())
        value = loss_fn(leaves, support)
        _check_finite(value, "support loss")
        grads = torch.autograd.grad(value, list(leaves.values()), create_graph=create_graph)
        cur = OrderedDict((k, v - alpha * g) for (k, v), g in zip(leaves.items(), grads))
        if not create_graph:
            cur = OrderedDict((k, v.detach()) for k, v in cur.items())
    return cur


def adapt(theta, support, alpha: float, inner_steps: int = 1, loss_fn: LossFn | None = None):
    """Return ``theta`` after ``inner_steps`` plain gradient steps on the support loss.

    ``theta`` itself is never modified.
    """
    tensors, default_fn, _ = _unpack(theta)
    fn = loss_fn or default_fn
    if fn is None:
        raise ValueError("loss_fn required for plain parameter mappings")
    tensors = OrderedDict((k, v.detach().clone()) for k, v in tensors.items())
    return _repack(theta, _adapt_tensors(tensors, support, fn, alpha, inner_steps, create_graph=False))


@dataclass
class TaskLosses:
    task_id: str
    support_loss: float
    query_loss: float


def meta_gradient(theta, tasks: Sequence[TaskData], cfg: MetaConfig, loss_fn: LossFn | None = None):
    """Sum over tasks of the query-loss gradient after inner adaptation.

    First-order mode evaluates each query gradient at the adapted parameters and
    treats them as constant w.r.t. ``theta``; otherwise it differentiates through
    the inner updates.
    """
    if not tasks:
        raise ValueError("meta step needs at least one task")
    tensors, default_fn, _ = _unpack(theta)
    fn = loss_fn or default_fn
    total = OrderedDict((k, torch.zeros_like(v)) for k, v in tensors.items())
    stats = []
    for task in tasks:
        if cfg.first_order:
            with torch.no_grad():
                s_loss = float(fn(tensors, task.support))
            adapted = _adapt_tensors(
                OrderedDict((k, v.detach()) for k, v in tensors.items()),
                task.support, fn, cfg.inner_lr, cfg.inner_steps, create_graph=False,
            )
            leaves = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in adapted.items())
            q = fn(leaves, task.query)
            _check_finite(q, "query loss")
            grads = torch.autograd.grad(q, list(leaves.values()))
        else:
            leaves = OrderedDict((k, v.detach().requires_grad_(True)) for k, v in tensors.items())
            s_loss = fn(leaves, task.support).detach().item()
            adapted = _adapt_tensors(leaves, task.support, fn, cfg.inner_lr, cfg.inner_steps, create_graph=True)
            q = fn(adapted, task.query)
            _check_finite(q, "query loss")
            grads = torch.autograd.grad(q, list(leaves.values()))
        for k, g in zip(total, grads):
            total[k] += g.detach()
        stats.append(TaskLosses(task.task_id, s_loss, q.detach().item()))
    return _repack(theta, total), stats


class OuterOptimizer:
    """Adam over a parameter snapshot; keeps moment state between meta steps."""

    def __init__(self, theta, lr: float):
        tensors, _, _ = _unpack(theta)
        self._leaves = OrderedDict((k, v.detach().clone()) for k, v in tensors.items())
        self._adam = torch.optim.Adam(list(self._leaves.values()), lr=lr)

    def step(self, theta, grads):
        tensors, _, _ = _unpack(theta)
        g_tensors, _, _ = _unpack(grads)
        with torch.no_grad():
            for k, v in self._leaves.items():
                v.copy_(tensors[k])
                v.grad = g_tensors[k].detach().to(v.dtype).clone()
        self._adam.step()
        return _repack(theta, OrderedDict((k, v.detach().clone()) for k, v in self._leaves.items()))


def meta_step(theta, tasks, cfg: MetaConfig, optimizer: OuterOptimizer | None = None, loss_fn=None):
    """One outer update; returns (new theta, per-task losses)."""
    optimizer = optimizer or OuterOptimizer(theta, cfg.outer_lr)
    g, stats = meta_gradient(theta, tasks, cfg, loss_fn)
    return optimizer.step(theta, g), stats


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)  # (epoch, task_id, support_loss, query_loss)

    def epoch_mean(self, epoch: int, column: str = "query_loss") -> float:
        idx = {"support_loss": 2, "query_loss": 3}[column]
        vals = [r[idx] for r in self.rows if r[0] == epoch]
        return float(np.mean(vals)) if vals else math.nan


def _write_telemetry(path, rows, header=False):
    with open(path, "a" if not header else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(["epoch", "task_id", "support_loss", "query_loss"])
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3])])


def evaluate_tasks(theta, tasks, cfg: MetaConfig, loss_fn=None) -> list[TaskLosses]:
    """Support loss at ``theta`` and query loss after adaptation, without updating."""
    tensors, default_fn, _ = _unpack(theta)
    fn = loss_fn or default_fn
    out = []
    for task in tasks:
        with torch.no_grad():
            s = float(fn(tensors, task.support))
        adapted = _adapt_tensors(OrderedDict(tensors), task.support, fn, cfg.inner_lr, cfg.inner_steps, False)
        with torch.no_grad():
            q = float(fn(adapted, task.query))
        out.append(TaskLosses(task.task_id, s, q))
    return out


def meta_train(theta0, tasks: Sequence[TaskData], cfg: MetaConfig, telemetry=None, checkpoint_dir=None, loss_fn=None):
    """``cfg.epochs`` passes of shuffled task batches through :func:`meta_step`.

    Epoch 0 in the history is an evaluation of ``theta0``. On divergence the
    raised :class:`DivergenceError` carries the last finite parameters.
    """
    if len(tasks) < 2:
        raise ValueError("meta-training needs at least 2 tasks")
    history = TrainHistory()
    theta = theta0
    try:
        initial = evaluate_tasks(theta, tasks, cfg, loss_fn)
    except DivergenceError as exc:
        raise DivergenceError(str(exc), theta0) from exc
    history.rows += [(0, s.task_id, s.support_loss, s.query_loss) for s in initial]
    if telemetry is not None:
        _write_telemetry(telemetry, history.rows, header=True)
    if cfg.epochs == 0:
        return theta0, history
    optimizer = OuterOptimizer(theta, cfg.outer_lr)
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tasks))
        epoch_rows = []
        for b in range(0, len(order), cfg.task_batch):
            batch = [tasks[i] for i in order[b : b + cfg.task_batch]]
            try:
                theta, stats = meta_step(theta, batch, cfg, optimizer, loss_fn)
            except DivergenceError as exc:
                raise DivergenceError(str(exc), theta) from exc
            epoch_rows += [(epoch, s.task_id, s.support_loss, s.query_loss) for s in stats]
        history.rows += epoch_rows
        if telemetry is not None:
            _write_telemetry(telemetry, epoch_rows)
        if checkpoint_dir is not None and isinstance(theta, NetworkParams):
            save_checkpoint(theta, Path(checkpoint_dir) / f"epoch_{epoch:02d}")
        log.info("meta epoch %d: query loss %.4f", epoch, history.epoch_mean(epoch))
    return theta, history


# ---------------------------------------------------------------------------
# supervised training (backbone pretraining)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 8
    lr: float = 1e-3
    segment_s: float = 20.0
    batch: int = 1
    seed: int = 0
    label_source: str = "gold"

    def __post_init__(self):
        if self.epochs < 0 or not self.lr > 0 or not self.segment_s > 0 or self.batch < 1:
            raise ValueError("pretrain needs epochs >= 0, lr > 0, segment_s > 0, batch >= 1")
        if self.label_source not in LABEL_SOURCES:
            raise ValueError(f"label_source must be one of {LABEL_SOURCES}")

    @classmethod
    def from_json(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown PretrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


def train_supervised(
    theta: NetworkParams, examples: Sequence[Example], epochs: int, lr: float = 1e-3, seed: int = 0, batch: int = 1
) -> tuple[NetworkParams, list[float]]:
    """Adam on the mean example loss; returns final params and per-epoch mean losses."""
    if epochs == 0 or not examples:
        return theta, []
    cfg = theta.config
    leaves = OrderedDict((k, v.detach().clone().requires_grad_(True)) for k, v in theta.items())
    opt = torch.optim.Adam(list(leaves.values()), lr=lr)
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(examples))
        losses = []
        for b in range(0, len(order), batch):
            opt.zero_grad()
            chunk = [examples[i] for i in order[b : b + batch]]
            value = sum(network_loss(leaves, ex, cfg) for ex in chunk) / len(chunk)
            _check_finite(value, "training loss")
            value.backward()
            opt.step()
            losses.append(value.detach().item())
        curve.append(float(np.mean(losses)))
        log.info("supervised epoch %d: loss %.4f", epoch + 1, curve[-1])
    return NetworkParams(cfg, OrderedDict((k, v.detach().clone()) for k, v in leaves.items())), curve


def segment_examples(view: TrialView, cfg: ModelConfig, segment_s: float, source: str = "gold", bandpass_label=True):
    """Split a trial into consecutive ``segment_s`` second training examples."""
    out = []
    start = 0.0
    while start + segment_s <= view.duration + 1e-9:
        out.append(make_example(view, cfg, start, start + segment_s, source, bandpass_label))
        start += segment_s
    return out


def pretrain(theta0: NetworkParams, views: Sequence[TrialView], pcfg: PretrainConfig, bandpass_label: bool = True):
    """Supervised backbone training on fixed-length segments of every trial."""
    cfg = theta0.config
    examples = [e for v in views for e in segment_examples(v, cfg, pcfg.segment_s, pcfg.label_source, bandpass_label)]
    if not examples:
        raise SignalLengthError(f"no trial is at least {pcfg.segment_s} s long")
    return train_supervised(theta0, examples, pcfg.epochs, pcfg.lr, pcfg.seed, pcfg.batch)


# ---------------------------------------------------------------------------
# test-time entry points


def personalize(theta_star: NetworkParams, trial: Trial | TrialView, cfg: MetaConfig, label_source: str = "finger"):
    """Adapt to one trial from its first ``support_s`` seconds.

    Labels come from the rear camera by default; ``label_source="pos"`` gives
    the POS pseudo-label variant.
    """
    support = support_example(trial, theta_star.config, cfg, label_source)
    return adapt(theta_star, support, cfg.inner_lr, cfg.inner_steps)


def finetune_baseline(
    theta_sup: NetworkParams, trial: Trial | TrialView, steps: int, lr: float, cfg: MetaConfig | None = None,
    label_source: str = "gold",
):
    """Plain supervised gradient steps on the same support window."""
    cfg = cfg or MetaConfig()
    if steps == 0:
        return theta_sup.clone()
    support = support_example(trial, theta_sup.config, cfg, label_source)
    return adapt(theta_sup, support, lr, steps)
