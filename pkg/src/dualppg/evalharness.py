"""Heart-rate metrics, the per-trial evaluation protocol and grouped reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .ingest import Trial
from .model import NetworkParams, preprocess_frames
from .meta import TrialView
from .signalcore import (
    SignalError,
    SignalLengthError,
    UndefinedCorrelationError,
    Waveform,
    bandpass,
    cumulative_sum,
    estimate_hr,
    pearson,
    power_spectrum,
)

METHODS = ("mobilephys", "tscan", "metaphys")
CONDITION_FIELDS = ("device", "lighting", "lux", "motion", "exercise", "skin_group")
REPORT_COLUMNS = ("method",) + CONDITION_FIELDS + ("mae_bpm", "snr_db", "rho")

SNR_BAND = (30.0, 240.0)
SNR_CAP_DB = 60.0


class TemplateError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


def mae_hr(gold, pred) -> float:
    gold = np.asarray(gold, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gold.shape != pred.shape or gold.size == 0:
        raise ValueError(f"MAE needs equal non-empty arrays, got {gold.shape} and {pred.shape}")
    return float(np.mean(np.abs(gold - pred)))


@dataclass(frozen=True)
class SnrTemplate:
    gold_hr: float
    band: tuple[float, float] = SNR_BAND
    fundamental_halfwidth: float = 6.0
    harmonic_halfwidth: float = 12.0

    def __post_init__(self):
        if not self.band[0] <= self.gold_hr <= self.band[1]:
            raise TemplateError(f"gold HR {self.gold_hr} BPM outside {self.band}")

    def mask(self, freqs_bpm: np.ndarray) -> np.ndarray:
        f = freqs_bpm
        hr = self.gold_hr
        fund = np.abs(f - hr) <= self.fundamental_halfwidth
        harm = np.abs(f - 2 * hr) <= self.harmonic_halfwidth
        return fund | harm


def snr_db(pred: Waveform, gold_hr: float, resolution_bpm: float = 0.5) -> float:
    """Template SNR: energy at the gold HR and its first harmonic vs. the rest of 30-240 BPM."""
    template = SnrTemplate(gold_hr)
    spec = power_spectrum(pred, resolution_bpm).band(*template.band)
    if spec.freqs_bpm.size == 0:
        raise SignalLengthError("spectrum does not cover the SNR band")
    amp = np.sqrt(spec.power)
    u = template.mask(spec.freqs_bpm)
    signal_energy = np.sum((u * amp) ** 2)
    noise_energy = np.sum(((1 - u) * amp) ** 2)
    if noise_energy <= np.finfo(float).tiny:
        return SNR_CAP_DB if signal_energy > 0 else -SNR_CAP_DB
    if signal_energy <= np.finfo(float).tiny:
        return -SNR_CAP_DB
    return float(np.clip(10 * np.log10(signal_energy / noise_energy), -SNR_CAP_DB, SNR_CAP_DB))


@dataclass(frozen=True)
class MetricsRow:
    method: str
    device: str
    lighting: str
    lux: int | str
    motion: str
    exercise: bool
    skin_group: str
    mae: float
    snr: float
    rho: float
    subject_id: str = ""
    trial_no: int = 0
    gold_hrs: tuple = field(default=(), compare=False)
    pred_hrs: tuple = field(default=(), compare=False)
    valid: bool = True

    def condition(self, name):
        return getattr(self, name)


def windows(n: int, fs: float, window_s: float, hop_s: float) -> list[slice]:
    """Start at 0 and advance by ``hop_s``; a final window is aligned to the end
    when the regular ones leave a tail uncovered."""
    w = int(round(window_s * fs))
    h = int(round(hop_s * fs))
    if n < w:
        return []
    out = [slice(s, s + w) for s in range(0, n - w + 1, h)]
    if out[-1].stop < n:
        out.append(slice(n - w, n))
    return out


def prediction_signal(pred: Waveform, integrate: bool = False) -> Waveform:
    """Band-passed network output used for HR and SNR."""
    return bandpass(cumulative_sum(pred) if integrate else pred)


def _meta_fields(m) -> dict:
    return dict(
        device=m.device, lighting=m.lighting, lux=m.lux, motion=m.motion, exercise=m.exercise,
        skin_group=m.skin_group, subject_id=m.subject_id, trial_no=m.trial_no,
    )


def reference_waveform(trial) -> Waveform:
    """Gold PPG when recorded, otherwise the finger pseudo label."""
    if trial.gold_ppg is not None:
        return trial.gold_ppg
    if trial.finger_ppg is not None:
        return trial.finger_ppg
    from .labelgen import extract_finger_ppg

    return extract_finger_ppg(trial.rear)


def score_prediction(
    pred: Waveform, reference: Waveform, window_s: float = 30.0, hop_s: float = 15.0, integrate: bool = False
):
    """Window HRs, MAE, SNR and per-window Pearson for a prediction aligned in time with ``reference``.

    ``pred.start_time`` must sit on the reference clock. Returns
    (mae, snr, rho, gold_hrs, pred_hrs); rho is NaN with a single window
    or constant HR sequences.
    """
    sig = prediction_signal(pred, integrate)
    t = sig.times
    ref = Waveform(np.interp(t, reference.times, reference.samples), sig.fs, sig.start_time)
    gold_hrs, pred_hrs = [], []
    for sl in windows(len(sig), sig.fs, window_s, hop_s):
        gold_hrs.append(estimate_hr(Waveform(ref.samples[sl], ref.fs)))
        pred_hrs.append(estimate_hr(Waveform(sig.samples[sl], sig.fs), filtered=False))
    if not gold_hrs:
        raise ProtocolError(f"prediction of {sig.duration:.1f} s is shorter than one {window_s} s window")
    gold_full = estimate_hr(ref)
    mae = mae_hr(gold_hrs, pred_hrs)
    snr = snr_db(sig, gold_full)
    rho = math.nan
    if len(gold_hrs) >= 2:
        try:
            rho = pearson(gold_hrs, pred_hrs)
        except UndefinedCorrelationError:
            pass
    return mae, snr, rho, tuple(gold_hrs), tuple(pred_hrs)


def evaluate_trial(
    params: NetworkParams,
    trial: Trial | TrialView,
    skip_s: float = 18.0,
    window_s: float = 30.0,
    hop_s: float = 15.0,
    method: str = "mobilephys",
    integrate: bool = False,
) -> MetricsRow:
    """Predict on everything after ``skip_s`` and score it against the trial's reference.

    A prediction with no usable spectral peak yields a row with ``valid=False``
    and NaN metrics.
    """
    view = trial if isinstance(trial, TrialView) else TrialView(trial, params.config.input_size)
    if view.duration <= skip_s + window_s:
        raise ProtocolError(f"trial of {view.duration:.1f} s too short for skip {skip_s} s + window {window_s} s")
    from .model import forward

    sl = view.indices(skip_s, None)
    clip = preprocess_frames(view.small[sl], view.fs, params.config)
    out = forward(params, clip)
    pred = Waveform(out.samples, out.fs, float(view.timestamps[sl.start]))
    base = dict(method=method, **_meta_fields(view.meta))
    try:
        mae, snr, rho, g, p = score_prediction(pred, reference_waveform(view), window_s, hop_s, integrate)
    except SignalError:
        return MetricsRow(**base, mae=math.nan, snr=math.nan, rho=math.nan, valid=False)
    return MetricsRow(**base, mae=mae, snr=snr, rho=rho, gold_hrs=g, pred_hrs=p)


# ---------------------------------------------------------------------------
# aggregation and rendering


@dataclass
class ReportCell:
    method: str
    group: dict
    mae: float
    snr: float
    rho: float
    n: int


@dataclass
class Report:
    group_by: tuple
    cells: list

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in self.cells:
            cond = [_fmt_field(c.group.get(f, "all")) for f in CONDITION_FIELDS]
            w.writerow([c.method, *cond, _num(c.mae), _num(c.snr), _num(c.rho)])
        return buf.getvalue()

    def to_text(self) -> str:
        """Aligned table of ``MAE / SNR / rho`` triplets, one line per method and group."""
        head = ["Method", *[f.replace("_", " ").title() for f in self.group_by], "MAE / SNR / rho"]
        body = [
            [c.method, *[_fmt_field(c.group[f]) for f in self.group_by], format_triplet(c.mae, c.snr, c.rho)]
            for c in self.cells
        ]
        widths = [max(len(r[i]) for r in [head, *body]) for i in range(len(head))]
        lines = ["  ".join(s.ljust(wd) for s, wd in zip(r, widths)).rstrip() for r in [head, *body]]
        lines.insert(1, "  ".join("-" * wd for wd in widths))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.write_text(self.to_text() if path.suffix == ".txt" else self.to_csv(), encoding="utf-8")


def _fmt_field(v) -> str:
    if isinstance(v, bool):
        return "yes" if v else "no"
    return str(v)


def _num(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6g}"


def format_triplet(mae, snr, rho) -> str:
    def f(x):
        return "n/a" if x is None or math.isnan(x) else f"{x:.2f}"

    return f"{f(mae)} / {f(snr)} / {f(rho)}"


def _nanmean(xs):
    xs = [x for x in xs if not math.isnan(x)]
    return float(np.mean(xs)) if xs else math.nan


def _group_rho(members: Sequence[MetricsRow]) -> float:
    """Pearson over pooled window HR pairs when available, else mean of row rhos."""
    g = [x for r in members for x in r.gold_hrs]
    p = [x for r in members for x in r.pred_hrs]
    if len(g) >= 3:
        try:
            return pearson(g, p)
        except UndefinedCorrelationError:
            return math.nan
    return _nanmean([r.rho for r in members])


def aggregate(rows: Iterable[MetricsRow], group_by: Sequence[str] = ()) -> Report:
    """Mean MAE/SNR per (method x group); deterministic method-then-group order."""
    group_by = tuple(group_by)
    for f in group_by:
        if f not in CONDITION_FIELDS:
            raise ValueError(f"cannot group by {f!r}; choose from {CONDITION_FIELDS}")
    buckets: dict = {}
    for r in rows:
        if not r.valid:
            continue
        key = (r.method, tuple(_fmt_field(getattr(r, f)) for f in group_by))
        buckets.setdefault(key, []).append(r)
    method_rank = {m: i for i, m in enumerate(METHODS)}
    cells = []
    for (method, gkey), members in sorted(buckets.items(), key=lambda kv: (method_rank.get(kv[0][0], 99), kv[0])):
        group = {f: getattr(members[0], f) for f in group_by}
        if len(members) == 1:
            rho = members[0].rho
        else:
            rho = _group_rho(members)
        cells.append(
            ReportCell(
                method, group, float(np.mean([m.mae for m in members])), float(np.mean([m.snr for m in members])),
                rho, len(members),
            )
        )
    return Report(group_by, cells)


# ---------------------------------------------------------------------------
# row persistence

ROW_COLUMNS = REPORT_COLUMNS + ("subject_id", "trial_no", "valid", "gold_hrs", "pred_hrs")


def write_rows(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROW_COLUMNS)
        for r in rows:
            w.writerow([
                r.method, r.device, r.lighting, r.lux, r.motion, int(r.exercise), r.skin_group,
                repr(r.mae), repr(r.snr), repr(r.rho), r.subject_id, r.trial_no, int(r.valid),
                " ".join(repr(x) for x in r.gold_hrs), " ".join(repr(x) for x in r.pred_hrs),
            ])


def read_rows(path) -> list[MetricsRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(REPORT_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{Path(path).name}: missing columns {sorted(missing)}")
        for d in reader:
            lux = d["lux"]
            out.append(MetricsRow(
                method=d["method"], device=d["device"], lighting=d["lighting"],
                lux=int(lux) if lux.isdigit() else lux, motion=d["motion"],
                exercise=d["exercise"].strip().lower() in ("1", "true", "yes"), skin_group=d["skin_group"],
                mae=float(d["mae_bpm"]), snr=float(d["snr_db"]), rho=float(d["rho"] or "nan"),
                subject_id=d.get("subject_id", ""), trial_no=int(d.get("trial_no") or 0),
                valid=d.get("valid", "1") not in ("0", "False"),
                gold_hrs=tuple(float(x) for x in (d.get("gold_hrs") or "").split()),
                pred_hrs=tuple(float(x) for x in (d.get("pred_hrs") or "").split()),
            ))
    return out
