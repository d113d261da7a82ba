"""Command-line entry point: ``dualppg <command> [flags]``.

Exit status is 0 on success, 1 on data/schema/config errors (message on
stderr), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import torch

from . import evalharness, ingest, meta, model, synth
from .signalcore import SignalError, write_waveform_csv

SEED_ENV = "MOBILE_PPG_SEED"
CONFIG_SECTIONS = {"model": model.ModelConfig, "meta": meta.MetaConfig, "pretrain": meta.PretrainConfig}

log = logging.getLogger("dualppg")


class CliError(Exception):
    """Reported on stderr with exit status 1."""


# ---------------------------------------------------------------------------
# helpers


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise CliError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def load_config(path) -> dict:
    """Read a JSON config with optional ``model``, ``meta`` and ``pretrain`` sections.

    Keys inside each section are the dataclass field names.
    """
    if path is None:
        raw = {}
    else:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise CliError(f"{path}: top level must be an object")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise CliError(f"{path}: unknown config sections {sorted(unknown)}; expected {sorted(CONFIG_SECTIONS)}")
    return {name: cls.from_json(raw.get(name, {})) for name, cls in CONFIG_SECTIONS.items()}


def with_seed(cfg, seed):
    return cfg if seed is None else replace(cfg, seed=seed)


def trial_dirs(data) -> list[Path]:
    root = Path(data)
    if (root / "meta.json").is_file():
        return [root]
    if not root.is_dir():
        raise CliError(f"data directory not found: {data}")
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not dirs:
        raise CliError(f"no trial directories under {data}")
    return dirs


def load_views(data, size) -> list[meta.TrialView]:
    return [meta.TrialView(ingest.load_trial(d), size) for d in trial_dirs(data)]


def _parse_conditions(text):
    names = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in names if c not in synth.CONDITIONS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown condition(s) {bad}; choose from {sorted(synth.CONDITIONS)}")
    return names


def _parse_fields(text):
    fields = [f.strip() for f in text.split(",") if f.strip()]
    bad = [f for f in fields if f not in evalharness.CONDITION_FIELDS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown field(s) {bad}; choose from {evalharness.CONDITION_FIELDS}")
    return fields


def _load_domain(path) -> synth.Domain:
    if path is None:
        return synth.IN_DISTRIBUTION
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read domain file {path}: {exc}") from None
    unknown = set(raw) - set(synth.Domain.__dataclass_fields__)
    if unknown:
        raise CliError(f"{path}: unknown Domain keys {sorted(unknown)}")
    conv = {k: tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v for k, v in raw.items()}
    return synth.Domain(**conv)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_gen(args):
    ds, _ = synth.gen_task_suite(
        args.subjects, args.conditions, seed=args.seed, domain=_load_domain(args.domain),
        subject_prefix=args.prefix, dur_s=args.duration, size=args.size,
    )
    synth.save_suite(ds, args.out)
    print(f"wrote {len(ds.trials)} trials to {args.out}")


def cmd_extract_label(args):
    from .labelgen import extract_finger_ppg

    trial = ingest.load_trial(args.trial)
    if trial.rear is None:
        raise CliError(f"{args.trial}: trial has no rear stream to extract a finger label from")
    w = extract_finger_ppg(trial.rear)
    write_waveform_csv(w, args.out)
    print(f"wrote {len(w)} samples to {args.out}")


def cmd_pretrain(args):
    cfg = load_config(args.config)
    pcfg = with_seed(cfg["pretrain"], args.seed)
    mcfg = cfg["model"]
    theta0 = model.load_checkpoint(args.init) if args.init else model.init_params(mcfg, pcfg.seed)
    views = load_views(args.data, theta0.config.input_size)
    theta, curve = meta.pretrain(theta0, views, pcfg, cfg["meta"].label_bandpass)
    model.save_checkpoint(theta, args.out)
    for i, v in enumerate(curve, start=1):
        print(f"epoch {i}: loss {v:.6f}")
    print(f"wrote checkpoint {args.out}")


def cmd_meta_train(args):
    cfg = load_config(args.config)
    mcfg = with_seed(cfg["meta"], args.seed)
    theta0 = model.load_checkpoint(args.init)
    views = load_views(args.data, theta0.config.input_size)
    tasks = [meta.make_task(v, theta0.config, mcfg, args.label) for v in views]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    theta, history = meta.meta_train(
        theta0, tasks, mcfg, telemetry=out / "telemetry.csv", checkpoint_dir=out / "epochs",
    )
    model.save_checkpoint(theta, out)
    from .plotting import plot_training_curve

    plot_training_curve(history.rows, out / "training_curve.png")
    for e in range(mcfg.epochs + 1):
        print(f"epoch {e}: query loss {history.epoch_mean(e):.6f}")
    print(f"wrote checkpoint {out}")


def _adapted(theta, view, mcfg, label, steps, lr):
    if steps is None and lr is None:
        return meta.personalize(theta, view, mcfg, label_source=label)
    steps = mcfg.inner_steps if steps is None else steps
    lr = mcfg.inner_lr if lr is None else lr
    return meta.finetune_baseline(theta, view, steps, lr, mcfg, label_source=label)


def cmd_personalize(args):
    cfg = load_config(args.config)
    theta = model.load_checkpoint(args.ckpt)
    trial = ingest.load_trial(args.trial)
    if args.label == "finger" and trial.rear is None and trial.finger_ppg is None:
        raise CliError(f"{args.trial}: no finger source (rear stream or finger_ppg) for the pseudo label")
    view = meta.TrialView(trial, theta.config.input_size)
    out = _adapted(theta, view, cfg["meta"], args.label, args.steps, args.lr)
    model.save_checkpoint(out, args.out)
    print(f"wrote checkpoint {args.out}")


def _evaluate_one(job):
    ckpt, trial_dir, method, adapt, cfg_path, steps, lr, threads = job
    torch.set_num_threads(threads)
    cfg = load_config(cfg_path)
    theta = model.load_checkpoint(ckpt)
    view = meta.TrialView(ingest.load_trial(trial_dir), theta.config.input_size)
    if adapt != "none":
        theta = _adapted(theta, view, cfg["meta"], adapt, steps, lr)
    return evalharness.evaluate_trial(theta, view, skip_s=cfg["meta"].support_s, method=method)


def cmd_evaluate(args):
    model.load_checkpoint(args.ckpt)  # fail early on a bad checkpoint
    jobs = [
        (args.ckpt, d, args.method, args.adapt, args.config, args.steps, args.lr, torch.get_num_threads())
        for d in trial_dirs(args.data)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_evaluate_one, jobs))
    else:
        rows = [_evaluate_one(j) for j in jobs]
    evalharness.write_rows(rows, args.out)
    valid = [r for r in rows if r.valid]
    mean = sum(r.mae for r in valid) / len(valid) if valid else float("nan")
    print(f"{len(rows)} trials ({len(rows) - len(valid)} invalid); mean MAE {mean:.3f} BPM -> {args.out}")


def cmd_report(args):
    from .plotting import plot_report

    rows = []
    for p in args.rows:
        if not Path(p).is_file():
            raise CliError(f"rows file not found: {p}")
        rows += evalharness.read_rows(p)
    rep = evalharness.aggregate(rows, args.group_by)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(rep.to_csv(), encoding="utf-8")
    out.with_suffix(".txt").write_text(rep.to_text(), encoding="utf-8")
    plot_report(rep, rows, out.with_suffix(".png"))
    sys.stdout.write(rep.to_text())


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualppg", description="Camera PPG personalization pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1, for reproducibility)")
    sub = p.add_subparsers(dest="command", required=True)

    def seed_flag(sp):
        sp.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")

    s = sub.add_parser("synth-gen", help="generate a synthetic trial suite")
    s.add_argument("--subjects", type=int, required=True)
    s.add_argument("--conditions", type=_parse_conditions, default=["led"], help="comma-separated condition names")
    s.add_argument("--out", required=True)
    s.add_argument("--domain", help="JSON file of Domain fields (per-subject/per-trial ranges)")
    s.add_argument("--prefix", default="s", help="subject id prefix")
    s.add_argument("--duration", type=float, default=60.0, help="seconds per trial")
    s.add_argument("--size", type=int, default=synth.FRAME_SIZE, help="face frame side in pixels")
    seed_flag(s)
    s.set_defaults(func=cmd_synth_gen)

    s = sub.add_parser("extract-label", help="finger pseudo label from a trial's rear stream")
    s.add_argument("--trial", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract_label)

    s = sub.add_parser("pretrain", help="supervised backbone training")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--init", help="start from this checkpoint instead of a fresh initialization")
    s.add_argument("--out", required=True)
    seed_flag(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("meta-train", help="meta-learn an initialization from per-trial tasks")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--init", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--label", choices=meta.LABEL_SOURCES, default="gold", help="support/query label source")
    seed_flag(s)
    s.set_defaults(func=cmd_meta_train)

    def adapt_flags(sp, default_label):
        sp.add_argument("--label", choices=meta.LABEL_SOURCES, default=default_label)
        sp.add_argument("--steps", type=int, help="gradient steps (default: inner_steps from the config)")
        sp.add_argument("--lr", type=float, help="step size (default: inner_lr from the config)")
        sp.add_argument("--config")

    s = sub.add_parser("personalize", help="adapt a checkpoint to one trial's first support_s seconds")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--trial", required=True)
    s.add_argument("--out", required=True)
    adapt_flags(s, "finger")
    s.set_defaults(func=cmd_personalize)

    s = sub.add_parser("evaluate", help="score a checkpoint on every trial of a suite")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=evalharness.METHODS, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--adapt", choices=("none",) + meta.LABEL_SOURCES, default="none",
                   help="adapt per trial on its support window before scoring")
    adapt_flags_eval = s.add_argument_group("adaptation")
    adapt_flags_eval.add_argument("--steps", type=int)
    adapt_flags_eval.add_argument("--lr", type=float)
    s.add_argument("--config")
    s.add_argument("--jobs", type=int, default=1, help="trials evaluated in parallel")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="aggregate row CSVs into a table and figure")
    s.add_argument("--rows", required=True, nargs="+")
    s.add_argument("--group-by", type=_parse_fields, default=[])
    s.add_argument("--out", required=True, help="CSV path; .txt and .png siblings are written too")
    s.set_defaults(func=cmd_report)
    return p


DATA_ERRORS = (CliError, SignalError, ingest.TrialSchemaError, ingest.SyncError, model.ConfigError,
               model.AlignmentError, meta.DivergenceError, meta.MissingLabelSourceError,
               evalharness.ProtocolError, evalharness.TemplateError, ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        if hasattr(args, "seed"):
            if args.seed is None and os.environ.get(SEED_ENV) is not None:
                args.seed = default_seed()
            if args.func is cmd_synth_gen and args.seed is None:
                args.seed = 0
        if getattr(args, "jobs", 1) < 1:
            parser.error("--jobs must be >= 1")
        args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
