"""``caamargin`` command line: gen-data, gradcheck, train, eval, ablation.

Every config key is also a flag (``--batch-size 32``).  Precedence is
flag > ``--config`` file > built-in default.  Relative paths, inputs and
outputs alike, are resolved under ``$CAAMARGIN_OUTPUT_ROOT`` (default: the
current directory).

Exit codes: 0 success, 1 failed check, 2 config error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import experiment, gradcheck
from .config import DataConfig, TrainConfig, config_lines, load_config, parse_value
from .errors import CaaMarginError, ConfigError, DataError
from .report import Manifest, Report
from .serialize import (
    dataset_text,
    fingerprint,
    load_checkpoint,
    load_dataset,
    load_trials,
    save_checkpoint,
    save_dataset,
    save_trials,
)
from .synth import make_trials
from .trainer import fit, init_state

OUTPUT_ROOT_ENV = "CAAMARGIN_OUTPUT_ROOT"
EXIT_CHECK_FAILED = 1


def resolve(path):
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def _write_output(path, text):
    path = resolve(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _add_config_flags(parser):
    parser.add_argument("--config", help="key = value config file")
    group = parser.add_argument_group("config keys")
    for cls in (TrainConfig, DataConfig):
        for f in fields(cls):
            group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name,
                               metavar=f.name.upper())


def _configs(args):
    overrides = {}
    for cls in (TrainConfig, DataConfig):
        for f in fields(cls):
            raw = getattr(args, "cfg_" + f.name, None)
            if raw is None:
                continue
            try:
                overrides[f.name] = parse_value(cls, f.name, raw)
            except ValueError as exc:
                raise ConfigError(f"--{f.name.replace('_', '-')}: {exc}", key=f.name) from None
    path = resolve(args.config) if args.config else None
    return load_config(path, overrides)


def _emit(report, path):
    text = report.text()
    out = _write_output(path, text)
    sys.stdout.write(text)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    _, data = _configs(args)
    split = experiment.make_split(data)
    data_fp = save_dataset(_ensure_parent(args.data_out), split.dataset, split.is_eval)
    trials_fp = save_trials(_ensure_parent(args.trials_out), split.trials)
    manifest = Manifest("gen-data", data.data_seed, config_lines(data),
                        outputs={"dataset": args.data_out, "trials": args.trials_out})
    report = Report("caamargin gen-data", manifest)
    report.section("summary", [
        ("dataset_fingerprint", data_fp),
        ("trials_fingerprint", trials_fp),
        ("n_utterances", len(split.dataset.labels)),
        ("n_train", int((~split.is_eval).sum())),
        ("n_eval", int(split.is_eval.sum())),
        ("n_outliers", int(split.dataset.outlier.sum())),
        ("n_target", split.trials.n_target),
        ("n_nontarget", split.trials.n_nontarget),
    ])
    _emit(report, args.report_out)
    return 0


def _ensure_parent(path):
    p = resolve(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gradcheck(args):
    cfg, _ = _configs(args)
    seed = cfg.seed
    start = time.perf_counter()
    results = gradcheck.run_gradcheck(args.instances, seed, corrupt=args.corrupt)
    elapsed = time.perf_counter() - start
    manifest = Manifest("gradcheck", seed, [
        f"instances = {args.instances}",
        f"fd_step = {gradcheck.FD_STEP!r}",
        f"tolerance = {gradcheck.TOLERANCE!r}",
        f"corrupt = {args.corrupt or 'none'}",
    ], outputs={"report": args.report_out})
    report = Report("caamargin gradcheck", manifest)
    report.table("gradcheck", ["suite", "instances", "max_rel_error", "status"],
                 [[r.name, r.instances, r.max_error, "pass" if r.passed else "FAIL"]
                  for r in results])
    failed = [r.name for r in results if not r.passed]
    report.section("result", [("passed", not failed), ("failed", ",".join(failed) or "none")]
                   + [(f"max_rel_error.{r.name}", r.max_error) for r in results])
    _emit(report, args.report_out)
    print(f"gradcheck finished in {elapsed:.1f}s", file=sys.stderr)
    if failed:
        print("gradient check failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return 0


def _training_data(args, data):
    """(features, labels, fingerprint) of the training utterances."""
    if args.data is None:
        split = experiment.make_split(data)
        return split.train_features, split.train_labels, fingerprint(
            dataset_text(split.dataset, split.is_eval))
    ds, is_eval, fp = load_dataset(resolve(args.data))
    train = np.ones(len(ds.labels), dtype=bool) if is_eval is None else ~is_eval
    return ds.features[train], ds.labels[train], fp


def cmd_train(args):
    cfg, data = _configs(args)
    features, labels, data_fp = _training_data(args, data)
    n_speakers = int(labels.max()) + 1
    state = init_state(cfg, features.shape[1], n_speakers)
    state, history = fit(features, labels, cfg, state=state)
    ckpt_fp = save_checkpoint(_ensure_parent(args.checkpoint_out), state, cfg)

    manifest = Manifest("train", cfg.seed, config_lines(cfg, data),
                        inputs={"dataset": args.data or "generated", "dataset_fingerprint": data_fp},
                        outputs={"checkpoint": args.checkpoint_out, "report": args.report_out})
    report = Report("caamargin train", manifest)
    keys = ["loss", "classification", "contrastive", "lambda1", "lambda2"]
    rows = []
    for rec in history:
        rows.append([rec.epoch, rec.steps, rec.skipped]
                    + [rec.means.get(k, float("nan")) for k in keys]
                    + [rec.maxima.get("mgda_slack", float("nan"))])
    report.table("history", ["epoch", "steps", "skipped"] + keys + ["max_mgda_slack"], rows)
    report.section("result", [
        ("checkpoint_fingerprint", ckpt_fp),
        ("epochs", len(history)),
        ("steps", state.step),
        ("initial_loss", history[0].means.get("loss", float("nan")) if history else float("nan")),
        ("final_loss", history[-1].means.get("loss", float("nan")) if history else float("nan")),
    ])
    _emit(report, args.report_out)
    return 0


def cmd_eval(args):
    _, data = _configs(args)
    state, cfg, ckpt_fp = load_checkpoint(resolve(args.checkpoint))
    ds, is_eval, data_fp = load_dataset(resolve(args.data))
    if ds.features.shape[1] != state.encoder.dims[0]:
        raise DataError(f"dataset has {ds.features.shape[1]} features, checkpoint expects "
                        f"{state.encoder.dims[0]}")
    if args.trials:
        trials, trials_fp = load_trials(resolve(args.trials))
    else:
        mask = np.ones(len(ds.labels), dtype=bool) if is_eval is None else is_eval
        ids = [u for u, e in zip(ds.utt_ids, mask) if e]
        trials = make_trials(ds.labels[mask], data.n_target, data.n_nontarget, ds.seed, ids)
        trials_fp = "generated"
    used = sorted({t.enroll for t in trials} | {t.test for t in trials})
    row = {u: k for k, u in enumerate(ds.utt_ids)}
    missing = [u for u in used if u not in row]
    if missing:
        raise DataError(f"trial utterance {missing[0]!r} not in dataset")
    idx = np.array([row[u] for u in used])
    metrics = experiment.evaluate(state, ds.features[idx], ds.labels[idx], used, trials,
                                  experiment.dcf_params(data), cfg)

    manifest = Manifest("eval", cfg.seed, config_lines(cfg, data),
                        inputs={"checkpoint": args.checkpoint, "checkpoint_fingerprint": ckpt_fp,
                                "dataset": args.data, "dataset_fingerprint": data_fp,
                                "trials": args.trials or "generated",
                                "trials_fingerprint": trials_fp},
                        outputs={"report": args.report_out})
    report = Report("caamargin eval", manifest)
    report.section("metrics", sorted(metrics.items()))
    _emit(report, args.report_out)
    return 0


def cmd_ablation(args):
    cfg, data = _configs(args)
    seeds = range(args.seeds)
    runs = experiment.run_ablation(cfg, data, seeds)
    rows = experiment.summarize_ablation(runs)
    manifest = Manifest("ablation", cfg.seed, config_lines(cfg, data) + [f"seeds = {args.seeds}"],
                        outputs={"report": args.report_out})
    report = Report("caamargin ablation", manifest)
    report.table("ablation", ["variant", "condition", "seeds", "mean_eer", "mean_min_dcf",
                              "loss_decreased"],
                 [[r["variant"], r["condition"], r["seeds"], r["eer"], r["min_dcf"],
                   r["loss_decreased"]] for r in rows])
    report.table("runs", ["variant", "condition", "seed", "eer", "min_dcf", "initial_loss",
                          "final_loss"],
                 [[r.variant, r.condition, r.seed, r.metrics["eer"], r.metrics["min_dcf"],
                   r.initial_loss, r.final_loss] for r in runs])
    by = {(r["variant"], r["condition"]): r for r in rows}
    full = by[("CAAMarginCon", "outlier")]["eer"]
    base = by[("w/o CAA and Margin", "outlier")]["eer"]
    report.section("summary", [
        ("outlier_mean_eer.full", full),
        ("outlier_mean_eer.without_both", base),
        ("full_le_without_both", full <= base),
        ("all_losses_decreased", all(r["loss_decreased"] for r in rows)),
    ])
    _emit(report, args.report_out)
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="caamargin", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and trial list")
    _add_config_flags(p)
    p.add_argument("--data-out", default="data.json")
    p.add_argument("--trials-out", default="trials.txt")
    p.add_argument("--report-out", default="gen-data_report.txt")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    _add_config_flags(p)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--corrupt", choices=gradcheck.SUITES,
                   help="test hook: perturb one suite's analytic gradient")
    p.add_argument("--report-out", default="gradcheck_report.txt")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train an encoder")
    _add_config_flags(p)
    p.add_argument("--data", help="dataset file (default: generate from the data keys)")
    p.add_argument("--checkpoint-out", default="checkpoint.json")
    p.add_argument("--report-out", default="train_report.txt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score trials with a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", help="trial list (default: sample from the eval split)")
    p.add_argument("--report-out", default="eval_report.txt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", help="CAA / margin ablation over seeds")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--report-out", default="ablation_report.txt")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CaaMarginError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
