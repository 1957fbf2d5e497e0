"""Command-line front end: train, evaluate, forecast, gates.

All commands read one flat key=value config file and an optional
``--seed`` / ``--out`` override.  Outputs are byte-reproducible for a
fixed config and seed; wall-clock telemetry goes to a separate log file
so it never perturbs the deterministic artifacts.

Exit codes: 0 success, 1 runtime failure, 2 configuration/validation
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as datamod
from . import evaluation as ev
from . import training
from .config import ConfigError, dump_run_config, load_run_config
from .data import DataError
from .model import Forecaster


def _prepare(cfg):
    schema_text = Path(cfg.data_schema).read_text()
    ds = datamod.load_csv(cfg.data_csv, schema_text)
    train_frac = 1.0 - cfg.train.val_fraction - cfg.train.test_fraction
    ds.set_splits(train_frac, cfg.train.val_fraction)
    norm, stats = datamod.normalize(ds)
    if cfg.model.n_experts != ds.n_externals:
        cfg.model.n_experts = ds.n_externals
        cfg.model.top_m = min(cfg.model.top_m, ds.n_externals)
        cfg.model.validate()
    return norm, stats


def _out_dir(cfg, args):
    out = Path(args.out if args.out else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _model_name(model):
    return "m2oe2" if model.config.use_experts else "base-gru"


def cmd_train(args):
    cfg = _apply_overrides(load_run_config(args.config).validate(), args)
    out = _out_dir(cfg, args)
    norm, stats = _prepare(cfg)
    run_log = out / "run.log"

    def log_line(msg):
        with open(run_log, "a") as fh:
            fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {msg}\n")

    log_line(f"train start: {cfg.data_csv}, seed={cfg.train.seed}")
    model = Forecaster(cfg.model, seed=cfg.train.seed)
    result = training.train_loop(model, norm, cfg.train)
    fingerprint = stats.fingerprint()
    model.save(out / "best.npz", stats_fingerprint=fingerprint)
    final = Forecaster(cfg.model, params=model.params)
    for name, tensor in final.params.items():
        tensor.data[...] = result.final_arrays[name]
    final.save(out / "final.npz", stats_fingerprint=fingerprint)
    (out / "history.csv").write_text(training.history_csv(result.history))
    (out / "config.txt").write_text(dump_run_config(cfg))
    (out / "stats.csv").write_text(stats.to_csv())
    for k, secs in enumerate(result.epoch_seconds):
        log_line(f"epoch {k}: {secs:.3f}s")
    log_line(f"train done: best epoch {result.best_epoch}")
    print(f"wrote {out / 'best.npz'} (best epoch {result.best_epoch}) "
          f"and history for {len(result.history)} epochs")
    return 0


def cmd_evaluate(args):
    cfg = _apply_overrides(load_run_config(args.config).validate(), args)
    out = _out_dir(cfg, args)
    norm, stats = _prepare(cfg)
    model = Forecaster.load(args.checkpoint)
    instances = datamod.make_windows(norm, model.config.horizon)
    test_insts = datamod.split_instances(instances, norm)["test"]
    n_samples = args.samples if args.samples else model.config.mc_samples
    seed = cfg.train.seed

    reports = []
    report, forecasts = ev.evaluate(model, norm, stats, test_insts,
                                    n_samples=n_samples, seed=seed,
                                    name=_model_name(model))
    reports.append(report)
    (out / f"plot_{report.model_name}.csv").write_text(
        ev.plot_data_csv(norm, stats, forecasts, model.config.horizon))

    if args.baselines:
        base_cfg = dataclasses.replace(model.config, use_experts=False)
        base = Forecaster(base_cfg, seed=seed)
        training.train_loop(base, norm, cfg.train)
        base.stats_fingerprint = stats.fingerprint()
        base_report, base_fc = ev.evaluate(base, norm, stats, test_insts,
                                           n_samples=n_samples, seed=seed,
                                           name="base-gru")
        reports.append(base_report)
        (out / "plot_base-gru.csv").write_text(
            ev.plot_data_csv(norm, stats, base_fc, base.config.horizon))
        pers = ev.persistence_forecasts(norm, test_insts, model.config.horizon)
        reports.append(ev.score_forecasts("persistence", pers, stats,
                                          fingerprint=stats.fingerprint()))

    (out / "report.csv").write_text(ev.report_csv(reports))
    print(ev.report_csv(reports), end="")
    return 0


def _origin_index(dataset, stamp_text, horizon):
    stamp = pd.Timestamp(stamp_text)
    hits = np.flatnonzero(dataset.timestamps == stamp)
    if len(hits) == 0:
        raise DataError(f"origin {stamp} not in dataset range "
                        f"[{dataset.timestamps[0]} .. {dataset.timestamps[-1]}]")
    origin = int(hits[0])
    week_len = dataset.week_len
    if origin < week_len:
        raise DataError(
            f"insufficient context before {stamp}; earliest valid origin is "
            f"{dataset.timestamps[week_len]}")
    if origin + horizon > len(dataset):
        raise DataError(f"origin {stamp} leaves no room for {horizon} target steps")
    return origin


def cmd_forecast(args):
    cfg = _apply_overrides(load_run_config(args.config).validate(), args)
    out = _out_dir(cfg, args)
    norm, stats = _prepare(cfg)
    model = Forecaster.load(args.checkpoint)
    horizon = model.config.horizon
    origin = _origin_index(norm, args.origin, horizon)
    week_len = norm.week_len
    start = (origin // week_len - 1) * week_len
    loads = norm.loads[start:origin]
    ext = norm.externals[start:origin]
    rng = np.random.default_rng(cfg.train.seed)
    dist = model.predict_distribution(loads[None], ext[None],
                                      n_samples=args.samples, rng=rng)[0]
    scales = np.array([st.scale for st in stats.loads])
    mean_p = stats.invert_loads(dist.mean)
    std_p = dist.std * scales
    lines = ["step,timestamp,mean,std,mean_physical,std_physical"]
    for k in range(horizon):
        stamp = norm.timestamps[origin + k]
        for series in range(norm.n_series):
            lines.append(f"{k + 1},{stamp},{float(dist.mean[k, series])!r},"
                         f"{float(dist.std[k, series])!r},"
                         f"{float(mean_p[k, series])!r},{float(std_p[k, series])!r}")
    text = "\n".join(lines) + "\n"
    (out / "forecast.csv").write_text(text)
    print(text, end="")
    return 0


def cmd_gates(args):
    cfg = _apply_overrides(load_run_config(args.config).validate(), args)
    out = _out_dir(cfg, args)
    norm, _ = _prepare(cfg)
    model = Forecaster.load(args.checkpoint)
    n_experts = model.config.n_experts
    header = ("timestamp,"
              + ",".join(f"logit_{j}" for j in range(n_experts)) + ","
              + ",".join(f"weight_{j}" for j in range(n_experts)) + ",selected")
    start_idx = _origin_index(norm, args.start, 0)
    end_stamp = pd.Timestamp(args.end)
    hits = np.flatnonzero(norm.timestamps == end_stamp)
    if len(hits) == 0:
        raise DataError(f"end {end_stamp} not in dataset range")
    end_idx = int(hits[0])

    lines = [header]
    if end_idx > start_idx:
        week_len = norm.week_len
        ctx_start = (start_idx // week_len - 1) * week_len
        loads = norm.loads[ctx_start:end_idx]
        ext = norm.externals[ctx_start:end_idx]
        rows = model.gate_trace(loads, ext)
        for offset in range(start_idx - ctx_start, end_idx - ctx_start):
            logits, weights, selected = rows[offset]
            stamp = norm.timestamps[ctx_start + offset]
            lines.append(f"{stamp},"
                         + ",".join(f"{float(v)!r}" for v in logits) + ","
                         + ",".join(f"{float(v)!r}" for v in weights) + ","
                         + "|".join(str(int(j)) for j in selected))
    text = "\n".join(lines) + "\n"
    (out / "gates.csv").write_text(text)
    print(text, end="")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="m2oe2",
        description="Adaptive probabilistic load forecasting with "
                    "context-driven mixture-of-experts hypernetworks")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="key=value run file")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override output directory")

    p_train = sub.add_parser("train", help="train a model and write checkpoints")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--baselines", action="store_true",
                        help="also score the plain-GRU and persistence baselines")
    p_eval.add_argument("--samples", type=int, default=None,
                        help="Monte Carlo draws per forecast")
    p_eval.set_defaults(func=cmd_evaluate)

    p_fc = sub.add_parser("forecast", help="forecast from one origin timestamp")
    common(p_fc)
    p_fc.add_argument("--checkpoint", required=True)
    p_fc.add_argument("--origin", required=True,
                      help="timestamp of the first forecast step")
    p_fc.add_argument("--samples", type=int, default=None)
    p_fc.set_defaults(func=cmd_forecast)

    p_gates = sub.add_parser("gates", help="export the gate trace over a range")
    common(p_gates)
    p_gates.add_argument("--checkpoint", required=True)
    p_gates.add_argument("--start", required=True, help="first traced timestamp")
    p_gates.add_argument("--end", required=True, help="end of range (exclusive)")
    p_gates.set_defaults(func=cmd_gates)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
