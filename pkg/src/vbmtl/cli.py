"""Command-line entry point.

    vbmtl generate-data [--config FILE] [--out DIR] [key=value ...]
    vbmtl train         [--config FILE] [--out DIR] [key=value ...]
    vbmtl evaluate      --checkpoint FILE [--split val] [--config FILE] [--out DIR] [key=value ...]
    vbmtl gradcheck     [--trials 100] [--seed 0] [--out DIR]
    vbmtl weight-trace  RUN_DIR [--out FILE]

Outputs default to subdirectories of ``$VBMTL_OUT`` (``runs`` if unset).
Exit status: 0 on success, 2 for usage problems (unknown key, missing file,
invalid value), 1 for anything that fails while running.
"""
import argparse
import csv
import logging
import os
import sys
import warnings
from pathlib import Path

from .config import ConfigError, UnknownKeyError, build_config, load_config
from .heads import TASK_NAMES

OUT_ENV = "VBMTL_OUT"
METRIC_COLUMNS = ("UAR", "CCC", "ρ")


class UsageError(Exception):
    """Raised for problems the caller can fix; maps to exit status 2."""


def output_root():
    return Path(os.environ.get(OUT_ENV) or "runs")


def _config(args):
    overrides = list(getattr(args, "overrides", None) or [])
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        return load_config(args.config, overrides)
    return build_config(overrides=overrides)


def _out_dir(args, default_name):
    out = Path(args.out) if args.out else output_root() / default_name
    out.mkdir(parents=True, exist_ok=True)
    return out


def format_metric_table(metrics):
    lines = [f"{'task':<8}" + "".join(f"{m:>9}" for m in METRIC_COLUMNS)]
    for task in TASK_NAMES:
        row = metrics.get(task, {})
        cells = "".join(f"{row[m]:>9.4f}" if m in row else f"{'-':>9}" for m in METRIC_COLUMNS)
        lines.append(f"{task:<8}{cells}")
    return "\n".join(lines)


def write_metric_csv(metrics, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("task",) + METRIC_COLUMNS)
        for task in TASK_NAMES:
            row = metrics.get(task, {})
            w.writerow([task] + [repr(row[m]) if m in row else "" for m in METRIC_COLUMNS])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args):
    from .data import generate_synthetic, write_dataset

    cfg = _config(args)
    out = _out_dir(args, "data")
    manifest, signals = generate_synthetic(cfg.n_samples, cfg.data_seed, target_len=cfg.backbone.input_len)
    write_dataset(out, manifest, signals)
    print(f"wrote {len(manifest.ids)} samples to {out}")
    return 0


def cmd_train(args):
    from .trainer import multi_seed, run_report, train

    cfg = _config(args)
    if cfg.data_dir and not Path(cfg.data_dir).is_dir():
        raise UsageError(f"data directory not found: {cfg.data_dir}")
    out = _out_dir(args, f"{cfg.architecture}-{cfg.strategy}")
    if len(cfg.seeds) == 1:
        result = train(cfg, out_dir=out)
        report = run_report(result)
        print(f"best epoch {report['best_epoch']} (monitor {report['best_monitor']:.4f})")
        print(format_metric_table(report["best_metrics"]))
        return 0
    _, rows = multi_seed(cfg, out_dir=out)
    keys = list(rows[0])
    with open(out / "aggregate.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    print("\t".join(keys))
    for r in rows:
        print("\t".join(str(r["seed"]) if k == "seed" else f"{r[k]:.4f}" for k in keys))
    return 0


def cmd_evaluate(args):
    from .trainer import evaluate

    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    config = _config(args) if (args.config or args.overrides) else None
    metrics = evaluate(args.checkpoint, split=args.split, config=config)
    out = _out_dir(args, "eval")
    write_metric_csv(metrics, out / f"metrics_{args.split}.csv")
    print(format_metric_table(metrics))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import TOLERANCE, run_gradcheck

    rows = run_gradcheck(trials=args.trials, seed=args.seed)
    print(f"{'check':<22}{'trials':>7}{'max rel err':>14}  result")
    for r in rows:
        print(f"{r.name:<22}{r.trials:>7}{r.max_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed (tolerance {TOLERANCE:g})")
    if args.out:
        out = _out_dir(args, "gradcheck")
        with open(out / "gradcheck.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("check", "trials", "max_rel_error", "passed"))
            w.writerows((r.name, r.trials, repr(r.max_error), r.passed) for r in rows)
    return 1 if failed else 0


def cmd_weight_trace(args):
    from .weighting import write_weight_trace

    run = Path(args.run_dir)
    log_path, cfg_path = run / "epochs.csv", run / "config.resolved"
    for p in (log_path, cfg_path):
        if not p.is_file():
            raise UsageError(f"missing run file: {p}")
    strategy = load_config(cfg_path).strategy
    with open(log_path, newline="", encoding="utf-8") as fh:
        rows = [(int(r["epoch"]), strategy, r["task"], float(r["lambda"]), float(r["alpha"]))
                for r in csv.DictReader(fh)]
    target = Path(args.out) if args.out else run / "weight_trace.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_weight_trace(rows, target)
    print(f"wrote {len(rows)} rows to {target}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="vbmtl", description="Multi-task vocal-burst learning engine.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def configurable(name, help_text, out_help):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--out", help=out_help)
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides, e.g. architecture=branch or schedule.epochs=3")
        return p

    configurable("generate-data", "write a synthetic dataset", "dataset directory").set_defaults(fn=cmd_generate_data)
    configurable("train", "train one or more seeds", "run directory").set_defaults(fn=cmd_train)
    p = configurable("evaluate", "score a checkpoint", "directory for the metrics CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="also write gradcheck.csv here")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("weight-trace", help="export per-epoch lambda/alpha from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", help="CSV path (default RUN_DIR/weight_trace.csv)")
    p.set_defaults(fn=cmd_weight_trace)
    return parser


def _one_line_warning(message, category, filename, lineno, line=None):
    return f"warning: {category.__name__}: {message}\n"


def main(argv=None):
    from .trainer import CheckpointMismatchError

    warnings.formatwarning = _one_line_warning
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UnknownKeyError as exc:
        print(f"error: unknown config key: {exc.key}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, CheckpointMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line cause, exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
