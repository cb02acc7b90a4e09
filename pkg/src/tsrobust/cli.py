"""Command-line entry point: run, augment, clean, eval, ablate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attnmodel, negsample, possample
from .pipeline import ABLATIONS, PipelineError, RunConfig, ablate, evaluate_checkpoint, run
from .series_io import SeriesError, TimeSeries, load_csv, save_csv

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, data_required=True):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--data", required=data_required, help="CSV input, one column per channel")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _overrides(p):
    g = p.add_argument_group("overrides")
    g.add_argument("--lookback", type=int)
    g.add_argument("--horizon", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--pretrain-epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--d-model", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--rho", type=float)
    g.add_argument("--steps", type=int, dest="n_steps")
    g.add_argument("--epsilon", type=float)
    g.add_argument("--attack", choices=("none", "fgsm", "pgd"))
    g.add_argument("--base", choices=("sgd", "adam"))
    g.add_argument("--no-neg", action="store_true", help="skip negative-sample pretraining")
    g.add_argument("--no-pos", action="store_true", help="skip positive-sample repair")
    g.add_argument("--no-ecos", action="store_true", help="plain Adam instead of ECOS")
    g.add_argument("--freeze-qk", action="store_true")
    g.add_argument("--no-figures", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tsrobust", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("run", help="full three-stage pipeline")
    _common(p)
    _overrides(p)

    p = sub.add_parser("augment", help="write a negative-sample CSV")
    _common(p)
    p.add_argument("--noise", type=float)
    p.add_argument("--erase-p", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("clean", help="write a positive-sample CSV and cleaning report")
    _common(p)
    p.add_argument("--z-threshold", type=float)
    p.add_argument("--smooth-window", type=int)

    p = sub.add_parser("eval", help="test metrics of a saved checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    _overrides(p)

    p = sub.add_parser("ablate", help="run the six ablation configurations")
    _common(p)
    _overrides(p)
    p.add_argument("--seeds", type=int, nargs="+", help="median over these seeds")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    top = {k: getattr(args, k, None) for k in ("lookback", "horizon", "stride", "epochs",
                                                 "pretrain_epochs", "batch_size", "d_model", "seed")}
    top = {k: v for k, v in top.items() if v is not None}
    top["data"] = args.data
    cfg = replace(cfg, **top)
    eco = {k: getattr(args, k, None) for k in ("lr", "rho", "n_steps", "epsilon", "attack", "base")}
    eco = {k: v for k, v in eco.items() if v is not None}
    if "epsilon" in eco and cfg.ecos.epsilon > 0:
        # keep the PGD step a fixed fraction of the ball radius
        eco["fgsm_alpha"] = cfg.ecos.fgsm_alpha / cfg.ecos.epsilon * eco["epsilon"]
    if eco:
        cfg = replace(cfg, ecos=replace(cfg.ecos, **eco))
    if getattr(args, "no_neg", False):
        cfg = replace(cfg, use_neg_pretrain=False)
    if getattr(args, "no_pos", False):
        cfg = replace(cfg, use_pos_generation=False)
    if getattr(args, "no_ecos", False):
        cfg = replace(cfg, use_ecos=False)
    if getattr(args, "freeze_qk", False):
        cfg = replace(cfg, freeze_qk=True)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args)
    report = run(cfg, out, figures=not args.no_figures)
    print(json.dumps(report.metrics))
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = RunConfig.load(args.config).aug if args.config else negsample.AugConfig()
    flat = cfg.to_dict()
    for key, attr in (("noise", "noise"), ("erase_p", "erase_p"), ("alpha", "alpha"),
                      ("gamma", "gamma"), ("seed", "seed")):
        if getattr(args, attr, None) is not None:
            flat[key] = getattr(args, attr)
    cfg = negsample.AugConfig.from_dict(flat)
    series = load_csv(args.data)
    values = series.values.copy()
    for c in range(series.n_channels):
        rng = negsample.sequence_rng(cfg.seed, 0, c)
        values[c], _ = negsample.augment_sequence(series.values[c], cfg, rng)
    values[~series.mask] = np.nan  # cells missing on input stay missing
    out = TimeSeries(values, series.mask.copy(), list(series.channel_names))
    path = _out_dir(args) / "negative.csv"
    save_csv(out, path)
    print(str(path))
    return EXIT_OK


def cmd_clean(args) -> int:
    cfg = RunConfig.load(args.config).clean if args.config else possample.CleanConfig()
    if args.z_threshold is not None:
        cfg = replace(cfg, z_threshold=args.z_threshold)
    if args.smooth_window is not None:
        cfg = replace(cfg, smooth_window=args.smooth_window)
    series = load_csv(args.data)
    values = np.empty_like(series.values)
    reports = {}
    for c, name in enumerate(series.channel_names):
        values[c], rep = possample.make_positive(series.values[c], cfg, mask=series.mask[c])
        reports[name] = rep.to_dict()
    doc = json.dumps(reports, indent=2)
    if args.out:
        out = _out_dir(args)
        save_csv(TimeSeries.from_array(values, series.channel_names), out / "positive.csv")
        (out / "clean_report.json").write_text(doc)
    print(doc)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    metrics, attention = evaluate_checkpoint(cfg, args.checkpoint)
    if args.out:
        out = _out_dir(args)
        attnmodel.save_attention_csv(attention, out / "attention.csv")
        (out / "metrics.json").write_text(json.dumps(metrics))
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    seeds = tuple(args.seeds) if args.seeds else (cfg.seed,)
    rows = ablate(cfg, seeds=seeds)
    width = max(len(n) for n in ABLATIONS)
    print(f"{'config':<{width}}  {'mse':>10}  {'mae':>10}")
    for r in rows:
        print(f"{r['config']:<{width}}  {r['mse']:>10.6f}  {r['mae']:>10.6f}")
    if args.out:
        out = _out_dir(args)
        with (out / "ablation.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config", "use_neg_pretrain", "use_pos_generation", "use_ecos", "mse", "mae"])
            for r in rows:
                w.writerow([r["config"], r["use_neg_pretrain"], r["use_pos_generation"],
                            r["use_ecos"], repr(r["mse"]), repr(r["mae"])])
        if not args.no_figures:
            from .plotting import plot_ablation
            plot_ablation(rows, out / "ablation.png")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "augment": cmd_augment, "clean": cmd_clean,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PipelineError, SeriesError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
