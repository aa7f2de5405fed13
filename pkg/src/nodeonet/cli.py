"""Command-line entry point: ``nodeonet <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .dataset import FAMILIES, GenSettings, build_dataset, load_dataset, save_dataset
from .encoders import consistency_study, geometric_levels
from .errors import ConfigError, DivergedError, NodeONetError, NonFiniteError
from .evaluation import evaluate, evaluate_extrapolation
from .gradcheck import TOLERANCE, run_gradcheck
from .training import (
    Batch,
    build_model,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("NODEONET_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise ConfigError(f"NODEONET_THREADS must be an integer, got {env!r}") from None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    settings = GenSettings(
        family=args.problem,
        nx=args.nx,
        nt=args.nt,
        nx_test=args.nx_test,
        nt_test=args.nt_test,
        T=args.horizon,
        length_scale=args.length_scale,
        D=args.diffusion,
        R=args.reaction,
        grid_n=args.grid_n,
    )
    ds = build_dataset(settings, args.n_train, args.n_test, args.seed, threads=_threads(args))
    save_dataset(ds, args.out)
    print(json.dumps({"out": str(args.out), "n_train": ds.train.n, "n_test": ds.test.n, "settings": settings.to_dict()}))
    return EXIT_OK


def _train_batch(ds, encoder) -> Batch:
    return Batch(ds.encode("train", encoder), ds.train.labels, ds.train.times, ds.train.x)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ds = load_dataset(args.data)
    cfg.check_dataset(ds)
    tcfg = cfg.train_config()
    encoder = cfg.encoder()
    state = None
    if args.resume:
        model, state, meta = load_checkpoint(args.resume)
        if model.variant != cfg.variant() or meta.get("train_config", {}).get("seed") != cfg.seed:
            raise ConfigError("checkpoint to resume was produced with a different configuration")
    else:
        model = build_model(cfg.variant(), cfg.decoder_obj(), encoder, ds.T, ds.settings.nt, cfg.seed)
        if cfg.decoder_from:
            donor, _, _ = load_checkpoint(cfg.decoder_from)
            if donor.decoder.to_dict() != model.decoder.to_dict():
                raise ConfigError("decoder_from checkpoint has a different decoder architecture")
            for name in model.decoder_param_names:
                model.params[name] = np.array(donor.params[name], copy=True)
    model.meta = {"problem": cfg.problem, "config": cfg.model_dump()}
    result = train(model, _train_batch(ds, encoder), tcfg, state=state, stop_at=args.stop_at)
    save_checkpoint(args.out, result.model, tcfg, result)
    history = args.history or f"{args.out}.history.csv"
    write_history_csv(history, result, tcfg.history_every)
    print(json.dumps({"epoch": result.epoch, **result.final.to_dict()}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = evaluate(model, ds, split=args.split)
    _write_json(args.report, report.to_dict())
    print(json.dumps({"absolute_error": report.absolute_error, "relative_error": report.relative_error}))
    return EXIT_OK


def cmd_extrapolate(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report, _, _ = evaluate_extrapolation(model, ds, args.t_max, split=args.split, threads=_threads(args))
    _write_json(args.report, report.to_dict())
    print(json.dumps({"relative_error": report.relative_error, "horizon": report.horizon}, sort_keys=True))
    return EXIT_OK


def cmd_consistency(args) -> int:
    levels = geometric_levels(args.levels, args.coarsest)
    report = consistency_study(args.function_class, levels, alpha=args.alpha)
    out = report.to_dict()
    if args.report:
        _write_json(args.report, out)
    print(json.dumps({"order_d1": report.order_d1, "order_d2": report.order_d2}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.seed)
    worst = max(r.relative_error for r in results)
    out = {"seed": args.seed, "tolerance": TOLERANCE, "max_relative_error": worst, "cases": [r.to_dict() for r in results]}
    if args.report:
        _write_json(args.report, out)
    print(json.dumps({"max_relative_error": worst, "ok": worst <= TOLERANCE}))
    return EXIT_OK if worst <= TOLERANCE else 1


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def export_rows(report: dict, kind: str, t: float | None = None):
    if kind == "errors":
        header = ["t", "absolute_error", "relative_error", "training_horizon"]
        rows = [
            [r["t"], r["absolute_error"], "" if r["relative_error"] is None else r["relative_error"],
             r.get("training_horizon", 1)]
            for r in report.get("per_time", [])
        ]
        return header, rows
    slices = report.get("field_slices", [])
    if t is not None:
        slices = [s for s in slices if abs(s["t"] - t) <= 1e-9 * max(1.0, abs(t))]
    two_d = bool(slices) and np.ndim(slices[0]["x"]) == 2
    header = ["t", "x", "y", "truth", "prediction", "abs_error"] if two_d else ["t", "x", "truth", "prediction", "abs_error"]
    rows = []
    for s in slices:
        for x, u, p in zip(s["x"], s["truth"], s["prediction"]):
            coords = list(x) if two_d else [x]
            rows.append([s["t"], *coords, u, p, abs(p - u)])
    return header, rows


def cmd_export_plot(args) -> int:
    if args.format != "csv":
        print(f"error: unsupported format {args.format!r}; only 'csv' is available", file=sys.stderr)
        return EXIT_USAGE
    try:
        report = json.loads(Path(args.report).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {args.report}: {exc}") from exc
    header, rows = export_rows(report, args.kind, args.t)
    text = _csv_text(header, rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nodeonet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="sample inputs, solve the reference PDE, write a dataset")
    g.add_argument("--problem", required=True, choices=FAMILIES)
    g.add_argument("--n-train", type=int, required=True)
    g.add_argument("--n-test", type=int, default=0)
    g.add_argument("--nx", type=int, help="label points (1D) or label grid side (2D)")
    g.add_argument("--nt", type=int, help="label time steps")
    g.add_argument("--nx-test", type=int)
    g.add_argument("--nt-test", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--length-scale", type=float)
    g.add_argument("--grid-n", type=int, default=64, help="2D generation grid side")
    g.add_argument("--horizon", type=float, help="final time T")
    g.add_argument("--diffusion", type=float, help="constant D for dr-source")
    g.add_argument("--reaction", type=float, help="reaction coefficient R")
    g.add_argument("--threads", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes a checkpoint and a loss history CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--history")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this epoch (for staged runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="errors on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("extrapolate", help="errors on [0, t-max] against fresh reference solutions")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--t-max", type=float, required=True)
    x.add_argument("--report", required=True)
    x.add_argument("--split", choices=("train", "test"), default="test")
    x.add_argument("--threads", type=int)
    x.set_defaults(func=cmd_extrapolate)

    c = sub.add_parser("consistency", help="empirical encoder/decoder consistency rates")
    c.add_argument("--class", dest="function_class", required=True, choices=("holder", "c1", "c2"))
    c.add_argument("--alpha", type=float, default=0.5)
    c.add_argument("--levels", type=int, default=6, help="number of mesh levels h = 1/(coarsest 2^i)")
    c.add_argument("--coarsest", type=int, default=4, help="cells on the coarsest mesh")
    c.add_argument("--report")
    c.set_defaults(func=cmd_consistency)

    gc = sub.add_parser("gradcheck", help="reverse mode vs finite differences on random tiny models")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--report")
    gc.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-plot", help="plot-ready CSV from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--format", default="csv")
    p.add_argument("--kind", choices=("errors", "field"), default="errors")
    p.add_argument("--t", type=float, help="keep only the field slice at this time")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DivergedError, NonFiniteError) as exc:
        step = getattr(exc, "step", None)
        suffix = f" (step {step})" if step is not None else ""
        print(f"numerical failure: {exc}{suffix}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NodeONetError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
