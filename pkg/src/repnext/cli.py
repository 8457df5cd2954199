"""Command line entry point: trace, build, fuse, verify, count, bench, run.

Exit codes: 0 success, 1 verification or data failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
import time
from typing import Optional, Sequence

import numpy as np

from .counting import chunk_conv_cost, cost_report, enumerate_params
from .errors import InvalidConfig, RepNeXtError, ShapeMismatch
from .model import (REFERENCE_TOTALS, Model, ModelConfig, build_model, fuse_model, load_config,
                    load_weights, model_forward, read_records, save_weights, trace_shapes,
                    write_records)
from .verify import TOL_BLOCK, TOL_MODEL, TOL_TRANSFORM, run_audit

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def parse_shape(text: str, channels: int = 3) -> tuple[int, int, int, int]:
    """``NxCxHxW``, ``HxW`` or a single side length."""
    parts = [p for p in re.split(r"[x,\s]+", text.strip()) if p]
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise UsageError(f"cannot parse input shape {text!r}") from None
    if len(dims) == 1:
        dims = [1, channels, dims[0], dims[0]]
    elif len(dims) == 2:
        dims = [1, channels] + dims
    if len(dims) != 4 or min(dims) < 1:
        raise UsageError(f"input shape must be NxCxHxW, HxW or S with positive sizes; got {text!r}")
    return tuple(dims)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _model_from_args(cfg: ModelConfig, args) -> Model:
    if getattr(args, "weights", None):
        return load_weights(cfg, args.weights)
    return build_model(cfg, args.seed)


# --- subcommands ---------------------------------------------------------------

def cmd_trace(args, cfg: ModelConfig) -> int:
    shape = parse_shape(args.input_shape, cfg.in_channels)
    try:
        rows = trace_shapes(cfg, shape)
    except ShapeMismatch as exc:
        raise UsageError(str(exc)) from None
    if args.format == "json":
        doc = {"config": cfg.variant, "input_shape": list(shape),
               "downsample": cfg.downsample, "stages": rows}
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
    else:
        lines = [f"input {shape[1]}x{shape[2]}x{shape[3]}  config={cfg.variant}"]
        for r in rows:
            lines.append(f"stage{r['stage']}  C={r['channels']:<4d} H={r['height']:<4d} W={r['width']:<4d} "
                         f"blocks={r['depth']} x metanext")
            if r["stage"] < 4:
                lines.append(f"  downsample ({cfg.downsample})")
        _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def cmd_build(args, cfg: ModelConfig) -> int:
    if not args.out:
        raise UsageError("build needs --out")
    m = build_model(cfg, args.seed)
    save_weights(m, args.out)
    print(f"wrote {args.out}: config={cfg.variant} seed={args.seed} form=training "
          f"params={enumerate_params(m)}")
    return EXIT_OK


def cmd_fuse(args, cfg: ModelConfig) -> int:
    if not args.weights or not args.out:
        raise UsageError("fuse needs --weights and --out")
    m = load_weights(cfg, args.weights)
    fused = fuse_model(m)
    save_weights(fused, args.out)
    shape = parse_shape(args.input_shape, cfg.in_channels)
    before = cost_report(m, shape, instrumented=False)
    after = cost_report(fused, shape, instrumented=False)
    print(f"params {before.params_enumerated} -> {after.params_enumerated}")
    print(f"macs   {before.macs_analytic} -> {after.macs_analytic}  (at {shape[2]}x{shape[3]})")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_verify(args, cfg: ModelConfig) -> int:
    if args.trials < 1 or args.model_trials < 1:
        raise UsageError("--trials and --model-trials must be positive")
    tols = (TOL_TRANSFORM, TOL_BLOCK, TOL_MODEL) if args.tol is None else (args.tol,) * 3
    if min(tols) < 0:
        raise UsageError("--tol must be non-negative")
    report = run_audit(cfg, args.trials, args.model_trials, args.seed, *tols,
                       model_size=args.model_size)
    _emit(report.to_json() + "\n" if args.format == "json" else report.to_text(), args.out)
    return EXIT_OK if report.passed else EXIT_FAIL


def _chunk_rows(m: Model) -> list[dict]:
    """Fused chunk convolution weights per stage against the closed form."""
    cfg = m.config
    rows = []
    for i, stage in enumerate(m.stages):
        if not stage or not (cfg.use_small and cfg.use_medium and cfg.use_large):
            continue
        tm = stage[0].token_mixer
        weights = sum(u.weight.size for u in (tm.small, tm.medium))
        weights += sum(s.weight.size for s in tm.large.stages)
        closed, _ = chunk_conv_cost(tm.channels, 1, 1, cfg.k_m, cfg.k_s, cfg.k_l)
        rows.append({"stage": i + 1, "channels": tm.channels, "closed_form": closed,
                     "enumerated": weights})
    return rows


def cmd_count(args, cfg: ModelConfig) -> int:
    shape = parse_shape(args.input_shape, cfg.in_channels)
    try:
        trace_shapes(cfg, shape)
    except ShapeMismatch as exc:
        raise UsageError(str(exc)) from None
    m = build_model(cfg, args.seed)
    fused = fuse_model(m)
    reports = [cost_report(m, shape, args.instrumented), cost_report(fused, shape, args.instrumented)]
    reference = REFERENCE_TOTALS.get(cfg.variant)
    chunk = _chunk_rows(fused)

    if args.format == "json":
        doc = {"config": cfg.variant, "input_shape": list(shape), "forms": {}, "fused_chunk_conv": chunk}
        for rep in reports:
            doc["forms"][rep.form] = {
                "params_analytic": rep.params_analytic, "params_enumerated": rep.params_enumerated,
                "macs_analytic": rep.macs_analytic, "macs_counted": rep.macs_counted,
                "consistent": rep.consistent,
                "rows": [{"name": r.name, "kind": r.kind, "params_analytic": r.params_analytic,
                          "params_enumerated": r.params_enumerated, "macs_analytic": r.macs_analytic,
                          "macs_counted": r.macs_counted} for r in rep.rows]}
        if reference:
            doc["reference"] = {"params_m": reference[0], "gmacs": reference[1]}
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["form", "name", "kind", "params_analytic", "params_enumerated", "macs_analytic",
                    "macs_counted"])
        for rep in reports:
            for r in rep.rows:
                w.writerow([rep.form, r.name, r.kind, r.params_analytic, r.params_enumerated,
                            r.macs_analytic, "" if r.macs_counted is None else r.macs_counted])
        _emit(buf.getvalue(), args.out)
    else:
        lines = []
        for rep in reports:
            lines.append(f"[{rep.form}]  input {shape[2]}x{shape[3]}")
            lines.append(f"{'part':<16}{'kind':<12}{'params':>12}{'enumerated':>12}{'MACs':>14}"
                         f"{'counted':>14}")
            for r in rep.rows:
                counted = "-" if r.macs_counted is None else str(r.macs_counted)
                lines.append(f"{r.name:<16}{r.kind:<12}{r.params_analytic:>12}{r.params_enumerated:>12}"
                             f"{r.macs_analytic:>14}{counted:>14}")
            lines.append(f"total  params {rep.params_analytic} ({rep.params_analytic / 1e6:.2f} M)  "
                         f"MACs {rep.macs_analytic} ({rep.macs_analytic / 1e9:.3f} G)  "
                         f"consistent={str(rep.consistent).lower()}")
            lines.append("")
        for row in chunk:
            lines.append(f"fused chunk conv stage{row['stage']} C={row['channels']}: "
                         f"closed form {row['closed_form']} weights, enumerated {row['enumerated']}")
        if reference:
            lines.append(f"reference {cfg.variant}: {reference[0]} M params, {reference[1]} GMACs")
        _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK if all(r.consistent for r in reports) else EXIT_FAIL


BENCH_HEADER = ["form", "params", "macs", "median_ms", "p10_ms", "p90_ms"]


def cmd_bench(args, cfg: ModelConfig) -> int:
    if args.repeats < 1:
        raise UsageError("--repeats must be positive")
    shape = parse_shape(args.input_shape, cfg.in_channels)
    try:
        trace_shapes(cfg, shape)
    except ShapeMismatch as exc:
        raise UsageError(str(exc)) from None
    dtype = np.dtype(args.dtype)
    m = _model_from_args(cfg, args)
    forms = [m, fuse_model(m)] if not m.fused else [m]
    x = np.zeros(shape, dtype=dtype)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for form in forms:
        rep = cost_report(form, shape, instrumented=False)
        model = form.astype(dtype)
        model_forward(model, x)  # warmup
        samples = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            model_forward(model, x)
            samples.append((time.perf_counter() - t0) * 1e3)
        p10, med, p90 = np.percentile(samples, [10, 50, 90])
        w.writerow([form.form, rep.params_enumerated, rep.macs_analytic,
                    f"{med:.3f}", f"{p10:.3f}", f"{p90:.3f}"])
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_run(args, cfg: ModelConfig) -> int:
    if not args.input:
        raise UsageError("run needs --input")
    records = read_records(args.input)
    if len(records) != 1:
        raise ShapeMismatch(f"input file must hold exactly one tensor, found {len(records)}")
    x = records[0][1]
    m = _model_from_args(cfg, args).astype(np.dtype(args.dtype))
    logits = model_forward(m, x.astype(args.dtype))
    if args.out:
        write_records(args.out, [("logits", logits)])
    k = min(args.top_k, logits.shape[1])
    for n, row in enumerate(logits):
        top = np.argsort(-row, kind="stable")[:k]
        print(f"sample {n}: top{k} " + " ".join(f"{i}:{row[i]:.6f}" for i in top))
    return EXIT_OK


COMMANDS = {"trace": cmd_trace, "build": cmd_build, "fuse": cmd_fuse, "verify": cmd_verify,
            "count": cmd_count, "bench": cmd_bench, "run": cmd_run}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="repnext", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, shape_default="1x3x224x224", formats=("text", "json")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="M1", help="variant name (M1..M5) or path to a JSON config")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help="output path (default: stdout where applicable)")
        p.add_argument("--format", choices=formats, default=formats[0])
        p.add_argument("--input-shape", default=shape_default, help="NxCxHxW, HxW or S")
        return p

    add("trace", "print the per-stage shape pyramid")
    add("build", "write seeded training-form weights")
    p = add("fuse", "fuse a training-form weight file")
    p.add_argument("--weights", help="training-form weight file")
    p = add("verify", "run the equivalence audit suite", formats=("text", "json"))
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--model-trials", type=int, default=20)
    p.add_argument("--model-size", type=int, default=64)
    p.add_argument("--tol", type=float, default=None,
                   help="one tolerance for every level (default: 1e-12 / 1e-10 / 1e-8 ladder)")
    p = add("count", "parameter and MAC table for both forms", formats=("text", "json", "csv"))
    p.add_argument("--instrumented", action="store_true", help="also count multiplies by running a forward")
    p = add("bench", "time training and fused forwards", shape_default="1x3x64x64", formats=("csv",))
    p.add_argument("--weights")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    p = add("run", "forward one input tensor file and write logits")
    p.add_argument("--weights")
    p.add_argument("--input", help="tensor file holding one NCHW record")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (InvalidConfig, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RepNeXtError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
