"""Benchmark command line: plan | bench | gradcheck | calibrate | train.

Outputs are machine-readable: JSON on stdout for plan/gradcheck/calibrate,
CSV files for bench/train (bench also writes a two-column plot-data file
per strategy). Exit codes: 0 success, 1 check failure, 2 usage error.

Flags may also come from a plain-text config file of `key = value` lines
(--config); command-line flags override it. No environment variables are
consulted.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .engine import CheckpointPlan, baseline_plan, run_strategy, STRATEGIES
from .ledger import ActivationLedger, BudgetExceededError
from .planner import (
    CalibrationError,
    CostConstants,
    UNIT_CONSTANTS,
    calibrate,
    engine_constants,
    optimal_plan,
)
from .ssd import SSDStack, init_params, make_config
from .training import (
    TaskSpec,
    TrainingDivergedError,
    gradcheck_fd,
    losses_to_csv,
    magc_plan_for,
    train,
)

BENCH_HEADER = ("strategy,L,S,l,s,peak_units,predicted_units,"
                "overhead_units,step_evals,wall_ms,seed")


class UsageError(Exception):
    pass


def _positive(name: str, value: int) -> int:
    if value < 1:
        raise UsageError(f"{name} must be >= 1, got {value}")
    return value


def _effective_granularity(args, S: int) -> int:
    if args.paper_faithful and S >= 256:
        return 256
    return args.granularity


def _load_constants(path: str | None) -> CostConstants | None:
    if path is None:
        return None
    with open(path) as f:
        doc = json.load(f)
    if "constants" in doc:
        doc = doc["constants"]
    return CostConstants(doc["c_l"], doc["c_s"], doc["c_grid"], doc["c_state"])


def _model_for(args, L: int) -> SSDStack:
    config = make_config(L=L, d=args.dim, H=args.heads, N=args.state,
                         precision=args.precision)
    return SSDStack(config, init_params(config, args.seed))


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan(args) -> int:
    _positive("--layers", args.layers)
    _positive("--seq", args.seq)
    constants = _load_constants(args.constants_file) or UNIT_CONSTANTS
    report = optimal_plan(args.layers, args.seq, constants,
                          _effective_granularity(args, args.seq))
    print(report.to_json())
    return 0


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_bench(args) -> int:
    layer_list = [_positive("--layers", int(v)) for v in args.layers.split(",")]
    lo, _, hi = args.seq_pows.partition(":")
    pow_lo, pow_hi = int(lo), int(hi or lo)
    if pow_lo > pow_hi:
        raise UsageError("--seq-pows must be MIN:MAX with MIN <= MAX")
    seq_list = [2**n for n in range(pow_lo, pow_hi + 1)]
    strategies = list(STRATEGIES) if args.strategies == "all" else [
        v.strip() for v in args.strategies.split(",")]
    for st in strategies:
        if st not in STRATEGIES:
            raise UsageError(f"unknown strategy {st!r}")
    if args.out is None:
        raise UsageError("--out is required for bench")
    constants_file = _load_constants(args.constants_file)

    rows = []
    plot: dict[str, list[tuple[int, float]]] = {st: [] for st in strategies}
    for strategy in strategies:
        for L in layer_list:
            for S in seq_list:
                model = _model_for(args, L)
                rng = np.random.default_rng(args.seed + S)
                x = rng.standard_normal((S, model.config.d)).astype(model.config.dtype)
                target = rng.standard_normal(x.shape).astype(model.config.dtype)
                plan = None
                predicted = None
                if strategy == "magc":
                    constants = constants_file or engine_constants(model.config)
                    g = _effective_granularity(args, S)
                    rep = optimal_plan(L, S, constants, g)
                    plan = CheckpointPlan(l=rep.l, s=rep.s, granularity=g)
                    predicted = rep.predicted_units
                elif strategy in ("gc_on", "sqrt_gc"):
                    plan = baseline_plan(strategy, L, S)
                ledger = ActivationLedger(budget_units=args.budget_units)
                try:
                    _, _, m = run_strategy(model, x, target, strategy, ledger, plan)
                    row = {
                        "strategy": strategy, "L": L, "S": S,
                        "l": m["l"], "s": m["s"],
                        "peak_units": m["peak_units"],
                        "predicted_units": predicted,
                        "overhead_units": m["overhead_units"],
                        "step_evals": m["step_evals"],
                        "wall_ms": m["wall_ms"], "seed": args.seed,
                    }
                    plot[strategy].append((S, m["overhead_units"]))
                except BudgetExceededError:
                    row = {
                        "strategy": strategy, "L": L, "S": S,
                        "l": plan.l if plan else None,
                        "s": plan.s if plan else None,
                        "peak_units": "-", "predicted_units": predicted,
                        "overhead_units": None, "step_evals": None,
                        "wall_ms": None, "seed": args.seed,
                    }
                rows.append(row)

    rows.sort(key=lambda r: (r["strategy"], r["L"], r["S"]))
    out = Path(args.out)
    with out.open("w") as f:
        f.write(BENCH_HEADER + "\n")
        for r in rows:
            f.write(",".join(_fmt(r[k]) for k in BENCH_HEADER.split(",")) + "\n")
    plot_path = out.with_suffix(out.suffix + ".plot.txt")
    with plot_path.open("w") as f:
        for st in sorted(plot):
            f.write(f"# {st}\n")
            for S, overhead in sorted(plot[st]):
                f.write(f"{S} {overhead}\n")
            f.write("\n")
    print(f"wrote {len(rows)} records to {out} (plot data: {plot_path})")
    return 0


def cmd_gradcheck(args) -> int:
    config = make_config(L=args.layers, d=args.dim, H=args.heads, N=args.state,
                         precision=args.precision)
    task = TaskSpec(kind="decay_sum", S=args.seq, d=args.dim, seed=args.seed)
    max_rel_err = gradcheck_fd(config, task, eps=args.eps, seed=args.seed,
                               corrupt=args.corrupt_gradients)
    passed = max_rel_err <= 1e-6
    print(json.dumps({"max_rel_err": max_rel_err, "pass": passed}, indent=2))
    return 0 if passed else 1


def cmd_calibrate(args) -> int:
    probes = []
    for item in args.probes.split(","):
        parts = item.split(":")
        if len(parts) != 3:
            raise UsageError("--probes must be a comma list of l:s:S triples")
        probes.append(tuple(int(v) for v in parts))
    if len(probes) < 4:
        raise UsageError(f"need >= 4 probes, got {len(probes)}")

    measured = []
    for l, s, S in probes:
        model = _model_for(args, args.layers)
        rng = np.random.default_rng(args.seed + S)
        x = rng.standard_normal((S, model.config.d)).astype(model.config.dtype)
        target = rng.standard_normal(x.shape).astype(model.config.dtype)
        ledger = ActivationLedger()
        _, _, m = run_strategy(model, x, target, "magc", ledger,
                               CheckpointPlan(l=l, s=s))
        measured.append((args.layers, S, l, s, m["overhead_units"]))
    result = calibrate(measured)
    doc = result.to_json_dict()
    doc["probes"] = [
        {"L": L, "S": S, "l": l, "s": s, "overhead_units": peak}
        for (L, S, l, s, peak) in measured
    ]
    text = json.dumps(doc, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote constants to {args.out}")
    else:
        print(text)
    return 0


def cmd_train(args) -> int:
    config = make_config(L=args.layers, d=args.dim, H=args.heads, N=args.state,
                         precision=args.precision)
    task = TaskSpec(kind=args.task, S=args.seq, d=args.dim, delay=args.delay,
                    seed=args.seed)
    try:
        losses = train(config, task, args.steps, args.strategy, args.seed,
                       lr=args.lr)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    csv_text = losses_to_csv(losses)
    if args.out:
        Path(args.out).write_text(csv_text)
        print(f"wrote {len(losses)} rows to {args.out}")
    else:
        print(csv_text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--budget-units", type=int, default=None)
    p.add_argument("--granularity", type=int, default=1)
    p.add_argument("--paper-faithful", action="store_true",
                   help="restrict s to multiples of 256 when S >= 256")
    p.add_argument("--config", type=str, default=None,
                   help="plain-text key = value defaults; flags override")


def _add_geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--state", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridckpt",
        description="grid-checkpointing planner, benchmarks and training demos",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="optimal checkpoint intervals for (L, S)")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--seq", type=int, required=True)
    p.add_argument("--constants-file", type=str, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bench", help="strategy sweep, CSV + plot data")
    p.add_argument("--layers", type=str, default="16",
                   help="comma-separated layer counts")
    p.add_argument("--seq-pows", type=str, default="8:12",
                   help="MIN:MAX exponents; S sweeps powers of two")
    p.add_argument("--strategies", type=str, default="all")
    p.add_argument("--constants-file", type=str, default=None)
    _add_geometry(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seq", type=int, default=12)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--corrupt-gradients", action="store_true",
                   help=argparse.SUPPRESS)
    _add_geometry(p)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("calibrate", help="fit cost constants from probe runs")
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--probes", type=str, required=True,
                   help="comma list of l:s:S probe plans (>= 4)")
    _add_geometry(p)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="train on a synthetic task, CSV loss curve")
    p.add_argument("--task", choices=("delayed_copy", "decay_sum"),
                   default="decay_sum")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--seq", type=int, default=128)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--strategy", choices=STRATEGIES, default="magc")
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--delay", type=int, default=1)
    _add_geometry(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)
    return parser


def _config_file_args(argv: list[str]) -> list[str]:
    """Expand a --config file into flags inserted after the subcommand."""
    if "--config" not in argv:
        return argv
    at = argv.index("--config")
    if at + 1 >= len(argv):
        raise UsageError("--config needs a file path")
    path = argv[at + 1]
    extra: list[str] = []
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{line_no}: expected key = value")
        key = key.strip().replace("_", "-")
        value = value.strip()
        if value.lower() in ("true", "false"):
            if value.lower() == "true":
                extra.append(f"--{key}")
        else:
            extra.extend((f"--{key}", value))
    # insert right after the subcommand so explicit flags (later) win
    return argv[:1] + extra + argv[1:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv:
            argv = _config_file_args(argv)
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, CalibrationError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
