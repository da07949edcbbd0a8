"""
Command-line entry point.

    python main.py addition-demo [--no-sticky] [--json]
    python main.py trace [--row T] [--feature I] [--seed S] [--engineered] [--svg PATH]
    python main.py attn-diff [--ablation NAME]
    python main.py gradcheck [--n N] [--d D] [--seed S]
    python main.py tiling-check [--blocks 1,2,8,16]
    python main.py experiment --config claim3.cfg [--steps K] [--publish OWNER/REPO]
    python main.py report --input PATH

Exit codes: 0 pass, 1 failed assertion, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import traceback
from typing import Any

import numpy as np
import pandas as pd

from attention import ABLATIONS, DeltaSource, PrecisionPlan, backward, forward, write_tape
from diagnostics import (
    REPORT_SCHEMA, grad_error_report, read_report_json, similarity_summary, write_report_csv, write_report_json,
)
from experiment_config import Config, ConfigError, load_config, output_dir, resolved_items
from flash import TileConfig, flash_backward, flash_forward, stabilized_flash_forward
from generate_plots import plot_experiment, plot_similarity, plot_trace
from harness import (
    COMPARISON_SCHEMA, ComparisonReport, TrainConfig, TrainingHalted, WorkloadSpec, engineered_row, gen_workload,
    input_grid, make_arm, project, read_metrics_csv, run_experiment, write_comparison_json, write_metrics_csv,
)
from linalg import Mat
from numerics import (
    ContractError, Grid, add_to_b16, check_f32_conformance, f32_bit_string, low_bits_rate, prefix_error_trace,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

# Worked example: a binary32 accumulator carrying a small residual plus a BF16 operand
WORKED_ACC = -2.4071154594421387
WORKED_OPERAND = -2.296875
WORKED_EXACT = -4.703990459442139
WORKED_BITS = "1 10000001 0010111"
WORKED_ERROR = -0.014759540557861328
# Same addition without the residual: ties-even decides
NO_STICKY_ACC = -2.40625
NO_STICKY_RESULT = -4.6875

FD_STEP = 1e-5
GRADCHECK_TOL = 1e-4
DELTA_TOL = 1e-6
TILING_TOL = 1e-10
SIMILARITY_THRESHOLD = 0.9


def print_header(command: str, settings: list[tuple[str, Any]], quiet: bool = False) -> None:
    if quiet:
        return
    print("=" * 60)
    print(f"bf16 flash lab: {command}")
    print("=" * 60)
    for key, value in settings:
        print(f"  {key} = {value}")
    print("-" * 60)


def _check(ok: bool, message: str, quiet: bool = False) -> bool:
    if not quiet:
        print(f"{'✓' if ok else '❌'} {message}")
    return ok


# ---------------------------------------------------------------------------
# addition-demo
# ---------------------------------------------------------------------------

def cmd_addition_demo(args: argparse.Namespace) -> int:
    acc = NO_STICKY_ACC if args.no_sticky else WORKED_ACC
    print_header("addition-demo", [("accumulator", acc), ("operand", WORKED_OPERAND), ("sticky", not args.no_sticky)],
                 args.json)
    walk = add_to_b16(acc, WORKED_OPERAND)

    if args.json:
        event = walk.event
        print(json.dumps({
            "a": walk.a, "b": walk.b, "exact": walk.exact,
            "result_bits": str(walk.result), "result": walk.result.value, "error": walk.error,
            "rounding_bit": walk.rounding_bit, "sticky": walk.sticky, "decision": walk.decision,
            "rounded_up": event.rounded_up, "overflow_shift": event.overflow_shift,
        }))
    else:
        print(f"a (f32)            {walk.a!r:>22}  {f32_bit_string(walk.a)}")
        print(f"b (bf16)           {walk.b!r:>22}  {walk.b_bits}")
        print(f"align              shift {walk.alignment_shift}")
        print(f"  aligned a        {walk.aligned_a}")
        print(f"  aligned b        {walk.aligned_b}")
        print(f"significand sum    {walk.raw_sum}")
        print(f"normalize          shift {walk.normalize_shift}")
        print(f"rounding bit       {walk.rounding_bit}   sticky {int(walk.sticky)}")
        print(f"decision           {walk.decision}")
        print(f"result             {walk.result}  ({walk.result.value!r})")
        print(f"exact sum          {walk.exact!r}")
        print(f"error              {walk.error!r}")

    quiet = args.json
    if args.no_sticky:
        ok = _check(walk.result.value == NO_STICKY_RESULT, f"ties-even result {walk.result.value!r}", quiet)
    else:
        ok = all([
            _check(walk.exact == WORKED_EXACT, f"exact sum {walk.exact!r}", quiet),
            _check(str(walk.result) == WORKED_BITS, f"result bits {walk.result}", quiet),
            _check(walk.error == WORKED_ERROR, f"error {walk.error!r}", quiet),
        ])
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

def _workload_spec(config: Config, seed: int | None = None) -> WorkloadSpec:
    section = dict(config["workload"])
    if seed is not None:
        section["seed"] = seed
    return WorkloadSpec.from_config(section)


def trace_frame(p, v, per_step: bool = False) -> pd.DataFrame:
    events = prefix_error_trace(p, v, per_step)
    return pd.DataFrame({
        "position": [e.position for e in events],
        "p": p,
        "v": v,
        "exact": [e.exact for e in events],
        "rounded": [e.rounded.value for e in events],
        "rounded_bits": [str(e.rounded) for e in events],
        "error": [e.error for e in events],
        "rounded_up": [e.rounded_up for e in events],
        "overflow_shift": [e.overflow_shift for e in events],
        "rounding_bit": [e.rounding_bit for e in events],
        "sticky": [e.sticky for e in events],
    })


def cmd_trace(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    settings = [("row", args.row), ("feature", args.feature), ("seed", args.seed), ("engineered", args.engineered)]
    if not args.engineered:
        settings += [(k, v) for k, v in resolved_items(config) if k.startswith("workload.") and k != "workload.seed"]
    print_header("trace", settings)

    if args.engineered:
        p, v = engineered_row(args.seed)
        name = f"trace_engineered_seed{args.seed}"
    else:
        spec = _workload_spec(config, args.seed)
        if not 0 <= args.row < spec.n:
            raise ContractError(f"--row must be in [0, {spec.n - 1}]")
        if not 0 <= args.feature < spec.d:
            raise ContractError(f"--feature must be in [0, {spec.d - 1}]")
        work = gen_workload(spec)
        plan = PrecisionPlan()
        grid = input_grid(plan)
        tape = forward(project(work.X, work.weights.W_Q, grid), project(work.X, work.weights.W_K, grid),
                       project(work.X, work.weights.W_V, grid), plan=plan)
        p = tape.P_bar.data[args.row]
        v = tape.v.data[:, args.feature]
        name = f"trace_row{args.row}_feature{args.feature}"

    frame = trace_frame(p, v)
    path = os.path.join(output_dir(), f"{name}.csv")
    frame.to_csv(path, index=False)
    print(f"✓ Wrote {len(frame)} positions to {path}")
    steps = frame[frame["overflow_shift"]]
    for _, row in steps.iterrows():
        print(f"  exponent shift at position {int(row['position'])}: error {row['error']:+.6g}")
    print(f"  final error {frame['error'].iloc[-1]!r}")
    if args.svg:
        plot_trace(frame, args.svg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# attn-diff
# ---------------------------------------------------------------------------

def cmd_attn_diff(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    plan = ABLATIONS[args.ablation]
    spec = _workload_spec(config, args.seed)
    print_header("attn-diff", [("ablation", args.ablation), *plan.to_dict().items(),
                               *[(k, v) for k, v in resolved_items(config) if k.startswith("workload.")]])

    work = gen_workload(spec)
    grid = input_grid(plan)
    q, k, v = (project(work.X, w, grid) for w in work.weights)
    tape = forward(q, k, v, plan=plan)
    residual = tape.O_lp.data - work.targets.data
    d_o = Mat.rounded(2.0 * residual / residual.size, plan.backward_mode.grid)
    report = grad_error_report(tape, d_o, work.X)

    folder = output_dir()
    base = os.path.join(folder, f"attn_diff_{args.ablation}")
    write_tape(base + "_tape.bin", tape)
    write_report_json(report, base + ".json")
    write_report_csv(report, base + ".csv")
    print(f"✓ Wrote {base}.json, {base}.csv and {base}_tape.bin")

    gap = np.abs(tape.O_lp.data - tape.O_hp.data)
    print(f"  tie rate (bf16 scores)   {work.tie_rate_measured:.3f}")
    print(f"  max |O_lp - O_hp|        {gap.max():.6g}")
    print(f"  bias_sum                 {report.bias_sum:+.6e}")
    print(f"  zero rank-1 terms        {report.zero_terms}")
    print(f"  similarity > {SIMILARITY_THRESHOLD}         {similarity_summary(report, SIMILARITY_THRESHOLD):.3f}")
    print(f"  r_hat residual           {report.r_hat_residual:.6g}")
    tied = np.count_nonzero(tape.P_bar.data == 1.0, axis=1) > 1
    if tied.any() and tape.P_bar.grid is Grid.B16 and tape.v.grid is Grid.B16:
        rate = low_bits_rate(tape.P_bar.data[tied][:, :, None], tape.v.data[None])
        print(f"  tied rows, P̄·V products with low bits set  {rate:.3f}")
    if args.svg:
        plot_similarity(report.similarity.data, args.svg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _random_inputs(n: int, d: int, seed: int) -> tuple[list[Mat], Mat]:
    rng = np.random.default_rng(seed)
    return [Mat(rng.standard_normal((n, d))) for _ in range(3)], Mat(rng.standard_normal((n, d)))


def finite_difference(q: Mat, k: Mat, v: Mat, g: Mat, which: str, step: float = FD_STEP) -> np.ndarray:
    """Central differences of sum(O ∘ g) with respect to q, k or v in exact arithmetic."""
    plan = PrecisionPlan.all_exact()
    inputs = {"q": q.data, "k": k.data, "v": v.data}
    base = inputs[which]
    grad = np.zeros_like(base)
    for idx in np.ndindex(*base.shape):
        values = []
        for sign in (1.0, -1.0):
            moved = base.copy()
            moved[idx] += sign * step
            args = {**inputs, which: moved}
            o = forward(Mat(args["q"]), Mat(args["k"]), Mat(args["v"]), plan=plan).O_lp.data
            values.append(float(np.sum(o * g.data)))
        grad[idx] = (values[0] - values[1]) / (2.0 * step)
    return grad


def relative_error(got: np.ndarray, want: np.ndarray) -> float:
    scale = max(np.abs(got).max(), np.abs(want).max(), 1e-6)
    return float(np.abs(got - want).max() / scale)


def cmd_gradcheck(args: argparse.Namespace) -> int:
    print_header("gradcheck", [("n", args.n), ("d", args.d), ("seed", args.seed), ("step", FD_STEP),
                               ("tolerance", GRADCHECK_TOL)])
    if args.n < 1 or args.d < 1:
        raise ContractError("--n and --d must be at least 1")
    (q, k, v), g = _random_inputs(args.n, args.d, args.seed)
    plan = PrecisionPlan.all_exact()
    tape = forward(q, k, v, plan=plan)
    grads = backward(tape, g)

    ok = True
    for name, analytic in (("q", grads.dQ), ("k", grads.dK), ("v", grads.dV)):
        err = relative_error(analytic.data, finite_difference(q, k, v, g, name))
        ok &= _check(err < GRADCHECK_TOL, f"d{name.upper()} max relative error {err:.3e}")

    for source in (DeltaSource.DP_P, DeltaSource.RECOMPUTE_PV_HP):
        other = backward(tape, g, dataclasses.replace(plan, delta_source=source))
        err = relative_error(other.dQ.data, grads.dQ.data)
        ok &= _check(err < DELTA_TOL, f"δ from {source.value}: dQ relative difference {err:.3e}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# tiling-check
# ---------------------------------------------------------------------------

def _blocks(text: str | None, n: int) -> list[int]:
    if not text:
        return sorted({1, 2 if n >= 2 else 1, max(1, n // 2), n})
    try:
        blocks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ContractError(f"--blocks must be a comma-separated list of integers, got {text!r}") from None
    return blocks


def cmd_tiling_check(args: argparse.Namespace) -> int:
    blocks = _blocks(args.blocks, args.n)
    print_header("tiling-check", [("n", args.n), ("d", args.d), ("seed", args.seed), ("blocks", blocks),
                                  ("tolerance", TILING_TOL)])
    (q, k, v), g = _random_inputs(args.n, args.d, args.seed)
    ok = True

    exact = PrecisionPlan.all_exact()
    ref = forward(q, k, v, plan=exact)
    ref_grads = backward(ref, g)
    for b in blocks:
        cfg = TileConfig(b, b)
        out = flash_forward(q, k, v, cfg=cfg, plan=exact)
        grads = flash_backward(q, k, v, out.O, g, out.L, cfg, exact, o_hp=out.O_hp)
        diff = max(np.abs(out.O.data - ref.O_lp.data).max(), np.abs(grads.dQ.data - ref_grads.dQ.data).max(),
                   np.abs(grads.dK.data - ref_grads.dK.data).max(), np.abs(grads.dV.data - ref_grads.dV.data).max())
        ok &= _check(diff < TILING_TOL, f"exact, block {b}: max |Δ| {diff:.3e}")

    stab = stabilized_flash_forward(q, k, v, cfg=TileConfig(args.n, args.n, stabilized=True), plan=exact)
    diff = float(np.abs(stab.O.data - ref.O_lp.data).max())
    ok &= _check(diff < TILING_TOL, f"exact, stabilized vs standard: max |Δ| {diff:.3e}")

    lp = PrecisionPlan()
    qb, kb, vb = (Mat.rounded(x.data, Grid.B16) for x in (q, k, v))
    gb = Mat.rounded(g.data, Grid.F32)
    tape = forward(qb, kb, vb, plan=lp)
    lp_grads = backward(tape, gb)
    full = flash_forward(qb, kb, vb, cfg=TileConfig(args.n, args.n), plan=lp)
    same = full.O.same_bits(tape.O_lp) and full.O_hp.same_bits(tape.O_hp) and full.L.same_bits(tape.L)
    ok &= _check(same, f"lp, block {args.n}: forward bitwise equal")
    for b in blocks:
        grads = flash_backward(qb, kb, vb, full.O, gb, full.L, TileConfig(b, b), lp, o_hp=full.O_hp)
        same = all(getattr(grads, f).same_bits(getattr(lp_grads, f)) for f in ("dQ", "dK", "dV"))
        ok &= _check(same, f"lp, block {b}: backward bitwise equal")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def check_assertions(config: Config, report: ComparisonReport) -> tuple[bool, list[tuple[str, bool, str]]]:
    """Evaluate the configured assertions; returns (all_passed, [(name, passed, detail)])."""
    checks = []
    rules = config["assertions"]
    first, second = report.arms
    if len(first.bias_cumsum) == 0:
        return True, checks
    if rules["expect_bias_positive"]:
        final = first.bias_cumsum[-1]
        checks.append(("bias_positive", final > 0, f"{first.name} final bias_cumsum {final:+.6e}"))
    if rules["expect_bias_reduction"] > 0:
        want = rules["expect_bias_reduction"]
        checks.append(("bias_reduction", report.bias_reduction >= want,
                       f"|bias_cumsum| reduced {report.bias_reduction:.3g}x (need {want:g}x)"))
    if rules["expect_norm_ordering"]:
        a, b = report.norm_growth[first.name], report.norm_growth[second.name]
        checks.append(("norm_ordering", b < a, f"W_Q norm slope {second.name} {b:.3e} < {first.name} {a:.3e}"))
    return all(passed for _, passed, _ in checks), checks


def cmd_experiment(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.steps is not None:
        if args.steps < 0:
            raise ContractError("--steps must be non-negative")
        config["training"]["steps"] = args.steps
    print_header("experiment", [("config", args.config), *resolved_items(config)])

    spec = WorkloadSpec.from_config(config["workload"])
    cfg = TrainConfig.from_config(config)
    normalize = config["arms"]["normalize"]
    arm_a, arm_b = make_arm(config["arms"]["a"], normalize), make_arm(config["arms"]["b"], normalize)
    folder = output_dir()
    report = run_experiment(spec, arm_a, arm_b, cfg.steps, cfg, batch_log=os.path.join(folder, "batches.bin"))

    metrics_path = os.path.join(folder, "metrics.csv")
    report_path = os.path.join(folder, "comparison.json")
    write_metrics_csv(report, metrics_path)
    write_comparison_json(report, report_path)
    print(f"✓ Wrote {metrics_path} and {report_path}")
    paths = [metrics_path, report_path]
    if cfg.steps > 0:
        paths += plot_experiment(read_metrics_csv(metrics_path), folder)

    passed, checks = check_assertions(config, report)
    if not checks:
        print("⚠️ No assertions evaluated")
    for _, ok, detail in checks:
        _check(ok, detail)

    if args.publish:
        from publish import publish_files
        print(f"Publishing {len(paths)} files to {args.publish}...")
        publish_files(args.publish, [p for p in paths if p.endswith((".csv", ".json", ".svg"))])
    return EXIT_OK if passed else EXIT_FAIL


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    print_header("report", [("input", args.input)])
    path = args.input
    if not os.path.isfile(path):
        raise FileNotFoundError(f"input not found: {path}")

    if path.endswith(".csv"):
        metrics = read_metrics_csv(path)
        print(f"✓ Read {len(metrics)} metric rows")
        for arm, rows in metrics.groupby("arm", sort=False):
            last = rows.iloc[-1]
            print(f"  {arm}: steps={len(rows)} loss={last['loss']:.6g} bias_cumsum={last['bias_cumsum']:+.6e} "
                  f"norm_W_Q={last['norm_W_Q']:.6g}")
        return EXIT_OK

    with open(path, "r", encoding="utf-8") as f:
        schema = json.load(f).get("schema")
    if schema == REPORT_SCHEMA:
        report = read_report_json(path)
        print(f"✓ Gradient-error report: {report.n_tokens} tokens")
        print(f"  bias_sum        {report.bias_sum:+.6e}")
        print(f"  zero terms      {report.zero_terms}")
        print(f"  r_hat residual  {report.r_hat_residual:.6g}")
        if report.similarity.rows == report.n_tokens:
            print(f"  similarity > {SIMILARITY_THRESHOLD}  {similarity_summary(report, SIMILARITY_THRESHOLD):.3f}")
    elif schema == COMPARISON_SCHEMA:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        print(f"✓ Comparison report: bias reduction {data['bias_reduction']:.3g}x")
        for name, arm in data["arms"].items():
            print(f"  {name}: final bias_cumsum {arm['final_bias_cumsum']:+.6e}")
    else:
        raise ContractError(f"unrecognised report schema {schema!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="BF16 flash-attention rounding lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("addition-demo", help="bit-level walkthrough of the worked BF16 addition")
    p.add_argument("--no-sticky", action="store_true", help="drop the accumulator residual")
    p.add_argument("--json", action="store_true", help="print the event as JSON only")
    p.set_defaults(func=cmd_addition_demo)

    p = sub.add_parser("trace", help="prefix rounding-error trace of one P̄ row against one V column")
    p.add_argument("--config", default=None)
    p.add_argument("--row", type=int, default=1)
    p.add_argument("--feature", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--engineered", action="store_true", help="use an engineered row with two unit probabilities")
    p.add_argument("--svg", default=None, help="write a step plot to this path")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("attn-diff", help="gradient-error report for one attention call")
    p.add_argument("--config", default=None)
    p.add_argument("--ablation", default="baseline", choices=sorted(ABLATIONS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--svg", default=None, help="write the similarity heatmap to this path")
    p.set_defaults(func=cmd_attn_diff)

    p = sub.add_parser("gradcheck", help="finite-difference check of the exact backward pass")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("tiling-check", help="tiled vs non-tiled attention")
    p.add_argument("--blocks", default=None, help="comma-separated block sizes")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_tiling_check)

    p = sub.add_parser("experiment", help="paired training runs")
    p.add_argument("--config", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--publish", default=None, metavar="OWNER/REPO")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="summarise a report JSON or metrics CSV")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    try:
        check_f32_conformance()
    except RuntimeError as e:
        print(f"❌ {e}")
        return EXIT_FAIL

    try:
        return args.func(args)
    except (ContractError, ConfigError, FileNotFoundError) as e:
        print(f"❌ {e}")
        return EXIT_USAGE
    except TrainingHalted as e:
        print(f"❌ {e}")
        return EXIT_FAIL
    except Exception as e:
        print(f"\n❌ Error occurred: {e}")
        traceback.print_exc()
        raise


if __name__ == "__main__":
    sys.exit(main())
