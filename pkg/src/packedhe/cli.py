"""Command line front end: operation-count benchmarks and training runs.

Subcommands:

* ``matmul-bench``  packed matrix product vs. the naive and diagonal reference
                    paths, plus the analytic replication-packing cost row
* ``sign-bench``    composite sign approximation: minimal depth, depth bound,
                    grid error, CSV error profile
* ``train``         end-to-end encrypted federated training from a JSON config
                    and per-party CSV datasets
* ``microbench``    wall time and meter deltas of individual operations

Exit status is 0 iff every assertion embedded in the produced reports passed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import matrix, references
from .approx import (CompositePolySpec, app_sign, closeness_grid,
                     depth_bound_formula, eval_composite,
                     make_local_bootstrapper, stage_depth)
from .bench import BenchReport, write_report
from .engine import OpCounter, new_context
from .federated.config import config_from_dict, load_dataset_csv
from .federated.protocol import run_training
from .matrix import matmul_rotation_formula


def _context_for(h: int, beta: int = 1, level: int = 6, parties: int = 1):
    ctx = new_context(2 * beta * h * h, level, 2.0 ** 40, parties)
    return matrix.register_context(ctx)


def cmd_matmul_bench(args) -> list:
    rng = np.random.default_rng(args.seed)
    sizes = [int(s) for s in args.sizes.split(",")]
    reports = []
    for h in sizes:
        ctx = _context_for(h, args.beta)
        report = BenchReport("matmul-bench-h%d" % h,
                            {"h": h, "beta": args.beta, "repeat": args.repeat,
                             "seed": args.seed})
        start = time.perf_counter()
        packed = naive = diag = None
        for _ in range(args.repeat):
            mats_a = [rng.standard_normal((h, h)) for _ in range(args.beta)]
            mats_b = [rng.standard_normal((h, h)) for _ in range(args.beta)]
            pa = matrix.pack_matrices(mats_a, ctx)
            pb = matrix.pack_matrices(mats_b, ctx)
            with ctx.meter_scope() as packed:
                pc = matrix.he_mat_mult(pa, pb)
            for slot, (ma, mb) in enumerate(zip(mats_a, mats_b)):
                got = matrix.decode_matrix(pc, slot)
                err = np.max(np.abs(got - ma @ mb))
                tol = 1e-9 * h * max(np.max(np.abs(ma)), np.max(np.abs(mb))) ** 2
                if err > tol:
                    report.note(f"correctness drift {err:.3e} > {tol:.3e}")
            if args.beta == 1:
                with ctx.meter_scope() as naive:
                    references.naive_mat_mult(pa, pb)
                with ctx.meter_scope() as diag:
                    references.diagonal_mat_mult(pa, pb)
        report.wall_time_ms = (time.perf_counter() - start) * 1e3
        report.meter = packed.snapshot()
        report.add_row("packed", rotations=packed.rotations, adds=packed.adds,
                       mul_pt=packed.mul_pt, mul_ct=packed.mul_ct)
        if naive is not None:
            report.add_row("naive_lintrans", rotations=naive.rotations,
                           adds=naive.adds, mul_pt=naive.mul_pt,
                           mul_ct=naive.mul_ct)
            report.add_row("diagonal_vectors", rotations=diag.rotations,
                           adds=diag.adds, mul_pt=diag.mul_pt,
                           mul_ct=diag.mul_ct)
        ap = references.alternating_packing_rotations(h, h)
        report.add_row("alternating_packing", analytic=True, rotations=ap)

        per_call = args.repeat
        report.check("rotation ceiling", "rotations <= (3h + 5*sqrt(h)) per call",
                     matmul_rotation_formula(h) * per_call, packed.rotations)
        report.check("ciphertext products", "mul_ct == h per call",
                     h * per_call, packed.mul_ct, mode="eq")
        report.check("plaintext products", "mul_pt <= 4h per call",
                     4 * h * per_call, packed.mul_pt)
        report.check("additions", "adds + subs <= 6h per call",
                     6 * h * per_call, packed.adds + packed.subs)
        if naive is not None:
            report.check("naive dominance", "packed rotations < naive rotations",
                         naive.rotations, packed.rotations, mode="lt")
            report.check("diagonal dominance",
                         "packed rotations < diagonal rotations",
                         diag.rotations, packed.rotations, mode="lt")
        if h == 64:
            report.check("rotation identity at h=64", "rotations == 232 per call",
                         232 * per_call, packed.rotations, mode="eq")
            report.check("analytic replication-packing rotations",
                         "omega*log2(h*omega) == 768 at h=omega=64", 768, ap,
                         mode="eq")
        reports.append(report)
    return reports


def cmd_sign_bench(args) -> list:
    spec = CompositePolySpec.for_closeness(args.d, args.sigma, args.delta)
    bound = depth_bound_formula(args.d, args.sigma, args.delta)
    grid = closeness_grid(args.delta, args.grid_size)
    vals = eval_composite(grid, spec)
    errors = np.abs(vals - 1.0)
    max_err = float(np.max(errors))

    report = BenchReport("sign-bench",
                         {"d": args.d, "sigma": args.sigma, "delta": args.delta,
                          "grid_size": args.grid_size, "seed": args.seed})
    start = time.perf_counter()
    report.add_row("composite", depth_k=spec.k, bound=bound,
                   stage_levels=stage_depth(args.d), max_error=max_err)
    report.check("closeness", "max grid error <= 2**-sigma",
                 2.0 ** -args.sigma, max_err)
    report.check("depth bound", "minimal k <= closed-form bound + slack",
                 bound, spec.k)
    report.wall_time_ms = (time.perf_counter() - start) * 1e3

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["m,composite_value,abs_error"]
        stride = max(1, len(grid) // 10_000)
        for m, v, e in zip(grid[::stride], vals[::stride], errors[::stride]):
            lines.append(f"{float(m)!r},{float(v)!r},{float(e)!r}")
        (out / "sign_error_profile.csv").write_text("\n".join(lines) + "\n")
    return [report]


def cmd_train(args) -> list:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise FileNotFoundError(f"config file not found: {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{cfg_path}: invalid JSON ({exc})") from None
    config = config_from_dict(raw)

    data_dir = Path(args.data_dir)
    shards = [load_dataset_csv(data_dir / f"party_{p}.csv")
              for p in range(config.party_count)]
    test_path = data_dir / "test.csv"
    test_set = load_dataset_csv(test_path) if test_path.exists() else None

    result = run_training(config, shards, transport=args.transport,
                          test_set=test_set)

    out = Path(args.out) if args.out else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    metrics_text = json.dumps(result.metrics, sort_keys=True, indent=2)
    (out / "metrics.json").write_text(metrics_text + "\n")
    for j, w in enumerate(result.final_weights):
        (out / f"model_layer_{j}.csv").write_text(matrix.matrix_to_csv(w))

    final = result.metrics["final"]
    print(f"final accuracy {final['accuracy']:.4f} | ideal-activation "
          f"reference {final['exact_activation_accuracy']:.4f} | "
          f"delta {final['accuracy_delta']:.4f}")
    report = BenchReport("train", {"config": str(cfg_path),
                                   "transport": args.transport,
                                   "seed": config.seed})
    report.meter = final["ops_total"]
    report.add_row("encrypted_training",
                   accuracy=final["accuracy"],
                   reference=final["exact_activation_accuracy"])
    return [report]


MICRO_OPS = ("rot", "add", "sub", "mul_pt", "mul_ct", "rescale", "dbootstrap",
             "he_mat_mult", "he_transpose", "he_rect_mat_mult", "app_sign")


def _run_micro(op: str, h: int, rng) -> tuple:
    parties = 2
    ctx = _context_for(h, level=6, parties=parties)
    extras = {}
    if op in ("rot", "add", "sub", "mul_pt", "mul_ct", "rescale", "dbootstrap"):
        ct = ctx.encrypt(ctx.encode(rng.standard_normal(min(h, ctx.slot_count))))
        other = ctx.encrypt(ctx.encode(rng.standard_normal(min(h, ctx.slot_count))))
        pt = ctx.encode(np.ones(ctx.slot_count))
        fn = {
            "rot": lambda: ctx.rot(ct, 1),
            "add": lambda: ctx.add(ct, other),
            "sub": lambda: ctx.sub(ct, other),
            "mul_pt": lambda: ctx.mul_pt(ct, pt),
            "mul_ct": lambda: ctx.mul_ct(ct, other),
            "rescale": lambda: ctx.rescale(ctx.mul_ct(ct, other)),
            "dbootstrap": lambda: ctx.dbootstrap(ct, ctx.parties),
        }[op]
    elif op == "he_mat_mult":
        pa = matrix.encode_matrix(rng.standard_normal((h, h)), ctx)
        pb = matrix.encode_matrix(rng.standard_normal((h, h)), ctx)
        fn = lambda: matrix.he_mat_mult(pa, pb)
    elif op == "he_transpose":
        pa = matrix.encode_matrix(rng.standard_normal((h, h)), ctx)
        spec = matrix.build_permutation("transpose", h)
        extras["diagonal_count"] = len(spec.diagonals)
        fn = lambda: matrix.he_transpose(pa)
    elif op == "he_rect_mat_mult":
        t = max(h // 4, 1)
        pa = matrix.encode_rect_matrix(rng.standard_normal((t, h)), ctx)
        pb = matrix.encode_matrix(rng.standard_normal((h, h)), ctx)
        extras["rows_t"] = t
        fn = lambda: matrix.he_rect_mat_mult(pa, pb)
    elif op == "app_sign":
        spec = CompositePolySpec.for_closeness(4, 20.0, 2.0 ** -20)
        ct = ctx.encrypt(ctx.encode(
            rng.uniform(-1, 1, size=min(h, ctx.slot_count))))
        refresh = make_local_bootstrapper(ctx)
        extras["depth_k"] = spec.k
        fn = lambda: app_sign(ct, spec, ctx, refresh)
    else:
        raise ValueError(f"unknown microbench op {op!r}; "
                         f"registered: {', '.join(MICRO_OPS)}")
    with ctx.meter_scope() as scope:
        start = time.perf_counter()
        fn()
        elapsed = (time.perf_counter() - start) * 1e3
    return elapsed, scope.snapshot(), extras


def cmd_microbench(args) -> list:
    """Meters accumulate over all repeats; wall time is the per-call median."""
    if args.op not in MICRO_OPS:
        raise ValueError(f"unknown microbench op {args.op!r}; "
                         f"registered: {', '.join(MICRO_OPS)}")
    rng = np.random.default_rng(args.seed)
    reports = []
    for h in (int(s) for s in args.sizes.split(",")):
        times = []
        total = OpCounter()
        extras = None
        for _ in range(args.repeat):
            elapsed, meter, extras = _run_micro(args.op, h, rng)
            times.append(elapsed)
            for name, count in meter.items():
                setattr(total, name, getattr(total, name) + count)
        report = BenchReport(f"microbench-{args.op}-h{h}",
                             {"op": args.op, "h": h, "repeat": args.repeat,
                              "seed": args.seed})
        report.meter = total.snapshot()
        report.wall_time_ms = float(np.median(times))
        report.add_row(args.op, median_ms=float(np.median(times)), **extras,
                       **total.snapshot())
        reports.append(report)
    return reports


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="packedhe",
        description="Packed-ciphertext matrix algebra and encrypted training "
                    "benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=str, default=None,
                        help="directory for JSON/CSV outputs")
    common.add_argument("--json", action="store_true",
                        help="print reports as JSON instead of tables")

    p = sub.add_parser("matmul-bench", parents=[common],
                       help="matrix product op-count comparison")
    p.add_argument("--sizes", type=str, default="4,16,64",
                   help="comma-separated matrix sides")
    p.add_argument("--beta", type=int, default=1, help="matrices per ciphertext")
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(fn=cmd_matmul_bench)

    p = sub.add_parser("sign-bench", parents=[common],
                       help="composite sign approximation profile")
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--sigma", type=float, default=20.0)
    p.add_argument("--delta", type=float, default=2.0 ** -20)
    p.add_argument("--grid-size", type=int, default=100_000)
    p.set_defaults(fn=cmd_sign_bench)

    p = sub.add_parser("train", parents=[common],
                       help="encrypted federated training run")
    p.add_argument("--config", type=str, required=True, help="JSON config file")
    p.add_argument("--data-dir", type=str, required=True,
                   help="directory with party_<i>.csv shards (and optional "
                        "test.csv)")
    p.add_argument("--transport", choices=("in_process", "tcp"),
                   default="in_process")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("microbench", parents=[common],
                       help="wall time and meter deltas of single ops")
    p.add_argument("--op", type=str, required=True)
    p.add_argument("--sizes", type=str, default="8")
    p.add_argument("--repeat", type=int, default=3)
    p.set_defaults(fn=cmd_microbench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        reports = args.fn(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ok = True
    for report in reports:
        if args.json:
            print(report.to_json())
        else:
            print(report.render_text())
            print()
        if args.out:
            write_report(report, args.out, args.json)
        ok = ok and report.passed
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
