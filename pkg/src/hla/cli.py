"""Command-line front end: check, bench, flops, distill.

Exit codes: 0 on success, 1 on failed suites or runtime errors, 2 on
rejected configuration or usage errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

import numpy as np

from .checks import run_suites
from .distill import DistillConfig, distill_run, factor_comparison, write_loss_csv
from .errors import DimensionError, DivergenceError, MemoryCapError, PrecisionError
from .flops import (
    ModelSpec,
    PRESETS,
    flops_hla,
    flops_linear,
    flops_softmax,
    preset_report,
)
from .kernel import HLAConfig, hla_forward
from .reference import linear_attention

BENCH_HEADER = "variant,N,d,d_phi,F,wall_ns,flops,checksum"
_SOFTMAX_BLOCK_ROWS = 512


def _fault_overrides(pairs: list[str]) -> dict:
    out: dict = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"--inject-fault expects KEY=VALUE, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key in ("factors", "d_phi", "head_dim"):
            out[key] = int(raw)
        elif key in ("eps", "decay"):
            out[key] = float(raw)
        elif key == "causal":
            out[key] = raw.strip().lower() in ("1", "true", "yes")
        else:
            raise ValueError(f"unknown config field {key!r}")
    return out


def _cmd_check(args) -> int:
    try:
        overrides = _fault_overrides(args.inject_fault or [])
        results = run_suites(precision=args.precision, seed=args.seed, overrides=overrides)
    except (ValueError, DimensionError, MemoryCapError, PrecisionError) as exc:
        print(f"config rejected: {exc}", file=sys.stderr)
        return 2
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name}: max_err={r.max_err:.3e} tol={r.tol:.1e} {status}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"failed suites: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _blocked_softmax(q, k, v, scale):
    """Row-blocked softmax pass; never materializes the full [n, n]."""
    n = q.shape[2]
    out = np.empty_like(v)
    kt = k.transpose(0, 1, 3, 2)
    for start in range(0, n, _SOFTMAX_BLOCK_ROWS):
        stop = min(start + _SOFTMAX_BLOCK_ROWS, n)
        scores = (q[:, :, start:stop, :] @ kt) * q.dtype.type(scale)
        scores -= scores.max(axis=-1, keepdims=True)
        weights = np.exp(scores)
        denom = weights.sum(axis=-1, keepdims=True, dtype=weights.dtype)
        out[:, :, start:stop, :] = (weights @ v) / denom
    return out


def _bench_inputs(variant, n, d, d_phi, factors, seed, dt, variant_index):
    rng = np.random.default_rng([seed, variant_index, n])
    if variant == "softmax":
        q = rng.standard_normal((1, 1, n, d)).astype(dt)
        k = rng.standard_normal((1, 1, n, d)).astype(dt)
        v = rng.standard_normal((1, 1, n, d)).astype(dt)
        return (q, k, v)
    v = rng.standard_normal((1, 1, n, d)).astype(dt)
    fq = rng.uniform(0.0, 1.0, size=(1, 1, n, d_phi)).astype(dt)
    fks = [rng.uniform(0.0, 1.0, size=(1, 1, n, d_phi)).astype(dt) for _ in range(factors)]
    return (fq, fks, v)


def _bench_flops(variant, n, d, d_phi, factors) -> int:
    kernel_only = dict(
        include_projections=False, include_phi_mlps=False, include_modulation=False
    )
    if variant == "softmax":
        spec = ModelSpec(n_tokens=n, heads=1, head_dim=d, **kernel_only)
        return flops_softmax(spec).total
    spec = ModelSpec(n_tokens=n, heads=1, head_dim=d, d_phi=d_phi, factors=factors, **kernel_only)
    if variant == "linear":
        return flops_linear(spec).total
    return flops_hla(spec).total


def _bench_one(variant, n, args, dt, variant_index):
    factors = {"hla2": 2, "hla3": 3, "hlaF": args.factors, "linear": 1}.get(variant, 0)
    d_phi = 0 if variant == "softmax" else args.d_phi
    inputs = _bench_inputs(variant, n, args.head_dim, d_phi, factors, args.seed, dt, variant_index)

    if variant == "softmax":
        q, k, v = inputs
        scale = 1.0 / float(np.sqrt(args.head_dim))
        run = lambda: _blocked_softmax(q, k, v, scale)
    elif variant == "linear":
        fq, fks, v = inputs
        run = lambda: linear_attention(fq, fks[0], v)
    else:
        fq, fks, v = inputs
        cfg = HLAConfig(factors=factors, d_phi=d_phi, head_dim=args.head_dim)
        run = lambda: hla_forward(cfg, fq, fks, v)[0]

    out = run()  # warmup, also provides the checksum
    checksum = float(np.sum(out, dtype=np.float64))
    times = []
    for _ in range(args.trials):
        t0 = time.perf_counter_ns()
        run()
        times.append(time.perf_counter_ns() - t0)
    wall_ns = int(np.median(times))
    flops = _bench_flops(variant, n, args.head_dim, d_phi, factors)
    return f"{variant},{n},{args.head_dim},{d_phi},{factors},{wall_ns},{flops},{checksum!r}"


def _cmd_bench(args) -> int:
    try:
        seq_lens = [int(s) for s in args.seq_lens.split(",") if s.strip()]
    except ValueError:
        print(f"bad --seq-lens {args.seq_lens!r}", file=sys.stderr)
        return 2
    if not seq_lens or any(n < 1 for n in seq_lens) or seq_lens != sorted(seq_lens):
        print("--seq-lens must be positive and ascending", file=sys.stderr)
        return 2
    variants = [v.strip() for v in args.variant.split(",") if v.strip()]
    known = ("softmax", "linear", "hla2", "hla3", "hlaF")
    for v in variants:
        if v not in known:
            print(f"unknown variant {v!r}; known: {', '.join(known)}", file=sys.stderr)
            return 2
    if args.trials < 3:
        print("--trials must be >= 3 (median of trials)", file=sys.stderr)
        return 2
    dt = np.float32 if args.precision == "single" else np.float64

    def run_all():
        rows = [BENCH_HEADER]
        for vi, variant in enumerate(variants):
            for n in seq_lens:
                rows.append(_bench_one(variant, n, args, dt, vi))
        return rows

    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            rows = run_all()
    else:
        rows = run_all()

    text = "\n".join(rows) + "\n"
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        except OSError as exc:
            print(f"cannot write {args.out}: {exc}", file=sys.stderr)
            return 1
    else:
        sys.stdout.write(text)
    return 0


def _cmd_flops(args) -> int:
    try:
        if args.preset:
            report = preset_report(args.preset)
        else:
            spec = ModelSpec(
                n_tokens=args.n_tokens,
                heads=args.heads,
                head_dim=args.head_dim,
                d_phi=args.d_phi,
                factors=args.factors,
                phi_hidden=args.phi_hidden,
            )
            fn = {"softmax": flops_softmax, "linear": flops_linear, "hla": flops_hla}[args.variant]
            report = fn(spec)
    except KeyError as exc:
        print(str(exc.args[0]), file=sys.stderr)
        return 2
    except DimensionError as exc:
        print(f"bad model spec: {exc}", file=sys.stderr)
        return 2
    text = "\n".join(report.csv_rows()) + "\n" if args.csv else report.to_json() + "\n"
    if args.out:
        try:
            with open(args.out, "w", encoding="utf-8") as f:
                f.write(text)
        except OSError as exc:
            print(f"cannot write {args.out}: {exc}", file=sys.stderr)
            return 1
    else:
        sys.stdout.write(text)
    return 0


def _cmd_distill(args) -> int:
    try:
        cfg = DistillConfig(
            seed=args.seed,
            steps=args.steps,
            batch=args.batch,
            n_tokens=args.n_tokens,
            heads=args.heads,
            head_dim=args.head_dim,
            d_phi=args.d_phi,
            factors=args.factors,
            lr=args.lr,
            optimizer=args.optimizer,
        )
    except ValueError as exc:
        print(f"config rejected: {exc}", file=sys.stderr)
        return 2
    if args.compare_factors:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        comp = factor_comparison(cfg, seeds)
        print(
            f"3-factor median final loss {comp.median_3f!r} ({comp.params_3f} params) vs "
            f"2-factor {comp.median_2f!r} ({comp.params_2f} params); "
            f"3-factor wins: {comp.three_factor_wins}"
        )
        return 0
    try:
        result = distill_run(cfg)
    except DivergenceError as exc:
        print(f"diverged at step {exc.step}", file=sys.stderr)
        return 1
    if args.out:
        write_loss_csv(args.out, result)
    else:
        sys.stdout.write("step,loss,grad_norm\n")
        for step, (loss, gnorm) in enumerate(zip(result.losses, result.grad_norms)):
            sys.stdout.write(f"{step},{loss!r},{gnorm!r}\n")
    print(
        f"initial {result.initial_loss!r} final {result.final_loss!r} "
        f"({result.param_count} trainable params)",
        file=sys.stderr,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hla", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_check = sub.add_parser("check", help="run correctness suites")
    p_check.add_argument("--precision", choices=("single", "double"), default="double")
    p_check.add_argument("--seed", type=int, default=0)
    p_check.add_argument(
        "--inject-fault", action="append", metavar="KEY=VALUE",
        help="override a config field before running (e.g. eps=-1)",
    )
    p_check.set_defaults(fn=_cmd_check)

    p_bench = sub.add_parser("bench", help="micro-benchmark attention variants")
    p_bench.add_argument("--variant", default="hla3", help="comma list: softmax,linear,hla2,hla3,hlaF")
    p_bench.add_argument("--seq-lens", required=True, help="comma list, ascending")
    p_bench.add_argument("--d-phi", type=int, default=4)
    p_bench.add_argument("--factors", type=int, default=4, help="F for the hlaF variant")
    p_bench.add_argument("--head-dim", type=int, default=64)
    p_bench.add_argument("--trials", type=int, default=3)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--threads", type=int, default=None)
    p_bench.add_argument("--precision", choices=("single", "double"), default="single")
    p_bench.add_argument("--out", default=None)
    p_bench.set_defaults(fn=_cmd_bench)

    p_flops = sub.add_parser("flops", help="analytical FLOPs report")
    p_flops.add_argument("--preset", default=None)
    p_flops.add_argument("--variant", choices=("softmax", "linear", "hla"), default="hla")
    p_flops.add_argument("--n-tokens", type=int, default=12600)
    p_flops.add_argument("--heads", type=int, default=12)
    p_flops.add_argument("--head-dim", type=int, default=128)
    p_flops.add_argument("--d-phi", type=int, default=6)
    p_flops.add_argument("--factors", type=int, default=3)
    p_flops.add_argument("--phi-hidden", type=int, default=None)
    p_flops.add_argument("--csv", action="store_true")
    p_flops.add_argument("--out", default=None)
    p_flops.set_defaults(fn=_cmd_flops)

    p_dist = sub.add_parser("distill", help="fit a block to a softmax teacher")
    p_dist.add_argument("--seed", type=int, default=0)
    p_dist.add_argument("--steps", type=int, default=200)
    p_dist.add_argument("--batch", type=int, default=2)
    p_dist.add_argument("--n-tokens", type=int, default=64)
    p_dist.add_argument("--heads", type=int, default=2)
    p_dist.add_argument("--head-dim", type=int, default=16)
    p_dist.add_argument("--d-phi", type=int, default=4)
    p_dist.add_argument("--factors", type=int, default=3)
    p_dist.add_argument("--lr", type=float, default=None)
    p_dist.add_argument("--optimizer", choices=("gd", "adam"), default="gd")
    p_dist.add_argument("--out", default=None)
    p_dist.add_argument("--compare-factors", action="store_true")
    p_dist.add_argument("--seeds", default="0,1,2,3,4", help="seeds for --compare-factors")
    p_dist.set_defaults(fn=_cmd_distill)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (MemoryCapError, PrecisionError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
