"""Command-line entry point.

Subcommands: gen-data, train, eval, rollout, plan, memory-report, verify.
Exit codes: 0 success, 1 validation failure (bad config, missing prerequisite
checkpoint), 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, load_config
from .model import LadderError
from .pipeline import MissingPhaseError
from .tensor import FormatError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghvae",
                                description="Greedy hierarchical video prediction toolkit")
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--out", default="runs/default", help="output directory for artifacts")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the train/test sprite datasets")

    tr = sub.add_parser("train", help="train greedily phase by phase, or end-to-end")
    group = tr.add_mutually_exclusive_group()
    group.add_argument("--phase", type=int, help="train a single phase k (needs phase k-1)")
    group.add_argument("--all", action="store_true", help="run every phase in order")

    ev = sub.add_parser("eval", help="best-of-S metrics on the held-out split")
    ev.add_argument("--prior", choices=["learned", "uniform"], default=None)

    ro = sub.add_parser("rollout", help="export predicted frames for one episode")
    ro.add_argument("--episode", type=int, default=0)
    ro.add_argument("--gif", action="store_true")
    ro.add_argument("--strip", action="store_true")

    pl = sub.add_parser("plan", help="random-shooting push-to-region trials")
    pl.add_argument("--model", choices=["oracle", "learned"], default=None)

    sub.add_parser("memory-report", help="greedy vs end-to-end training memory estimates")

    ve = sub.add_parser("verify", help="run the oracle suites (gradients, KL, bound, metrics)")
    ve.add_argument("--instances", type=int, default=100,
                    help="gradient-check instances per op")
    return p


def _run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)

    if args.command == "gen-data":
        info = pipeline.gen_data(cfg)
        print(json.dumps(info, indent=1, sort_keys=True))
        return 0

    if args.command == "train":
        if args.phase is not None:
            summary = pipeline.train_one_phase(cfg, out, args.phase)
            print(f"phase {args.phase} done: final elbo/pixel "
                  f"{summary['final_elbo_per_pixel']:.4f}")
        else:
            report = pipeline.train_all(cfg, out)
            for ph in report["phases"]:
                print(f"phase {ph['phase']}: final elbo/pixel {ph['final_elbo_per_pixel']:.4f}")
            if "freeze_invariance" in report:
                print(f"freeze invariance: {report['freeze_invariance']}")
        return 0

    if args.command == "eval":
        payload = pipeline.run_eval(cfg, out, prior=args.prior)
        from .metrics import MetricReport
        print(f"{'metric':<8} {'mean +/- stderr':>22} {'episodes':>9}")
        for name, rep in payload["metrics"].items():
            print(f"{name:<8} {rep['mean']:>12.4f} +/- {rep['stderr']:<7.4f} {rep['count']:>7d}")
        return 0

    if args.command == "rollout":
        strip = args.strip or not args.gif
        info = pipeline.run_rollout_media(cfg, out, episode=args.episode,
                                          gif=args.gif, strip=strip)
        for f in info["files"]:
            print(f)
        return 0

    if args.command == "plan":
        payload = pipeline.run_plan(cfg, out, model=args.model)
        print(f"{payload['model']} planning: {payload['successes']}/{payload['total']} successes")
        return 0

    if args.command == "memory-report":
        payload = pipeline.run_memory_report(cfg, out)
        from .memory import format_curve
        s = payload["stack"]
        print(f"configured stack (B={s['batch']}, T={s['horizon']}):")
        for row in s["greedy_phases"]:
            print(f"  {row['mode']:<16} total {row['total_bytes']:>12d} bytes")
        print(f"  {'e2e':<16} total {s['e2e']['total_bytes']:>12d} bytes")
        print(f"  savings {s['savings_fraction']:.1%} (peak phase {s['greedy_peak_phase']})")
        print("default ladder family:")
        print(format_curve(payload["default_family_curve"]))
        return 0

    if args.command == "verify":
        from .verify import run_verification
        results = run_verification(gradcheck_instances=args.instances)
        ok = True
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<16} {r.detail}")
            ok &= r.passed
        payload = {"suites": [{"name": r.name, "passed": r.passed, "detail": r.detail}
                              for r in results]}
        pipeline._write_json(out / "reports" / "verify.json", payload)
        return 0 if ok else 1

    raise RuntimeError(f"unhandled command {args.command!r}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, LadderError, MissingPhaseError, FormatError, CheckpointError,
            FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
