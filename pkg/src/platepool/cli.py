"""Command-line pipeline driver.

Subcommands: generate, train-surrogate, infer, detect, report, run-all.
Exit codes: 0 success, 2 convergence-gate failure, 1 any other error.
"""

from __future__ import annotations

import argparse
import sys

from .config import PipelineConfig, load_config
from .pipeline import (run_all, stage_detect, stage_generate, stage_infer,
                       stage_report, stage_surrogates)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_GATE_FAILED = 2


def _add_common(p):
    p.add_argument("--config", metavar="PATH", help="JSON config file (defaults reproduce the reference setup)")
    p.add_argument("--seed", type=int, metavar="N", help="override the config seed")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: ./out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="platepool",
        description="Hierarchical Bayesian plate-deflection detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in [
        ("generate", "generate the synthetic dataset"),
        ("train-surrogate", "fit per-plate GPR surrogates"),
        ("detect", "posterior predictive detection comparison"),
        ("report", "consolidated report and figures"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)

    p = sub.add_parser("infer", help="NUTS posterior inference")
    _add_common(p)
    p.add_argument("--model", choices=["hier", "indep"], default="hier")
    p.add_argument("--plate", type=int, metavar="K",
                   help="plate for --model indep (default: all plates)")
    p.add_argument("--jobs", type=int, default=1, metavar="N",
                   help="process pool size for parallel chains")

    p = sub.add_parser("run-all", help="run every stage in order")
    _add_common(p)
    p.add_argument("--jobs", type=int, default=1, metavar="N")
    return parser


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "generate":
            stage_generate(cfg, args.out)
        elif args.command == "train-surrogate":
            stage_surrogates(cfg, args.out)
        elif args.command == "infer":
            summaries = stage_infer(cfg, args.out, args.model, args.plate, n_jobs=args.jobs)
            for name, summary in summaries.items():
                state = "PASS" if summary.gate_passed else "FAIL"
                print(f"{name}: convergence gate {state} (max rhat {summary.max_rhat:.5f})")
            if not all(s.gate_passed for s in summaries.values()):
                return EXIT_GATE_FAILED
        elif args.command == "detect":
            report = stage_detect(cfg, args.out)
            for p in report.plates:
                print(f"plate {p.plate}: variance-reduction ratio {p.variance_reduction:.3f}")
        elif args.command == "report":
            stage_report(cfg, args.out)
            print(f"report written under {args.out}/report, figures under {args.out}/figures")
        elif args.command == "run-all":
            code = run_all(cfg, args.out, n_jobs=args.jobs)
            if code != EXIT_OK:
                print("convergence gate failed for at least one model", file=sys.stderr)
                return code
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - map anything unexpected to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
