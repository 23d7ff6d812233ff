"""Command line entry point: ``czvar {sparse,weaktype,weighted,certify,corpus}``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from czvar.experiments import (
    CAMPAIGNS,
    ExperimentConfig,
    corpus_to_dir,
    freeze_baselines,
    load_baselines,
    resolve_out_dir,
    run_campaign,
    write_report,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="czvar", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file overriding the default parameters")
    common.add_argument("--out", metavar="DIR", help="output directory (else $CZVAR_OUT, else config)")
    common.add_argument("--seed", type=int, help="corpus seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-instance work")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in CAMPAIGNS:
        p = sub.add_parser(name, parents=[common], help=f"run the {name} campaign")
        p.add_argument("--baselines", metavar="PATH", help="frozen regression baselines (JSON)")
        if name == "certify":
            p.add_argument("--freeze", action="store_true", help="measure and store baselines, then certify")
    sub.add_parser("corpus", parents=[common], help="write the corpus as signal files")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out = resolve_out_dir(args.out, cfg)
    if args.command == "corpus":
        paths = corpus_to_dir(cfg, out)
        print(f"wrote {len(paths)} signals to {out}")
        return 0
    if getattr(args, "freeze", False):
        freeze_baselines(cfg, args.baselines, args.jobs)
    baselines = load_baselines(args.baselines)
    report = run_campaign(cfg, args.command, args.jobs, baselines)
    for r in report.results:
        print(r.line() + (f" error={r.error}" if r.error else ""))
    j, c = write_report(report, out)
    print(f"report: {j}\ntable: {c}")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
