"""``diffasr`` command line: gen-data, stats, train, decode, bench, ablate, make-report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, DiffAsrError

log = logging.getLogger("diffasr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="sectioned key = value file")
    p.add_argument("--seed", type=int, help="run seed (overrides [run] seed)")
    p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _pdd_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="number of parallel candidates")
    p.add_argument("--steps", type=int, help="denoising steps; picks the stock schedule for that count")
    p.add_argument("--schedule", help="comma-separated mask ratios, e.g. 1.0,0.9,0.85,0.8")
    p.add_argument("--temperature", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="diffasr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("gen-data", help="generate the synthetic corpus and its stats"))
    _common(sub.add_parser("stats", help="print corpus stats"))

    p = sub.add_parser("train", help="run one curriculum stage")
    _common(p)
    p.add_argument("--stage", required=True, choices=["0e", "0d", "1", "2", "ar"])

    p = sub.add_parser("decode", help="decode a split and write records plus a report")
    _common(p)
    _pdd_flags(p)
    p.add_argument("--engine", default="pdd", choices=["pdd", "single", "ar"])
    p.add_argument("--split", choices=["train", "dev", "test"])
    p.add_argument("--ablate-conditioning", action="store_true", help="decode with cross-attention switched off")

    p = sub.add_parser("bench", help="latency benchmark for PDD and AR")
    _common(p)
    _pdd_flags(p)
    p.add_argument("--repeats", type=int)

    p = sub.add_parser("ablate", help="PDD parameter sweeps")
    _common(p)
    _pdd_flags(p)
    p.add_argument("--study", required=True, choices=["k", "steps", "schedule"])

    _common(sub.add_parser("make-report", help="assemble decode, sweep and bench summaries"))
    return parser


def effective_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.update("run", {"seed": args.seed})
    pdd = {}
    if getattr(args, "k", None) is not None:
        pdd["k"] = args.k
    if getattr(args, "steps", None) is not None:
        from .pdd import STEP_SCHEDULES

        if args.steps not in STEP_SCHEDULES:
            raise ConfigError(f"--steps must be one of {sorted(STEP_SCHEDULES)}")
        pdd["schedule"] = list(STEP_SCHEDULES[args.steps])
    if getattr(args, "schedule", None):
        pdd["schedule"] = args.schedule
    if getattr(args, "temperature", None) is not None:
        pdd["temperature"] = args.temperature
    if pdd:
        cfg.update("pdd", pdd)
    if getattr(args, "repeats", None) is not None:
        cfg.update("bench", {"repeats": args.repeats})
    cfg.pdd_config()
    return cfg


@contextlib.contextmanager
def output_lock(out: Path):
    """Advisory exclusive lock on ``out/.lock`` for the duration of a command."""
    out.mkdir(parents=True, exist_ok=True)
    with open(out / ".lock", "w") as fh:
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise DiffAsrError(f"{out} is locked by another diffasr process") from None
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def run(args: argparse.Namespace) -> int:
    from . import pipeline as P

    cfg = effective_config(args)
    out = args.out
    with output_lock(out):
        if args.command == "gen-data":
            stats = P.gen_data(cfg, out)
            cfg.write(out / "data")
            print(json.dumps(stats, indent=2))
        elif args.command == "stats":
            stats_path = out / "data" / "stats.json"
            if not stats_path.exists():
                P.load_corpus(cfg, out)
            print(stats_path.read_text().strip())
        elif args.command == "train":
            directory = P.train_stage(args.stage, cfg, out)
            cfg.write(directory)
            print(f"stage {args.stage} checkpoint: {directory}")
        elif args.command == "decode":
            report = P.decode(cfg, out, args.engine, args.split, args.ablate_conditioning)
            print(json.dumps({k: v for k, v in report.items() if not isinstance(v, (list, dict))}, indent=2))
        elif args.command == "bench":
            P.run_bench(cfg, out)
            print((out / "bench" / "summary.md").read_text().strip())
        elif args.command == "ablate":
            P.ablate(cfg, out, args.study)
            print((out / "ablate" / f"{args.study}.md").read_text().strip())
        elif args.command == "make-report":
            cfg.write(out)
            print(P.make_report(out))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        return run(args)
    except ConfigError as exc:
        print(f"diffasr: config error: {exc}", file=sys.stderr)
        return 2
    except DiffAsrError as exc:
        print(f"diffasr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"diffasr: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
