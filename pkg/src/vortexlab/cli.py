"""Command-line entry point: ``vortexlab <subcommand> [--config PATH] ...``.

Exit codes: 0 pass, 1 verdict fail, 2 usage/config error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .config import ConfigError, load_config, validate

COMMANDS = {
    "simulate": "simulate",
    "solve-pde": "lamb_oseen",
    "compare": "convergence",
    "hierarchy": "hierarchy_cert",
    "regularity": "regularity",
    "concentration": "concentration",
}

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vortexlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, study in COMMANDS.items():
        s = sub.add_parser(name, help=f"run the {study} study")
        s.add_argument("--config", metavar="PATH", help="YAML experiment config")
        s.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
        s.add_argument("--threads", type=_positive, default=1, metavar="N", help="worker budget")
        s.add_argument("--seed", type=_u64, metavar="U64", help="root seed (overrides the config)")
        s.add_argument("--force", action="store_true", help="overwrite an existing study directory")
    s = sub.add_parser("plot", help="emit plot CSVs and SVGs for a completed study")
    s.add_argument("--out", metavar="DIR", required=True, help="study directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "plot":
        from .plotting import MissingArtifact, emit_plotdata
        try:
            for name in emit_plotdata(args.out):
                print(f"wrote {name}")
        except MissingArtifact as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        except Exception as exc:  # noqa: BLE001
            print(f"error: plotting failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        return EXIT_PASS

    from .studies import ArtifactsExist, StudyError, default_config, run_study
    study = COMMANDS[args.command]
    try:
        cfg = load_config(args.config) if args.config else default_config(study)
        cfg = replace(cfg, study=study)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        problems = validate(cfg)
        if problems:
            raise ConfigError(problems)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_USAGE
    try:
        outcome = run_study(cfg, args.out, threads=args.threads, force=args.force)
    except ArtifactsExist as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for line in outcome.lines():
        print(line)
    print(f"artifacts in {outcome.out_dir} ({outcome.wall_time:.1f} s)")
    return EXIT_PASS if outcome.passed else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
