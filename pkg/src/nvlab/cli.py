"""Command-line front end.

    nvlab <subcommand> --config run.toml [--out DIR] [--seed N] [--set key=value ...]

Exit status is 0 on success, 1 for domain errors (failed fits, invalid
physical inputs) and 2 for usage or configuration errors.
"""

import argparse
from pathlib import Path
import sys

from .config import KINDS, RunConfig
from .errors import ConfigError, NvlabError
from .experiments import RUNNERS
from .io import write_csv, write_report

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    p = _Parser(prog="nvlab", description="NV-diamond magnetometer simulator and analysis pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run the {kind} experiment")
        s.add_argument("--config", type=Path, help="TOML run configuration")
        s.add_argument("--out", help="output directory (overrides config)")
        s.add_argument("--seed", type=int, help="RNG seed (overrides config)")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. drive.f_depth=30e3")
    return p


def execute(cfg):
    """Run ``cfg``, write its tables and report; returns (report dict, paths)."""
    result = RUNNERS[cfg.kind](cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(out / name, schema, cols) for name, schema, cols in result.tables]
    report = write_report(out / f"{cfg.kind}_report.json", cfg.kind, cfg.seed, cfg.echo(), result.metrics,
                          paths, result.summary)
    return report, paths


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config, args.command, args.overrides, args.seed, args.out)
        report, _ = execute(cfg)
    except ConfigError as exc:
        print(f"nvlab: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NvlabError as exc:
        print(f"nvlab: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(report["summary"])
    print(f"wrote {Path(cfg.out) / (cfg.kind + '_report.json')}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
