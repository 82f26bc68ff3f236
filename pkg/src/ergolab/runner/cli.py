"""Command line entry point ``ergolab``."""
from __future__ import annotations

import argparse
import os
import sys


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ergolab", description="Ergodic control diagnostics")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run configured stages and write a result bundle")
    run.add_argument("config", nargs="?", help="INI configuration file")
    run.add_argument("--stages", help="comma-separated stages (check,simulate,adjoint,ergodicity,ebsde,smp,all)")
    run.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    run.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    run.add_argument("--out", help="output root (default $ERGOLAB_OUT or ./ergolab-out)")
    run.add_argument("--replay", metavar="MANIFEST", help="re-run from a bundle manifest and compare bytes")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if getattr(args, "threads", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .config import ConfigError, schema_json
    from .pipeline import EXIT_CONFIG, replay, run_scenario

    if args.command == "schema":
        print(schema_json())
        return 0
    try:
        if args.replay:
            bundle, mismatched = replay(args.replay, args.out)
            print(bundle.table())
            if mismatched:
                print(f"replay differs in {len(mismatched)} file(s): {', '.join(mismatched)}")
                return 1
            print(f"replay identical: {len(bundle.files)} files in {bundle.directory}")
            return bundle.exit_code
        if not args.config:
            raise ConfigError("a config file is required unless --replay is given")
        stages = None
        if args.stages is not None:
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        bundle = run_scenario(args.config, stages, args.seed, args.out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(bundle.table())
    print(f"bundle: {bundle.directory}")
    return bundle.exit_code


if __name__ == "__main__":
    sys.exit(main())
