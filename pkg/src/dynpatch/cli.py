"""Command line entry point: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import DynPatchError
from .pipeline import ALL, STAGES, run_pipeline

log = logging.getLogger("dynpatch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynpatch", description="Pose-dependent adversarial patch pipeline")
    parser.add_argument("--config", default=None, help="YAML file merged over the shipped defaults")
    parser.add_argument("--seed", type=int, default=None, help="seed for detector, sitnet, cluster and attack")
    parser.add_argument("--out", default=None, help="output directory (default: run.out from the config)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("stage", choices=STAGES + (ALL,), help="stage to run; `all` reuses current stages")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed)
        result = run_pipeline(cfg, args.stage, args.out)
    except DynPatchError as err:
        log.error("%s: %s", type(err).__name__, err)
        return err.exit_code
    except FileNotFoundError as err:
        log.error("file not found: %s", err)
        return 2
    log.info("ran %s, reused %s; manifest %s", result["ran"], result["skipped"], result["manifest"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
