"""Command line entry point: one subcommand per stage, plus ``run`` for all of them."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import PRESETS, ConfigError, load_config


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file overriding preset values")
    common.add_argument("--seed", type=int, help="root seed (overrides the config file)")
    common.add_argument("--preset", choices=PRESETS, help="base preset (default: desk)")
    common.add_argument("--out", help="artifact directory (default: runs/<preset>)")
    common.add_argument("--force", action="store_true", help="rerun even if the manifest matches")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="beyondlog", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    for stage in pipeline.ORDER:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in dependency order")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    stage = args.command
    try:
        cfg = load_config(args.config, preset=args.preset, seed=args.seed, out=args.out)
        if stage == "show-config":
            sys.stdout.write(cfg.dump())
            return 0
        if stage == "run":
            ran = pipeline.run(cfg, force=args.force)
            print(f"ran: {', '.join(ran) or 'nothing (all stages up to date)'}")
        else:
            did = pipeline.run_stage(cfg, stage, force=args.force)
            print(f"{stage}: {'done' if did else 'up to date'}")
        return 0
    except ConfigError as e:
        print(f"beyondlog: config: {e}", file=sys.stderr)
        return 2
    except pipeline.StageError as e:
        print(f"beyondlog: stage {e.stage} failed: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"beyondlog: stage {stage} failed: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
