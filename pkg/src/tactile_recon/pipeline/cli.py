"""``tactile-recon`` command line: gen-dataset, train, explore, eval (or all).

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from ..errors import ConfigError, TactileReconError
from .commands import COMMANDS
from .config import PRESETS, load_config

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
STAGES = ("gen-dataset", "train", "explore", "eval")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tactile-recon", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=STAGES + ("all",))
    p.add_argument("--config", metavar="PATH", help="YAML or JSON file merged over the preset")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, metavar="N", help="master seed (overrides seed)")
    p.add_argument("--preset", choices=PRESETS, default="desk")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.preset, args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    stages = STAGES if args.command == "all" else (args.command,)
    for stage in stages:
        try:
            out = COMMANDS[stage](cfg)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        except (TactileReconError, OSError) as exc:
            print(f"{stage} failed: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"{stage}: wrote {out}")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
