"""Application entry point."""

import logging
import sys
from typing import List, Optional

from src.cli.commands import COMMANDS
from src.cli.config import configure_logging, load_config_file, run_config_from_args
from src.cli.parser import build_parser
from src.models.errors import ReAdaptError, UsageError

logger = logging.getLogger("readapt")


def parse_args(argv: Optional[List[str]] = None):
    """
    Parse argv, applying a --config file as flag defaults.

    Values given on the command line win over the config file.

    Raises:
        UsageError: on bad flags or config keys no flag of the command knows
    """
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    if not args.config:
        return args

    defaults = load_config_file(args.config)
    chosen = subparsers[args.command]
    known = {a.dest for a in parser._actions} | {a.dest for a in chosen._actions}
    unknown = sorted(set(defaults) - known - {"command", "config"})
    if unknown:
        raise UsageError(f"{args.config}: unknown keys for '{args.command}': {', '.join(unknown)}")
    parser.set_defaults(**defaults)
    chosen.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Optional[List[str]] = None) -> int:
    """Main application entry point; returns the process exit code."""
    try:
        args = parse_args(argv)
        config = run_config_from_args(args)
    except ReAdaptError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    configure_logging(config.log_level)
    try:
        return COMMANDS[args.command](args, config)
    except ReAdaptError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return 1
    except Exception:
        logger.exception("unexpected failure in '%s'", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
