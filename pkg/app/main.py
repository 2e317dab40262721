"""Command-line entrypoint.

Subcommands: simulate, estimate, decide, verify, bias-correct, tradeoff.
Exit codes: 0 success, 1 validation or usage error, 2 numerical failure.
"""

import argparse
import logging
import sys
import uuid
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from app.commands import bias_correct, decide, estimate, simulate, tradeoff, verify
from app.core.errors import MdidError, NumericalError
from app.core.logging import run_id_var, setup_logging


log = logging.getLogger("app.main")

COMMANDS = (simulate, estimate, decide, verify, bias_correct, tradeoff)


class CliParser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(prog="mdid", description="Matching before difference-in-differences: estimate and decide.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for module in COMMANDS:
        module.register(subparsers)
    return parser


def _level(args: argparse.Namespace) -> Optional[str]:
    if args.verbose:
        return "DEBUG"
    if args.quiet:
        return "WARNING"
    return None


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(_level(args))
    token = run_id_var.set(uuid.uuid4().hex[:12])
    try:
        return int(args.handler(args) or 0)
    except MdidError as e:
        log.error("command_failed", extra={"command": args.command, "error": str(e)})
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"error: invalid input: {e.errors()[0]['msg']}", file=sys.stderr)
        return 1
    except np.linalg.LinAlgError as e:
        print(f"error: {e}", file=sys.stderr)
        return NumericalError.exit_code
    finally:
        run_id_var.reset(token)


if __name__ == "__main__":
    sys.exit(main())
