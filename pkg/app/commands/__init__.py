"""CLI subcommands. Each module exposes `register(subparsers)`."""

import argparse
import sys
from pathlib import Path
from typing import Dict, Optional

from app.core.errors import ConfigurationError
from app.services.matcher import MatchMethod, MatchSpec


def add_run_flags(parser: argparse.ArgumentParser, reps: Optional[int] = None) -> None:
    parser.add_argument("--seed", type=int, default=None, help="master seed (default: config or 0)")
    if reps is not None:
        parser.add_argument("--reps", type=int, default=None, help=f"replicates (default: {reps})")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (env MDID_THREADS)")
    parser.add_argument("--out", type=Path, default=None, help="output directory; stdout when omitted")


def add_match_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=[m.value for m in MatchMethod], default=None)
    parser.add_argument("--caliper", type=float, default=None, help="caliper width")
    parser.add_argument("--no-standardize", action="store_true", help="match on raw feature scales")


def match_spec_from(args: argparse.Namespace, base: Optional[MatchSpec] = None) -> MatchSpec:
    spec = base or MatchSpec()
    updates: Dict[str, object] = {}
    if args.method is not None:
        updates["method"] = MatchMethod(args.method)
    if args.caliper is not None:
        updates["caliper_width"] = args.caliper
        if args.method is None:
            updates["method"] = MatchMethod.caliper
    if args.no_standardize:
        updates["standardize"] = False
    if not updates:
        return spec
    try:
        return MatchSpec.model_validate({**spec.model_dump(), **updates})
    except ValueError as e:
        raise ConfigurationError(f"invalid matching options: {e}") from e


def parse_pair(raw: Optional[str]):
    if raw is None:
        return None
    try:
        a, b = (int(v) for v in raw.split(","))
    except ValueError as e:
        raise ConfigurationError(f"expected two comma-separated periods, got {raw!r}") from e
    return a, b


def emit(files: Dict[str, str], out: Optional[Path], stdout_key: str) -> None:
    """Write every named output under `out`, or print the primary one."""
    if out is None:
        sys.stdout.write(files[stdout_key])
        return
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
