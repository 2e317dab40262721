"""`bias-correct`: subtract an estimated bias from a reported effect."""

import argparse
import sys

from app.services.plugin import bias_corrected_summary
from app.services.reports import EstimatorKind


def register(subparsers) -> None:
    p = subparsers.add_parser("bias-correct", help="bias-corrected effect and its 2-SE reading")
    p.add_argument("--tau", type=float, required=True, help="reported effect estimate")
    p.add_argument("--bias", type=float, required=True, help="estimated bias of the strategy used")
    p.add_argument("--se", type=float, default=None, help="standard error for the significance reading")
    p.add_argument("--strategy", choices=[k.value for k in EstimatorKind], default=None)
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    summary = bias_corrected_summary(args.tau, args.bias, args.se)
    if args.format == "json":
        sys.stdout.write(summary.model_dump_json(indent=2) + "\n")
        return 0
    line = f"{summary.corrected:.3f}"
    if args.strategy:
        line += f" ({args.strategy})"
    if summary.z is not None:
        verdict = "significant" if summary.significant_at_2se else "not significant"
        line += f" z={summary.z:.2f} {verdict} at 2 SE"
    sys.stdout.write(line + "\n")
    return 0
