"""`tradeoff`: canonical-model sweep of when matching on X lowers variance."""

import argparse
from pathlib import Path

import numpy as np

from app.commands import emit
from app.core.errors import ConfigurationError
from app.services.panel_io import FLOAT_FORMAT, load_model
from app.services.sem_dgp import CanonicalParams
from app.services.theory import tradeoff_grid


def register(subparsers) -> None:
    p = subparsers.add_parser("tradeoff", help="plot-ready CSV of the X-matching variance tradeoff region")
    p.add_argument("--params", default=None, help="CanonicalParams JSON file (defaults otherwise)")
    p.add_argument("--rho-min", type=float, default=-0.9)
    p.add_argument("--rho-max", type=float, default=0.9)
    p.add_argument("--rho-steps", type=int, default=19)
    p.add_argument("--ratios", default="1,2,4,8", help="comma-separated n0/n1 values")
    p.add_argument("--n1", type=int, default=200)
    p.add_argument("--out", type=Path, default=None, help="output directory; stdout when omitted")
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    base = load_model(args.params, CanonicalParams) if args.params else CanonicalParams()
    if args.rho_steps < 1:
        raise ConfigurationError("rho-steps must be >= 1")
    try:
        ratios = [float(v) for v in args.ratios.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"bad --ratios {args.ratios!r}") from e
    if not ratios or min(ratios) <= 0:
        raise ConfigurationError("ratios must be positive")
    rhos = np.linspace(args.rho_min, args.rho_max, args.rho_steps)
    frame = tradeoff_grid(base, rhos, ratios, args.n1)
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    emit({"tradeoff.csv": text}, args.out, "tradeoff.csv")
    return 0
