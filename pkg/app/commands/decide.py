"""`decide`: panel CSV -> guideline decision and the comparison table."""

import argparse

from app.commands import add_match_flags, add_run_flags, emit, match_spec_from
from app.core.errors import ConfigurationError
from app.services.decision import GuidelineConfig, bootstrap_figure_rows, decide, render_table
from app.services.panel_io import FLOAT_FORMAT, load_panel, load_run_config


def register(subparsers) -> None:
    p = subparsers.add_parser("decide", help="pick a matching strategy via the bias/variance/MSE guideline")
    p.add_argument("--panel", default=None, help="long-format panel CSV (or panel_file in --config)")
    p.add_argument("--config", default=None, help="RunConfig JSON file")
    p.add_argument("--pt-asserted", action="store_true", help="parallel trends asserted from domain knowledge")
    p.add_argument("--mse-tol", type=float, default=None, help="relative tolerance for similar MSEs")
    p.add_argument("--large-n", type=int, default=None, help="treated-count threshold for the bias criterion")
    p.add_argument("--no-bootstrap", action="store_true", help="skip bootstrap standard errors")
    p.add_argument("--format", choices=["text", "json"], default="text", help="stdout format")
    p.add_argument("--figure", action="store_true", help="also write figure.csv (bias vs S.V. with interval radii) under --out")
    p.add_argument("--ci-level", type=float, default=0.95, help="interval level for the figure radii")
    add_match_flags(p)
    add_run_flags(p, reps=GuidelineConfig().bootstrap_reps)
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    config = GuidelineConfig()
    panel_path = args.panel
    if args.config:
        cfg = load_run_config(args.config)
        config = cfg.guideline.model_copy(update={"match_spec": cfg.match_spec, "seed": cfg.seed})
        panel_path = panel_path or cfg.panel_file
    if panel_path is None:
        raise ConfigurationError("decide needs --panel or a config with panel_file")

    updates = {"match_spec": match_spec_from(args, config.match_spec)}
    if args.pt_asserted:
        updates["pt_asserted"] = True
    if args.mse_tol is not None:
        updates["mse_similarity_rel_tol"] = args.mse_tol
    if args.large_n is not None:
        updates["large_sample_threshold"] = args.large_n
    if args.reps is not None:
        updates["bootstrap_reps"] = args.reps
    if args.seed is not None:
        updates["seed"] = args.seed
    try:
        config = GuidelineConfig.model_validate({**config.model_dump(), **updates})
    except ValueError as e:
        raise ConfigurationError(f"invalid guideline options: {e}") from e

    decision = decide(load_panel(panel_path), config, threads=args.threads, with_bootstrap=not args.no_bootstrap)
    files = {
        "decision.json": render_table(decision, fmt="json") + "\n",
        "table.txt": render_table(decision),
    }
    if args.figure:
        files["figure.csv"] = bootstrap_figure_rows(decision, ci_level=args.ci_level).to_csv(
            index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
        )
    emit(files, args.out, "table.txt" if args.format == "text" else "decision.json")
    return 0
