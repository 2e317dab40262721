"""`verify`: closed-form moments vs Monte Carlo for a DgpParams file."""

import argparse

from app.commands import add_run_flags, emit
from app.core.errors import ConfigurationError
from app.services.panel_io import VerifyConfig, load_params, load_run_config
from app.services.verification import render_verification, verify


def register(subparsers) -> None:
    p = subparsers.add_parser("verify", help="compare theory against Monte Carlo for the three estimators")
    p.add_argument("--params", default=None, help="DgpParams JSON file")
    p.add_argument("--config", default=None, help="RunConfig JSON file")
    p.add_argument("--var-tol", type=float, default=None, help="relative tolerance on variances")
    p.add_argument("--bias-se", type=float, default=None, help="allowed bias gap in Monte Carlo SEs")
    add_run_flags(p, reps=VerifyConfig().reps)
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    vcfg, seed = VerifyConfig(), 0
    params_path = args.params
    if args.config:
        cfg = load_run_config(args.config)
        vcfg, seed = cfg.verify, cfg.seed
        params_path = params_path or cfg.params_file
    if params_path is None:
        raise ConfigurationError("verify needs --params or a config with params_file")

    report = verify(
        load_params(params_path),
        reps=args.reps if args.reps is not None else vcfg.reps,
        seed=args.seed if args.seed is not None else seed,
        threads=args.threads,
        var_rel_tol=args.var_tol if args.var_tol is not None else vcfg.var_rel_tol,
        bias_se_mult=args.bias_se if args.bias_se is not None else vcfg.bias_se_mult,
    )
    emit(
        {"verify.json": report.model_dump_json(indent=2) + "\n", "verify.txt": render_verification(report)},
        args.out,
        "verify.txt",
    )
    return 0
