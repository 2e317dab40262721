"""`estimate`: panel CSV -> the three effect estimates plus plug-in moments.

Classic DiD must succeed. Matched estimates and the plug-in report are
reported as null with the reason when the panel cannot support them
(no covariates, too few controls for the residualizing regression).
"""

import argparse
import json
import logging
from typing import Dict, Optional

from app.commands import add_match_flags, add_run_flags, emit, match_spec_from, parse_pair
from app.core.errors import MdidError
from app.services.estimators import REQUIRED_FEATURES, estimate_classic, estimate_matched_x, estimate_matched_xy
from app.services.matcher import match
from app.services.panel_io import FLOAT_FORMAT, load_panel
from app.services.plugin import plugin_report
from app.services.reports import SCHEMA_VERSION, EstimatorKind


log = logging.getLogger(__name__)

_MATCHED = {
    EstimatorKind.matched_x: estimate_matched_x,
    EstimatorKind.matched_x_y: estimate_matched_xy,
}


def register(subparsers) -> None:
    p = subparsers.add_parser("estimate", help="estimate classic and matched DiD effects with plug-in moments")
    p.add_argument("--panel", required=True, help="long-format panel CSV")
    p.add_argument("--reliability-pair", default=None, help="two pre-periods 't,t2' for the reliability estimate")
    p.add_argument("--assignments", action="store_true", help="also write matched pairs as CSV (needs --out)")
    add_match_flags(p)
    add_run_flags(p)
    p.set_defaults(handler=run)


def run(args: argparse.Namespace) -> int:
    panel = load_panel(args.panel)
    spec = match_spec_from(args)
    pair = parse_pair(args.reliability_pair)
    files: Dict[str, str] = {}
    estimates: Dict[str, Optional[dict]] = {}
    errors: Dict[str, str] = {}

    classic = estimate_classic(panel)
    estimates[classic.kind.value] = classic.model_dump(mode="json")
    n_matched: Optional[int] = None
    for kind, fn in _MATCHED.items():
        try:
            asg = match(panel, spec.model_copy(update={"features": REQUIRED_FEATURES[kind]}))
            est = fn(panel, asg)
        except MdidError as e:
            log.warning("estimate_skipped", extra={"kind": kind.value, "error": str(e)})
            estimates[kind.value] = None
            errors[kind.value] = str(e)
            continue
        estimates[kind.value] = est.model_dump(mode="json")
        n_matched = asg.n_matched if n_matched is None else min(n_matched, asg.n_matched)
        if args.assignments:
            files[f"assignment_{kind.value}.csv"] = asg.to_frame(panel).to_csv(
                index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
            )

    plugin = None
    try:
        plugin = plugin_report(panel, n_matched=n_matched, stable_pair=pair)
    except MdidError as e:
        log.warning("plugin_skipped", extra={"error": str(e)})
        errors["plugin"] = str(e)

    payload = {
        "schema_version": SCHEMA_VERSION,
        "estimates": estimates,
        "plugin": None if plugin is None else json.loads(plugin.model_dump_json()),
        "errors": errors,
    }
    files["estimate.json"] = json.dumps(payload, indent=2) + "\n"
    emit(files, args.out, "estimate.json")
    return 0
