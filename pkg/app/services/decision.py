"""Guideline for choosing between classic DiD and the two matched variants.

Step 1: asserted parallel trends short-circuits to classic DiD.
Step 2: when every pair of plug-in MSEs differs by more than the
relative tolerance, the smallest one wins.
Step 3: otherwise large samples compare |bias| of the matched variants
and small samples compare the full variance of classic DiD against
matching on X.

Every comparison is recorded in `Decision.criteria_path` so `replay`
can rebuild the choice from the record alone.
"""

import logging
import math
import re
from enum import Enum
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.stats import norm

from app.core.errors import ConfigurationError
from app.services.estimators import REQUIRED_FEATURES, estimate_classic, estimate_matched_x, estimate_matched_xy
from app.services.matcher import MatchSpec, match
from app.services.panel import PanelData
from app.services.plugin import BiasCorrection, PluginReport, bias_correct, bias_corrected_summary, plugin_report
from app.services.replicates import run_replicates
from app.services.reports import KIND_LABELS, KIND_ORDER, SCHEMA_VERSION, EstimatorKind
from app.services.sem_dgp import make_rng, sample_mean_var


log = logging.getLogger(__name__)

QUANTITIES = ("tau_hat", "bias", "sv", "mse")
MISSING_SE = "—"
CHECK = "✓"
CROSS = "✗"

BIAS_ASSUMPTION = "matching on X does not increase |bias| over classic DiD under the usual regularity conditions"
VARIANCE_ASSUMPTION = "matching on X and Y^T has core variance no larger than matching on X alone"


class GuidelineConfig(BaseModel):
    pt_asserted: bool = False
    mse_similarity_rel_tol: float = Field(0.10, gt=0)
    large_sample_threshold: int = Field(1000, gt=0)
    bootstrap_reps: int = Field(5000, ge=100)
    bootstrap_max_failure_rate: float = Field(0.01, ge=0, lt=1)
    seed: int = 0
    match_spec: MatchSpec = MatchSpec()
    reliability_pair: Optional[Tuple[int, int]] = None


class StepName(str, Enum):
    parallel_trends = "parallel_trends"
    mse = "mse"
    bias = "bias"
    variance = "variance"


class CriterionStep(BaseModel):
    step: StepName
    inputs: Dict[EstimatorKind, float] = {}
    tolerance: Optional[float] = None
    n1: Optional[int] = None
    large_sample_threshold: Optional[int] = None
    # None means the step did not settle the choice.
    outcome: Optional[EstimatorKind] = None
    assumption: Optional[str] = None


class TableCell(BaseModel):
    value: float
    se: Optional[float] = None


class Decision(BaseModel):
    schema_version: str = SCHEMA_VERSION
    chosen: EstimatorKind
    criteria_path: List[CriterionStep] = Field(min_length=1)
    n1: int
    bias_table: Dict[EstimatorKind, TableCell]
    sv_table: Dict[EstimatorKind, TableCell]
    mse_table: Dict[EstimatorKind, TableCell]
    used_sample_size: Dict[EstimatorKind, int]
    match_decision: Dict[EstimatorKind, List[str]]
    tau_hat: Dict[EstimatorKind, float] = {}
    bias_corrected_tau: Optional[float] = None
    bias_correction: Optional[BiasCorrection] = None
    reliability_hat: Optional[float] = None
    bootstrap_reps: int = 0
    bootstrap_failed: int = 0
    # Replicate means per quantity, keyed like the SE tables.
    bootstrap_means: Dict[str, Dict[EstimatorKind, Optional[float]]] = {}
    warnings: List[str] = []

    @field_validator("criteria_path")
    @classmethod
    def _settled(cls, v: List[CriterionStep]) -> List[CriterionStep]:
        if v[-1].outcome is None:
            raise ValueError("last criterion step must settle the choice")
        return v


class PanelEvaluation(BaseModel):
    """Point estimates and plug-in moments from one pass of the pipeline."""

    tau_hat: Dict[EstimatorKind, float]
    report: PluginReport
    n_matched: int
    outside_assumptions: bool = False

    def quantity(self, name: str, kind: EstimatorKind) -> float:
        m = self.report.estimators[kind]
        if name == "tau_hat":
            return self.tau_hat[kind]
        if name == "bias":
            return m.bias
        if name == "sv":
            return math.sqrt(max(m.var_full, 0.0))
        return m.mse


class BootstrapSummary(BaseModel):
    reps: int
    failed: List[int] = []
    means: Dict[str, Dict[EstimatorKind, Optional[float]]] = {}
    ses: Dict[str, Dict[EstimatorKind, Optional[float]]] = {}
    replicates: List[PanelEvaluation] = []


def evaluate_panel(
    panel: PanelData,
    spec: Optional[MatchSpec] = None,
    stable_pair: Optional[Tuple[int, int]] = None,
) -> PanelEvaluation:
    """Match, estimate the three effects and compute plug-in moments."""
    base = spec or MatchSpec()
    asg_x = match(panel, base.model_copy(update={"features": REQUIRED_FEATURES[EstimatorKind.matched_x]}))
    asg_xy = match(panel, base.model_copy(update={"features": REQUIRED_FEATURES[EstimatorKind.matched_x_y]}))
    est = {
        EstimatorKind.classic_did: estimate_classic(panel),
        EstimatorKind.matched_x: estimate_matched_x(panel, asg_x),
        EstimatorKind.matched_x_y: estimate_matched_xy(panel, asg_xy),
    }
    n_matched = min(asg_x.n_matched, asg_xy.n_matched)
    return PanelEvaluation(
        tau_hat={k: r.tau_hat for k, r in est.items()},
        report=plugin_report(panel, n_matched=n_matched, stable_pair=stable_pair),
        n_matched=n_matched,
        outside_assumptions=any(r.outside_assumptions for r in est.values()),
    )


def _resample(panel: PanelData, rng: np.random.Generator) -> PanelData:
    treated = rng.choice(panel.treated_idx, size=panel.n1, replace=True)
    controls = rng.choice(panel.control_idx, size=panel.n0, replace=True)
    return panel.take(np.concatenate([treated, controls]))


def bootstrap_reports(
    panel: PanelData,
    spec: Optional[MatchSpec],
    reps: int,
    seed: int,
    threads: Optional[int] = None,
    max_failure_rate: float = 0.01,
) -> BootstrapSummary:
    """Stratified unit bootstrap of the whole pipeline.

    Replicate i resamples treated and control units separately (keeping
    n1 and n0) from stream (seed, i). SEs are sample SDs across the
    successful replicates, accumulated in replicate order.
    """
    if reps < 1:
        raise ConfigurationError("bootstrap needs at least one replicate")

    def one(i: int) -> PanelEvaluation:
        return evaluate_panel(_resample(panel, make_rng(seed, i)), spec)

    batch = run_replicates(
        one,
        reps,
        threads=threads,
        label="bootstrap",
        max_failures=int(math.floor(max_failure_rate * reps)),
    )
    means: Dict[str, Dict[EstimatorKind, Optional[float]]] = {}
    ses: Dict[str, Dict[EstimatorKind, Optional[float]]] = {}
    for name in QUANTITIES:
        means[name], ses[name] = {}, {}
        for kind in KIND_ORDER:
            values = [ev.quantity(name, kind) for ev in batch.values]
            if len(values) >= 2:
                mean, var = sample_mean_var(values)
                means[name][kind], ses[name][kind] = mean, math.sqrt(var)
            else:
                means[name][kind] = values[0] if values else None
                ses[name][kind] = None
    log.info("bootstrap_done", extra={"reps": reps, "failed": len(batch.failed)})
    return BootstrapSummary(reps=reps, failed=batch.failed, means=means, ses=ses, replicates=batch.values)


def _rel_gap(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0 else 0.0


def apply_step(step: CriterionStep) -> Optional[EstimatorKind]:
    """Outcome of one recorded comparison, computed from its inputs."""
    if step.step is StepName.parallel_trends:
        return EstimatorKind.classic_did
    if step.step is StepName.mse:
        # Any two similar MSEs leave the choice to the next step.
        if any(_rel_gap(step.inputs[a], step.inputs[b]) <= step.tolerance for a, b in combinations(KIND_ORDER, 2)):
            return None
        return min(KIND_ORDER, key=lambda k: step.inputs[k])
    if step.step is StepName.bias:
        if step.inputs[EstimatorKind.matched_x] > step.inputs[EstimatorKind.matched_x_y]:
            return EstimatorKind.matched_x_y
        return EstimatorKind.matched_x
    if step.inputs[EstimatorKind.classic_did] > step.inputs[EstimatorKind.matched_x]:
        return EstimatorKind.matched_x_y
    return EstimatorKind.classic_did


def _criteria(
    bias: Dict[EstimatorKind, float],
    var_full: Dict[EstimatorKind, float],
    mse: Dict[EstimatorKind, float],
    n1: int,
    config: GuidelineConfig,
) -> List[CriterionStep]:
    if config.pt_asserted:
        step = CriterionStep(step=StepName.parallel_trends)
        return [step.model_copy(update={"outcome": apply_step(step)})]

    path: List[CriterionStep] = []
    step = CriterionStep(step=StepName.mse, inputs=dict(mse), tolerance=config.mse_similarity_rel_tol)
    path.append(step.model_copy(update={"outcome": apply_step(step)}))
    if path[-1].outcome is not None:
        return path

    if n1 >= config.large_sample_threshold:
        step = CriterionStep(
            step=StepName.bias,
            inputs={k: abs(bias[k]) for k in (EstimatorKind.matched_x, EstimatorKind.matched_x_y)},
            n1=n1,
            large_sample_threshold=config.large_sample_threshold,
            assumption=BIAS_ASSUMPTION,
        )
    else:
        step = CriterionStep(
            step=StepName.variance,
            inputs={k: var_full[k] for k in (EstimatorKind.classic_did, EstimatorKind.matched_x)},
            n1=n1,
            large_sample_threshold=config.large_sample_threshold,
            assumption=VARIANCE_ASSUMPTION,
        )
    path.append(step.model_copy(update={"outcome": apply_step(step)}))
    return path


def _match_annotations(
    bias: Dict[EstimatorKind, float], sv: Dict[EstimatorKind, float], mse: Dict[EstimatorKind, float]
) -> Dict[EstimatorKind, List[str]]:
    notes: Dict[EstimatorKind, List[str]] = {k: [] for k in KIND_ORDER}
    for label, table in (("|Bias|", {k: abs(v) for k, v in bias.items()}), ("Var (S.V)", sv), ("MSE", mse)):
        notes[min(KIND_ORDER, key=lambda k: table[k])].append(label)
    return notes


def decide_from_tables(
    bias: Dict[EstimatorKind, float],
    sv: Dict[EstimatorKind, float],
    mse: Dict[EstimatorKind, float],
    used_sample_size: Dict[EstimatorKind, int],
    n1: int,
    config: Optional[GuidelineConfig] = None,
    ses: Optional[Dict[str, Dict[EstimatorKind, Optional[float]]]] = None,
) -> Decision:
    """Run the guideline on already-estimated bias, S.V and MSE values."""
    config = config or GuidelineConfig()
    ses = ses or {}
    var_full = {k: sv[k] ** 2 for k in KIND_ORDER}
    path = _criteria(bias, var_full, mse, n1, config)

    def cells(name: str, values: Dict[EstimatorKind, float]) -> Dict[EstimatorKind, TableCell]:
        return {k: TableCell(value=values[k], se=ses.get(name, {}).get(k)) for k in KIND_ORDER}

    decision = Decision(
        chosen=path[-1].outcome,
        criteria_path=path,
        n1=n1,
        bias_table=cells("bias", bias),
        sv_table=cells("sv", sv),
        mse_table=cells("mse", mse),
        used_sample_size=dict(used_sample_size),
        match_decision=_match_annotations(bias, sv, mse),
    )
    log.info(
        "decision_made",
        extra={"chosen": decision.chosen.value, "steps": [s.step.value for s in path], "n1": n1},
    )
    return decision


def tables_from_report(report: PluginReport) -> Tuple[Dict, Dict, Dict, Dict]:
    bias = {k: report.estimators[k].bias for k in KIND_ORDER}
    sv = {k: math.sqrt(max(report.estimators[k].var_full, 0.0)) for k in KIND_ORDER}
    mse = {k: report.estimators[k].mse for k in KIND_ORDER}
    used = {
        EstimatorKind.classic_did: report.n1 + report.n0,
        EstimatorKind.matched_x: 2 * report.n_matched,
        EstimatorKind.matched_x_y: 2 * report.n_matched,
    }
    return bias, sv, mse, used


def decide(
    panel: PanelData,
    config: Optional[GuidelineConfig] = None,
    threads: Optional[int] = None,
    with_bootstrap: bool = True,
) -> Decision:
    config = config or GuidelineConfig()
    stable_pair = config.reliability_pair
    if stable_pair is None and panel.t_pre >= 2:
        stable_pair = (0, 1)
    point = evaluate_panel(panel, config.match_spec, stable_pair)

    boot: Optional[BootstrapSummary] = None
    if with_bootstrap:
        boot = bootstrap_reports(
            panel,
            config.match_spec,
            config.bootstrap_reps,
            config.seed,
            threads=threads,
            max_failure_rate=config.bootstrap_max_failure_rate,
        )

    bias, sv, mse, used = tables_from_report(point.report)
    decision = decide_from_tables(bias, sv, mse, used, panel.n1, config, boot.ses if boot else None)

    chosen = decision.chosen
    tau_se = boot.ses["tau_hat"][chosen] if boot else None
    warnings: List[str] = []
    if point.outside_assumptions:
        warnings.append(f"matched controls ({point.n_matched}) fewer than treated units ({panel.n1})")
    if boot and boot.failed:
        warnings.append(f"{len(boot.failed)} of {boot.reps} bootstrap replicates failed and were skipped")
    return decision.model_copy(
        update={
            "tau_hat": point.tau_hat,
            "bias_corrected_tau": bias_correct(point.tau_hat[chosen], bias[chosen]),
            "bias_correction": bias_corrected_summary(point.tau_hat[chosen], bias[chosen], tau_se),
            "reliability_hat": point.report.reliability_hat,
            "bootstrap_reps": boot.reps if boot else 0,
            "bootstrap_failed": len(boot.failed) if boot else 0,
            "bootstrap_means": boot.means if boot else {},
            "warnings": warnings,
        }
    )


def replay(decision: Decision) -> EstimatorKind:
    """Recompute the choice from the recorded comparisons."""
    for step in decision.criteria_path:
        outcome = apply_step(step)
        if outcome is not step.outcome:
            raise ConfigurationError(f"recorded {step.step.value} step does not reproduce its outcome")
        if outcome is not None:
            if outcome is not decision.chosen:
                raise ConfigurationError("criteria path disagrees with the chosen estimator")
            return outcome
    raise ConfigurationError("criteria path never settles the choice")


# --- Table rendering ---------------------------------------------------------

FIGURE_COLUMNS = ["estimator", "label", "sv", "bias", "h_x", "h_y", "radius", "chosen"]


def bootstrap_figure_rows(decision: Decision, ci_level: float = 0.95) -> pd.DataFrame:
    """One row per estimator for the bias-against-S.V. scatter.

    Points use the bootstrap replicate means when the decision carries
    them, else the plug-in values. h_x and h_y are normal half-widths
    z * SE of the S.V. and bias; the marker radius is sqrt(h_x * h_y)
    and is NaN without bootstrap SEs.
    """
    if not 0 < ci_level < 1:
        raise ConfigurationError(f"ci_level must lie in (0, 1), got {ci_level}")
    z = float(norm.ppf(0.5 + ci_level / 2))
    means = decision.bootstrap_means
    rows = []
    for kind in KIND_ORDER:
        sv, bias = decision.sv_table[kind], decision.bias_table[kind]
        x = means.get("sv", {}).get(kind)
        y = means.get("bias", {}).get(kind)
        h_x = math.nan if sv.se is None else z * sv.se
        h_y = math.nan if bias.se is None else z * bias.se
        rows.append(
            [
                kind.value,
                KIND_LABELS[kind],
                sv.value if x is None else x,
                bias.value if y is None else y,
                h_x,
                h_y,
                math.sqrt(h_x * h_y),
                kind is decision.chosen,
            ]
        )
    return pd.DataFrame(rows, columns=FIGURE_COLUMNS)


ROW_LABELS = (
    "Estimated Bias",
    "Estimated S.V",
    "Estimated MSE",
    "Used Sample Size",
    "Match Decision",
    "Suggested Final Decision",
)


def _fmt_cell(cell: TableCell) -> str:
    se = MISSING_SE if cell.se is None else f"{cell.se:.5f}"
    return f"{cell.value:.5f} ({se})"


def _fmt_annotation(labels: Sequence[str]) -> str:
    return f"{CHECK} on {' & '.join(labels)} criteria" if labels else CROSS


def _layout(rows: List[List[str]]) -> str:
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def render_table(decision: Decision, fmt: str = "text") -> str:
    if fmt == "json":
        return decision.model_dump_json(indent=2)
    if fmt != "text":
        raise ConfigurationError(f"unknown table format {fmt!r}")
    rows = [[""] + [KIND_LABELS[k] for k in KIND_ORDER]]
    for label, table in zip(ROW_LABELS, (decision.bias_table, decision.sv_table, decision.mse_table)):
        rows.append([label] + [_fmt_cell(table[k]) for k in KIND_ORDER])
    rows.append([ROW_LABELS[3]] + [str(decision.used_sample_size[k]) for k in KIND_ORDER])
    rows.append([ROW_LABELS[4]] + [_fmt_annotation(decision.match_decision[k]) for k in KIND_ORDER])
    rows.append([ROW_LABELS[5]] + [CHECK if k is decision.chosen else CROSS for k in KIND_ORDER])
    return _layout(rows)


_CELL = re.compile(r"^(-?\d+\.\d+) \((" + MISSING_SE + r"|-?\d+\.\d+)\)$")


class ParsedTable(BaseModel):
    bias: Dict[EstimatorKind, TableCell]
    sv: Dict[EstimatorKind, TableCell]
    mse: Dict[EstimatorKind, TableCell]
    used_sample_size: Dict[EstimatorKind, int]
    match_decision: Dict[EstimatorKind, str]
    suggested: EstimatorKind


def _parse_cell(text: str) -> TableCell:
    m = _CELL.match(text)
    if m is None:
        raise ConfigurationError(f"unparseable table cell {text!r}")
    se = None if m.group(2) == MISSING_SE else float(m.group(2))
    return TableCell(value=float(m.group(1)), se=se)


def parse_table(text: str) -> ParsedTable:
    """Inverse of the text renderer (values at the rendered precision)."""
    rows: Dict[str, List[str]] = {}
    for line in text.splitlines()[1:]:
        parts = re.split(r"\s{2,}", line.strip())
        if len(parts) != len(KIND_ORDER) + 1:
            raise ConfigurationError(f"table row has {len(parts)} cells: {line!r}")
        rows[parts[0]] = parts[1:]
    missing = [r for r in ROW_LABELS if r not in rows]
    if missing:
        raise ConfigurationError(f"table is missing rows: {', '.join(missing)}")

    def by_kind(values: List[str]) -> Dict[EstimatorKind, str]:
        return dict(zip(KIND_ORDER, values))

    suggested = [k for k, v in by_kind(rows[ROW_LABELS[5]]).items() if v == CHECK]
    if len(suggested) != 1:
        raise ConfigurationError("table must mark exactly one suggested estimator")
    return ParsedTable(
        bias={k: _parse_cell(v) for k, v in by_kind(rows[ROW_LABELS[0]]).items()},
        sv={k: _parse_cell(v) for k, v in by_kind(rows[ROW_LABELS[1]]).items()},
        mse={k: _parse_cell(v) for k, v in by_kind(rows[ROW_LABELS[2]]).items()},
        used_sample_size={k: int(v) for k, v in by_kind(rows[ROW_LABELS[3]]).items()},
        match_decision=by_kind(rows[ROW_LABELS[4]]),
        suggested=suggested[0],
    )
