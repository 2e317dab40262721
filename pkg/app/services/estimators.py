"""Point estimators: classic DiD and DiD after matching.

All three are sample means of unit-level contrasts. With T > 1
pre-periods the pre-treatment outcome is the average over periods
0..T-1; with T = 1 this is just period 0.
"""

import logging
from typing import Optional

import numpy as np
from pydantic import BaseModel

from app.core.errors import ConfigurationError, MatchingError
from app.services.matcher import FeatureSet, MatchAssignment, MatchSpec, match
from app.services.panel import PanelData
from app.services.reports import EstimatorKind


log = logging.getLogger(__name__)

REQUIRED_FEATURES = {
    EstimatorKind.matched_x: FeatureSet.covariates_only,
    EstimatorKind.matched_x_y: FeatureSet.covariates_and_preoutcomes,
}


class EstimateResult(BaseModel):
    kind: EstimatorKind
    tau_hat: float
    n1: int
    n0_or_ntilde: int
    pre_mean_basis: str
    # Set when caliper drops left fewer matched controls than treated units.
    outside_assumptions: bool = False


def _basis(panel: PanelData) -> str:
    return "single_period" if panel.t_pre == 1 else "averaged_T"


def _finite(kind: EstimatorKind, value: float) -> float:
    if not np.isfinite(value):
        raise ConfigurationError(f"{kind.value}: non-finite estimate")
    return float(value)


def estimate_classic(panel: PanelData) -> EstimateResult:
    if panel.n1 < 1 or panel.n0 < 1:
        raise ConfigurationError("degenerate group")
    c = panel.contrast()
    tau = c[panel.z == 1].mean() - c[panel.z == 0].mean()
    return EstimateResult(
        kind=EstimatorKind.classic_did,
        tau_hat=_finite(EstimatorKind.classic_did, tau),
        n1=panel.n1,
        n0_or_ntilde=panel.n0,
        pre_mean_basis=_basis(panel),
    )


def _check_assignment(panel: PanelData, assignment: MatchAssignment, kind: EstimatorKind) -> None:
    if panel.n1 < 1:
        raise ConfigurationError("degenerate group")
    expected = REQUIRED_FEATURES[kind]
    if assignment.features is not expected:
        raise ConfigurationError(
            f"{kind.value} needs an assignment built on {expected.value}, got {assignment.features.value}"
        )
    if assignment.n_matched == 0:
        raise MatchingError("empty assignment")
    if assignment.n_matched < panel.n1:
        log.warning(
            "matched_controls_below_n1",
            extra={"kind": kind.value, "n_matched": assignment.n_matched, "n1": panel.n1},
        )


def estimate_matched_x(panel: PanelData, assignment: MatchAssignment) -> EstimateResult:
    _check_assignment(panel, assignment, EstimatorKind.matched_x)
    c = panel.contrast()
    tau = c[panel.z == 1].mean() - c[assignment.m_flags == 1].sum() / assignment.n_matched
    return EstimateResult(
        kind=EstimatorKind.matched_x,
        tau_hat=_finite(EstimatorKind.matched_x, tau),
        n1=panel.n1,
        n0_or_ntilde=assignment.n_matched,
        pre_mean_basis=_basis(panel),
        outside_assumptions=assignment.n_matched < panel.n1,
    )


def estimate_matched_xy(panel: PanelData, assignment: MatchAssignment) -> EstimateResult:
    _check_assignment(panel, assignment, EstimatorKind.matched_x_y)
    post = panel.y[:, panel.t_pre]
    tau = post[panel.z == 1].mean() - post[assignment.m_flags == 1].sum() / assignment.n_matched
    return EstimateResult(
        kind=EstimatorKind.matched_x_y,
        tau_hat=_finite(EstimatorKind.matched_x_y, tau),
        n1=panel.n1,
        n0_or_ntilde=assignment.n_matched,
        pre_mean_basis=_basis(panel),
        outside_assumptions=assignment.n_matched < panel.n1,
    )


def run_estimator(panel: PanelData, kind: EstimatorKind, spec: Optional[MatchSpec] = None) -> EstimateResult:
    """Estimate one kind, matching first when the kind needs it.

    `spec` supplies method and standardization; its feature set is
    overridden by the one the kind requires.
    """
    if kind is EstimatorKind.classic_did:
        return estimate_classic(panel)
    base = spec or MatchSpec()
    assignment = match(panel, base.model_copy(update={"features": REQUIRED_FEATURES[kind]}))
    if kind is EstimatorKind.matched_x:
        return estimate_matched_x(panel, assignment)
    return estimate_matched_xy(panel, assignment)
