"""Closed-form moments against Monte Carlo for one parameterization."""

import logging
import math
from typing import List, Optional

from pydantic import BaseModel

from app.core.errors import ConfigurationError
from app.services.reports import KIND_ORDER, SCHEMA_VERSION, EstimatorKind
from app.services.sem_dgp import DgpParams, monte_carlo
from app.services.theory import mse_generalized


log = logging.getLogger(__name__)

SHORT_NAMES = {
    EstimatorKind.classic_did: "did",
    EstimatorKind.matched_x: "didx",
    EstimatorKind.matched_x_y: "didxy",
}
# Floor for the bias comparison when every replicate is identical.
EXACT_TOL = 1e-10


class VerificationRow(BaseModel):
    name: str
    kind: EstimatorKind
    quantity: str
    theory: float
    monte_carlo: float
    mc_se: float
    tolerance: float
    passed: bool


class VerificationReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    seed: int
    reps: int
    n1: int
    n0: int
    rows: List[VerificationRow]

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.rows)


def fixed_group_sizes(params: DgpParams) -> DgpParams:
    """Pin the treated count so the closed forms and the simulation share n1, n0."""
    if params.n_treated is not None:
        return params
    n_treated = int(round(params.p_treated * params.n_units))
    log.info("verify_fixed_n_treated", extra={"n_treated": n_treated})
    return params.model_copy(update={"n_treated": n_treated})


def verify(
    params: DgpParams,
    reps: int,
    seed: int,
    threads: Optional[int] = None,
    var_rel_tol: float = 0.05,
    bias_se_mult: float = 3.0,
) -> VerificationReport:
    """Variance rows pass within a relative tolerance; bias rows within a multiple of the MC SE."""
    if reps < 2:
        raise ConfigurationError("need >= 2 replicates")
    params = fixed_group_sizes(params)
    n1 = params.n_treated
    n0 = params.n_units - n1
    theory = mse_generalized(params, n1, n0)

    rows: List[VerificationRow] = []
    for kind in KIND_ORDER:
        mc = monte_carlo(params, kind, reps, seed, threads=threads)
        m = theory.estimators[kind]
        short = SHORT_NAMES[kind]
        rel = abs(mc.variance - m.var_full) / m.var_full if m.var_full > 0 else abs(mc.variance)
        rows.append(
            VerificationRow(
                name=f"v_{short}",
                kind=kind,
                quantity="variance",
                theory=m.var_full,
                monte_carlo=mc.variance,
                mc_se=mc.variance * math.sqrt(2.0 / (reps - 1)),
                tolerance=var_rel_tol,
                passed=rel <= var_rel_tol,
            )
        )
        bias_mc = mc.mean - params.tau
        allowed = max(bias_se_mult * mc.mc_se, EXACT_TOL)
        rows.append(
            VerificationRow(
                name=f"bias_{short}",
                kind=kind,
                quantity="bias",
                theory=m.bias,
                monte_carlo=bias_mc,
                mc_se=mc.mc_se,
                tolerance=allowed,
                passed=abs(bias_mc - m.bias) <= allowed,
            )
        )
    report = VerificationReport(seed=seed, reps=reps, n1=n1, n0=n0, rows=rows)
    log.info("verify_done", extra={"reps": reps, "passed": sum(r.passed for r in rows), "rows": len(rows)})
    return report


def render_verification(report: VerificationReport) -> str:
    lines = []
    for r in report.rows:
        verdict = "PASS" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<11} theory {r.theory:.4f} | MC {r.monte_carlo:.4f}±{r.mc_se:.4f} | {verdict}"
        )
    return "\n".join(lines) + "\n"
