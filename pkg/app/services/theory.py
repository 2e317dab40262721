"""Closed-form bias, variance, MSE and reliability under the structural model.

Every quantity is evaluated from DgpParams alone and serves as ground
truth for the Monte Carlo and plug-in layers. Notation in code:

- delta_theta / delta_x_coeff: post-period coefficient minus the mean
  pre-period coefficient (time variation)
- delta_theta_groups / delta_x_groups: treated-minus-control means (imbalance)
- sigma_tilde: covariance of theta after projecting out X
- r_matrix: reliability of the pre-period outcomes about theta given X
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel

from app.core.errors import MdidError, ParameterError
from app.core.linalg import guarded_solve, sym_sqrt
from app.services.reports import (
    KIND_ORDER,
    SCHEMA_VERSION,
    EstimatorKind,
    EstimatorMoments,
    size_factor,
)
from app.services.sem_dgp import CanonicalParams, DgpParams, validate_params


log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DerivedStructure:
    delta_theta: np.ndarray
    delta_x_coeff: np.ndarray
    delta_theta_groups: np.ndarray
    delta_x_groups: np.ndarray
    sigma_tilde: np.ndarray
    delta_tilde: np.ndarray
    b_theta: np.ndarray
    sigma_eps: np.ndarray
    r_matrix: np.ndarray
    # Sigma_thetaX Sigma_XX^-1 (q x p)
    proj_x_to_theta: np.ndarray
    # Sigma_tilde B^T (B Sigma_tilde B^T + Sigma_eps)^-1 (q x T)
    gain: np.ndarray
    # Sigma_tilde - gain B Sigma_tilde
    posterior_cov: np.ndarray
    beta_theta_post: np.ndarray
    t_pre: int

    def reliability_eigenvalues(self) -> np.ndarray:
        """Eigenvalues of the symmetrized reliability; all lie in [0, 1)."""
        if self.r_matrix.size == 0:
            return np.zeros(0)
        root = sym_sqrt(self.sigma_tilde)
        v = self.b_theta @ self.sigma_tilde @ self.b_theta.T + self.sigma_eps
        inner = self.b_theta.T @ guarded_solve(v, self.b_theta, "pre-period outcome covariance")
        return np.linalg.eigvalsh(root @ inner @ root)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def derive_structure(params: DgpParams) -> DerivedStructure:
    a = params.arrays()
    q, p, t = params.q, params.p, params.t_pre
    bt, bx = a["beta_theta"], a["beta_x"]

    if p:
        proj = guarded_solve(a["s_xx"], a["s_tx"].T, "sigma_xx").T
    else:
        proj = np.zeros((q, 0))
    sigma_tilde = _sym(a["s_tt"] - proj @ a["s_tx"].T)
    d_theta = a["mu_theta"][1] - a["mu_theta"][0]
    d_x = a["mu_x"][1] - a["mu_x"][0]
    b = bt[:t]
    sigma_eps = params.sigma_e2 * np.eye(t)

    if q:
        v = b @ sigma_tilde @ b.T + sigma_eps
        gain = guarded_solve(v, b @ sigma_tilde, "pre-period outcome covariance").T
        r = gain @ b
        posterior = _sym(sigma_tilde - gain @ b @ sigma_tilde)
    else:
        gain, r, posterior = np.zeros((0, t)), np.zeros((0, 0)), np.zeros((0, 0))

    return DerivedStructure(
        delta_theta=bt[t] - bt[:t].mean(axis=0),
        delta_x_coeff=bx[t] - bx[:t].mean(axis=0),
        delta_theta_groups=d_theta,
        delta_x_groups=d_x,
        sigma_tilde=sigma_tilde,
        delta_tilde=d_theta - proj @ d_x,
        b_theta=b,
        sigma_eps=sigma_eps,
        r_matrix=r,
        proj_x_to_theta=proj,
        gain=gain,
        posterior_cov=posterior,
        beta_theta_post=bt[t],
        t_pre=t,
    )


class VarianceTerms(BaseModel):
    var_core: float
    size_factor: float
    var_full: float


class MomentsReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    source: str = "theory"
    n1: int
    n0: int
    n_matched: int
    estimators: Dict[EstimatorKind, EstimatorMoments]
    reliability_scalar: Optional[float] = None
    # Realized matched count below n1 (caliper drops).
    outside_assumptions: bool = False


def _admissible(params: DgpParams) -> None:
    report = validate_params(params)
    if not report.ok:
        raise ParameterError("; ".join(report.violations))


def variance_canonical(params: CanonicalParams, n1: int, n0: int) -> tuple:
    """(v_did, v_didx, v_didxy) in the univariate two-period model."""
    rho = params.rho
    if abs(rho) >= 1.0:
        raise ParameterError("degenerate correlation: |rho| must be < 1")
    s_t2, s_x2 = params.sigma_theta ** 2, params.sigma_x ** 2
    s_e2 = params.sigma_e2
    d_t, d_x = params.delta_theta, params.delta_x
    cond = s_t2 * (1.0 - rho ** 2)

    v_did = (1.0 / n1 + 1.0 / n0) * (
        2 * s_e2 + d_t ** 2 * s_t2 + d_x ** 2 * s_x2 + 2 * d_t * d_x * rho * params.sigma_x * params.sigma_theta
    )
    v_didx = (2.0 / n1) * (2 * s_e2 + d_t ** 2 * cond)
    signal = params.beta_theta[0] ** 2 * cond
    r = signal / (signal + s_e2) if signal + s_e2 > 0 else 0.0
    v_didxy = (2.0 / n1) * (s_e2 + params.beta_theta[1] ** 2 * cond * (1.0 - r))
    return v_did, v_didx, v_didxy


def core_variances(params: DgpParams, s: Optional[DerivedStructure] = None) -> Dict[EstimatorKind, float]:
    s = s or derive_structure(params)
    a = params.arrays()
    t = params.t_pre
    noise = (t + 1) / t * params.sigma_e2
    dt, dx = s.delta_theta, s.delta_x_coeff
    b_post = s.beta_theta_post
    q = params.q
    eye = np.eye(q)
    return {
        EstimatorKind.classic_did: float(
            noise + dt @ a["s_tt"] @ dt + dx @ a["s_xx"] @ dx + 2 * dt @ a["s_tx"] @ dx
        ),
        EstimatorKind.matched_x: float(noise + dt @ s.sigma_tilde @ dt),
        EstimatorKind.matched_x_y: float(b_post @ (eye - s.r_matrix) @ s.sigma_tilde @ b_post + params.sigma_e2),
    }


def variance_generalized(
    params: DgpParams, n1: int, n0: int, n_matched: Optional[int] = None
) -> Dict[EstimatorKind, VarianceTerms]:
    _admissible(params)
    cores = core_variances(params)
    out: Dict[EstimatorKind, VarianceTerms] = {}
    for kind in KIND_ORDER:
        f = size_factor(kind, n1, n0, n_matched)
        out[kind] = VarianceTerms(var_core=cores[kind], size_factor=f, var_full=f * cores[kind])
    return out


def bias_generalized(params: DgpParams, s: Optional[DerivedStructure] = None) -> Dict[EstimatorKind, float]:
    _admissible(params)
    s = s or derive_structure(params)
    dt, dx = s.delta_theta, s.delta_x_coeff
    eye = np.eye(params.q)
    # Sigma_XX^-1 Sigma_Xtheta Delta_theta = proj^T Delta_theta
    x_channel = s.proj_x_to_theta.T @ dt + dx
    return {
        EstimatorKind.classic_did: float(dt @ s.delta_tilde + x_channel @ s.delta_x_groups),
        EstimatorKind.matched_x: float(dt @ s.delta_tilde),
        EstimatorKind.matched_x_y: float(s.beta_theta_post @ (eye - s.r_matrix) @ s.delta_tilde),
    }


def mse_generalized(params: DgpParams, n1: int, n0: int, n_matched: Optional[int] = None) -> MomentsReport:
    _admissible(params)
    s = derive_structure(params)
    biases = bias_generalized(params, s)
    variances = variance_generalized(params, n1, n0, n_matched)
    nm = n1 if n_matched is None else n_matched
    outside = nm < n1
    if outside:
        log.warning("moments_outside_assumptions", extra={"n1": n1, "n_matched": nm})
    return MomentsReport(
        n1=n1,
        n0=n0,
        n_matched=nm,
        estimators={
            k: EstimatorMoments.compose(biases[k], variances[k].var_core, variances[k].size_factor) for k in KIND_ORDER
        },
        reliability_scalar=reliability_scalar(params) if params.q == 1 else None,
        outside_assumptions=outside,
    )


def reliability_scalar(params: DgpParams) -> float:
    """T * mean(beta_pre^2) * s~^2 / (T * mean(beta_pre^2) * s~^2 + sigma_E^2)."""
    if params.q != 1:
        raise ParameterError("scalar reliability undefined for q != 1")
    s = derive_structure(params)
    t = params.t_pre
    signal = t * float(np.mean(s.b_theta[:, 0] ** 2)) * float(s.sigma_tilde[0, 0])
    total = signal + params.sigma_e2
    return signal / total if total > 0 else 0.0


class ConvergencePoint(BaseModel):
    t_pre: int
    distance: Optional[float] = None
    assumption_violated: bool = False
    note: Optional[str] = None


class ConvergenceReport(BaseModel):
    points: List[ConvergencePoint]
    monotone_decreasing: bool
    below_threshold: bool
    threshold: float


def reliability_convergence_check(
    family: Callable[[int], DgpParams],
    horizons: Sequence[int],
    threshold: float = 0.05,
) -> ConvergenceReport:
    """Spectral distance ||r(T) - I||_2 along a family of parameterizations.

    A point is flagged when the average outer product of the pre-period
    latent coefficients is singular (no positive-definite limit).
    """
    points: List[ConvergencePoint] = []
    for t in horizons:
        params = family(t)
        try:
            s = derive_structure(params)
        except MdidError as e:
            log.warning("reliability_convergence_singular", extra={"t_pre": t, "error": str(e)})
            points.append(ConvergencePoint(t_pre=t, note=str(e)))
            continue
        q = params.q
        gram = s.b_theta.T @ s.b_theta / t
        violated = q > 0 and float(np.linalg.eigvalsh(gram).min()) <= 1e-12
        dist = float(np.linalg.norm(s.r_matrix - np.eye(q), 2)) if q else 0.0
        points.append(
            ConvergencePoint(
                t_pre=t,
                distance=dist,
                assumption_violated=violated,
                note="assumption violated: pre-period latent signal is singular" if violated else None,
            )
        )
    dists = [pt.distance for pt in points if pt.distance is not None]
    return ConvergenceReport(
        points=points,
        monotone_decreasing=all(b < a for a, b in zip(dists, dists[1:])),
        below_threshold=bool(dists) and dists[-1] <= threshold,
        threshold=threshold,
    )


class TradeoffResult(BaseModel):
    match_x_better: bool
    lhs: float
    rhs: float


def variance_tradeoff_conditions(params: CanonicalParams, n1: int, n0: int) -> TradeoffResult:
    """Whether matching on X lowers variance relative to classic DiD.

    match_x_better is lhs >= rhs, equivalent to v_did >= v_didx.
    """
    rho = params.rho
    if abs(rho) >= 1.0:
        raise ParameterError("degenerate correlation: |rho| must be < 1")
    s_t, s_x, s_e2 = params.sigma_theta, params.sigma_x, params.sigma_e2
    d_t, d_x = params.delta_theta, params.delta_x
    lhs = (d_x ** 2 * s_x ** 2 + 2 * d_t * d_x * rho * s_t * s_x) * (1.0 / n0 + 1.0 / n1)
    rhs = d_t ** 2 * s_t ** 2 * ((1 - 2 * rho ** 2) / n1 - 1.0 / n0) + 2 * s_e2 * (1.0 / n1 - 1.0 / n0)
    return TradeoffResult(match_x_better=lhs >= rhs, lhs=lhs, rhs=rhs)


TRADEOFF_COLUMNS = ("rho", "n0_over_n1", "lhs", "rhs", "match_x_better", "v_did", "v_didx", "v_didxy")


def tradeoff_grid(
    base: CanonicalParams,
    rhos: Sequence[float],
    ratios: Sequence[float],
    n1: int,
) -> pd.DataFrame:
    """Plot-ready sweep of the X-matching variance tradeoff over (rho, n0/n1)."""
    rows = []
    for rho in rhos:
        params = base.model_copy(update={"rho": float(rho)})
        for ratio in ratios:
            n0 = max(1, int(round(ratio * n1)))
            res = variance_tradeoff_conditions(params, n1, n0)
            v_did, v_didx, v_didxy = variance_canonical(params, n1, n0)
            rows.append((float(rho), float(ratio), res.lhs, res.rhs, res.match_x_better, v_did, v_didx, v_didxy))
    log.debug("tradeoff_grid", extra={"cells": len(rows)})
    return pd.DataFrame(rows, columns=list(TRADEOFF_COLUMNS))
