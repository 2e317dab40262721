"""Plug-in estimates of bias, core variance, MSE and reliability from panel data.

Outcomes are first residualized on X with per-period least squares fitted
on control units only; every downstream moment is computed from the
residualized outcomes Y~. Second moments are pooled within-group
moments: each group is centred at its own mean, cross-products are
summed over both groups and divided by (n0 - 1) + (n1 - 1).
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel

from app.core.errors import ConfigurationError, NumericalError
from app.core.linalg import guarded_solve
from app.services.panel import PanelData
from app.services.reports import (
    KIND_ORDER,
    SCHEMA_VERSION,
    EstimatorKind,
    EstimatorMoments,
    size_factor,
)
from app.services.theory import VarianceTerms


log = logging.getLogger(__name__)

RANK_TOL = 1e-10


@dataclass(frozen=True)
class ResidualizedPanel:
    y_tilde: np.ndarray
    # (T+1) x p slopes and T+1 intercepts from the control-group fits
    beta_x_hat: np.ndarray
    intercepts: np.ndarray
    r2: np.ndarray
    n_control: int
    dropped_columns: Tuple[int, ...] = ()


class PluginReport(BaseModel):
    schema_version: str = SCHEMA_VERSION
    source: str = "plugin"
    n1: int
    n0: int
    n_matched: int
    estimators: Dict[EstimatorKind, EstimatorMoments]
    reliability_hat: Optional[float] = None
    delta_x_hat: List[float]
    r2_by_period: List[float]


class BiasCorrection(BaseModel):
    tau_hat: float
    bias_hat: float
    corrected: float
    se: Optional[float] = None
    z: Optional[float] = None
    significant_at_2se: Optional[bool] = None


def pooled_cov(a: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Pooled within-group covariance of the columns of a.

    Divides by n - 2 (one mean per group), not n - 1.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    n = a.shape[0]
    if n <= 2:
        raise ConfigurationError("pooled moments need more than two units")
    acc = np.zeros((a.shape[1], a.shape[1]))
    for g in (0, 1):
        block = a[z == g]
        if block.shape[0] == 0:
            raise ConfigurationError("degenerate group")
        c = block - block.mean(axis=0)
        acc += c.T @ c
    return acc / (n - 2)


def pooled_var(v: np.ndarray, z: np.ndarray) -> float:
    return float(pooled_cov(v, z)[0, 0])


def group_diff(a: np.ndarray, z: np.ndarray) -> np.ndarray:
    return a[z == 1].mean(axis=0) - a[z == 0].mean(axis=0)


def _constant_columns(x: np.ndarray) -> List[int]:
    return [j for j in range(x.shape[1]) if np.ptp(x[:, j]) == 0]


def residualize(panel: PanelData) -> ResidualizedPanel:
    """Per-period control-only OLS of Y_t on (1, X); Y~ = Y - X beta_x_hat for all units."""
    p = panel.p
    controls = panel.control_idx
    if controls.shape[0] < p + 2:
        raise ConfigurationError(f"control group needs at least p + 2 = {p + 2} units, has {controls.shape[0]}")
    xc_full = panel.x[controls]
    dropped = _constant_columns(xc_full)
    if dropped:
        log.warning("residualize_dropped_constant_columns", extra={"columns": [f"x{j + 1}" for j in dropped]})
    keep = [j for j in range(p) if j not in dropped]
    xc = xc_full[:, keep]
    design = np.hstack([np.ones((xc.shape[0], 1)), xc])

    _, r, piv = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int((diag > RANK_TOL * max(1.0, diag.max())).sum())
    if rank < design.shape[1]:
        bad = sorted(f"x{keep[c - 1] + 1}" for c in piv[rank:] if c > 0)
        raise NumericalError(f"rank-deficient X: collinear columns {', '.join(bad) or 'intercept'}")

    yc = panel.y[controls]
    coef, _, _, _ = scipy.linalg.lstsq(design, yc)
    beta = np.zeros((panel.t_pre + 1, p))
    beta[:, keep] = coef[1:].T
    intercepts = coef[0]

    fitted = design @ coef
    ssr = ((yc - fitted) ** 2).sum(axis=0)
    sst = ((yc - yc.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(sst > 0, 1.0 - ssr / sst, 1.0)

    y_tilde = panel.y - panel.x @ beta.T
    log.debug("residualized", extra={"n_control": int(controls.shape[0]), "p": p, "t_pre": panel.t_pre})
    return ResidualizedPanel(
        y_tilde=y_tilde,
        beta_x_hat=beta,
        intercepts=intercepts,
        r2=r2,
        n_control=int(controls.shape[0]),
        dropped_columns=tuple(dropped),
    )


def _contrast(res: ResidualizedPanel, t: int) -> np.ndarray:
    return res.y_tilde[:, t] - res.y_tilde[:, :t].mean(axis=1)


def _coef_shift(res: ResidualizedPanel, t: int) -> np.ndarray:
    return res.beta_x_hat[t] - res.beta_x_hat[:t].mean(axis=0)


def _regression_terms(res: ResidualizedPanel, z: np.ndarray, t: int) -> Tuple[np.ndarray, float, np.ndarray]:
    """Pooled Cov(Y~_T, Y~_pre) V^-1 with V = pooled Var(Y~_pre), plus Var(Y~_T) and Cov."""
    cov = pooled_cov(res.y_tilde, z)
    v_pre = cov[:t, :t]
    c_post_pre = cov[t, :t]
    weights = guarded_solve(v_pre, c_post_pre, "pre-period residualized outcome covariance")
    return weights, float(cov[t, t]), c_post_pre


def estimate_bias(panel: PanelData, res: Optional[ResidualizedPanel] = None) -> Dict[EstimatorKind, float]:
    res = res or residualize(panel)
    t, z = panel.t_pre, panel.z
    trend_gap = float(group_diff(_contrast(res, t), z))
    delta_x_hat = group_diff(panel.x, z) if panel.p else np.zeros(0)
    weights, _, _ = _regression_terms(res, z, t)
    post_gap = float(group_diff(res.y_tilde[:, t], z))
    pre_gap = group_diff(res.y_tilde[:, :t], z)
    return {
        EstimatorKind.classic_did: trend_gap + float(_coef_shift(res, t) @ delta_x_hat),
        EstimatorKind.matched_x: trend_gap,
        EstimatorKind.matched_x_y: post_gap - float(weights @ pre_gap),
    }


def estimate_variance(
    panel: PanelData,
    res: Optional[ResidualizedPanel] = None,
    n_matched: Optional[int] = None,
) -> Dict[EstimatorKind, VarianceTerms]:
    res = res or residualize(panel)
    t, z = panel.t_pre, panel.z
    base = pooled_var(_contrast(res, t), z)
    shift = _coef_shift(res, t)
    sxx = pooled_cov(panel.x, z) if panel.p else np.zeros((0, 0))
    weights, var_post, c_post_pre = _regression_terms(res, z, t)
    cores = {
        EstimatorKind.classic_did: base + float(shift @ sxx @ shift),
        EstimatorKind.matched_x: base,
        EstimatorKind.matched_x_y: var_post - float(weights @ c_post_pre),
    }
    out: Dict[EstimatorKind, VarianceTerms] = {}
    for kind in KIND_ORDER:
        f = size_factor(kind, panel.n1, panel.n0, n_matched)
        out[kind] = VarianceTerms(var_core=cores[kind], size_factor=f, var_full=f * cores[kind])
    return out


def estimate_reliability(
    panel: PanelData,
    stable_pair: Tuple[int, int] = (0, 1),
    res: Optional[ResidualizedPanel] = None,
) -> float:
    """Single-latent reliability from two pre-periods presumed to share the latent effect."""
    t = panel.t_pre
    if t < 2:
        raise ConfigurationError("reliability estimate needs at least two pre-treatment periods")
    a, b = stable_pair
    if a == b or not (0 <= a < t and 0 <= b < t):
        raise ConfigurationError(f"stable pair must be two distinct pre-periods in [0, {t - 1}]")
    res = res or residualize(panel)
    z = panel.z
    sigma_e2 = 0.5 * pooled_var(res.y_tilde[:, a] - res.y_tilde[:, b], z)
    raw = np.array([pooled_var(res.y_tilde[:, s], z) for s in range(t)]) - sigma_e2
    if (raw < 0).all():
        log.warning("reliability clipped at 0", extra={"sigma_e2_hat": sigma_e2})
    beta_sq = np.clip(raw, 0.0, None)
    signal = t * float(beta_sq.mean())
    total = signal + sigma_e2
    return signal / total if total > 0 else 0.0


def plugin_report(
    panel: PanelData,
    n_matched: Optional[int] = None,
    stable_pair: Optional[Tuple[int, int]] = None,
) -> PluginReport:
    res = residualize(panel)
    biases = estimate_bias(panel, res)
    variances = estimate_variance(panel, res, n_matched)
    reliability = None
    if stable_pair is not None:
        reliability = estimate_reliability(panel, stable_pair, res)
    return PluginReport(
        n1=panel.n1,
        n0=panel.n0,
        n_matched=panel.n1 if n_matched is None else n_matched,
        estimators={
            k: EstimatorMoments.compose(biases[k], variances[k].var_core, variances[k].size_factor) for k in KIND_ORDER
        },
        reliability_hat=reliability,
        delta_x_hat=(group_diff(panel.x, panel.z) if panel.p else np.zeros(0)).tolist(),
        r2_by_period=res.r2.tolist(),
    )


def bias_correct(tau_hat: float, bias_hat: float) -> float:
    return tau_hat - bias_hat


def bias_corrected_summary(tau_hat: float, bias_hat: float, se: Optional[float] = None) -> BiasCorrection:
    """Corrected effect and whether it still clears two standard errors."""
    corrected = bias_correct(tau_hat, bias_hat)
    if se is None or not se > 0 or not math.isfinite(se):
        return BiasCorrection(tau_hat=tau_hat, bias_hat=bias_hat, corrected=corrected, se=se)
    z = corrected / se
    return BiasCorrection(
        tau_hat=tau_hat,
        bias_hat=bias_hat,
        corrected=corrected,
        se=se,
        z=z,
        significant_at_2se=abs(z) > 2.0,
    )
