"""Synthetic panels from the linear structural equation model.

Y[i, t] = beta0[t] + beta_theta[t] . theta_i + beta_x[t] . X_i + eps[i, t]
          + tau * 1{t == T, Z_i == 1}

with (theta_i, X_i) drawn within treatment group around group-specific
means and shared covariance blocks. Latent/covariate and noise laws are
Gaussian, shifted-uniform or symmetric two-point, each scaled to match
the configured first and second moments.

Randomness comes from numpy's counter-based Philox generator keyed by
(seed, stream...), so replicate k of a run draws the same numbers no
matter which worker thread evaluates it.
"""

import logging
import math
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.errors import ConfigurationError, ParameterError, ReplicateError
from app.core.linalg import is_pd, psd_factor
from app.services.matcher import FeatureSet, MatchAssignment, assignment_from_pairs
from app.services.panel import PanelData
from app.services.reports import EstimatorKind


log = logging.getLogger(__name__)

MAX_TREATMENT_DRAWS = 1000
SQRT3 = math.sqrt(3.0)


class LatentLaw(str, Enum):
    gaussian = "gaussian"
    shifted_uniform = "shifted-uniform"
    two_point = "two-point"


class DgpParams(BaseModel):
    """Full parameterization of the structural model.

    Per-period arrays have T+1 rows (pre periods 0..T-1, post period T).
    Group arrays have two rows: [control, treated]. Matrices are lists of rows.
    """

    model_config = ConfigDict(frozen=True)

    n_units: int
    p_treated: float
    t_pre: int
    beta0: List[float]
    beta_theta: List[List[float]]
    beta_x: List[List[float]]
    mu_theta_by_group: List[List[float]]
    mu_x_by_group: List[List[float]]
    sigma_theta_theta: List[List[float]]
    sigma_xx: List[List[float]]
    sigma_theta_x: List[List[float]] = Field(default_factory=list)
    sigma_e2: float
    tau: float = 0.0
    latent_law: LatentLaw = LatentLaw.gaussian
    # Fixed number of treated units; None draws Z iid Bernoulli(p_treated).
    n_treated: Optional[int] = None

    @property
    def q(self) -> int:
        return len(self.sigma_theta_theta)

    @property
    def p(self) -> int:
        return len(self.sigma_xx)

    def arrays(self) -> Dict[str, np.ndarray]:
        q, p, t1 = self.q, self.p, self.t_pre + 1
        return {
            "beta0": np.asarray(self.beta0, dtype=float).reshape(t1),
            "beta_theta": np.asarray(self.beta_theta, dtype=float).reshape(t1, q),
            "beta_x": np.asarray(self.beta_x, dtype=float).reshape(t1, p),
            "mu_theta": np.asarray(self.mu_theta_by_group, dtype=float).reshape(2, q),
            "mu_x": np.asarray(self.mu_x_by_group, dtype=float).reshape(2, p),
            "s_tt": np.asarray(self.sigma_theta_theta, dtype=float).reshape(q, q),
            "s_xx": np.asarray(self.sigma_xx, dtype=float).reshape(p, p),
            "s_tx": np.asarray(self.sigma_theta_x, dtype=float).reshape(q, p),
        }

    def joint_covariance(self) -> np.ndarray:
        a = self.arrays()
        return np.block([[a["s_tt"], a["s_tx"]], [a["s_tx"].T, a["s_xx"]]])

    @classmethod
    def from_arrays(
        cls,
        *,
        n_units: int,
        p_treated: float,
        beta0: Sequence[float],
        beta_theta: np.ndarray,
        beta_x: np.ndarray,
        mu_theta: np.ndarray,
        mu_x: np.ndarray,
        sigma_theta_theta: np.ndarray,
        sigma_xx: np.ndarray,
        sigma_theta_x: np.ndarray,
        sigma_e2: float,
        tau: float = 0.0,
        latent_law: LatentLaw = LatentLaw.gaussian,
        n_treated: Optional[int] = None,
    ) -> "DgpParams":
        beta0 = np.asarray(beta0, dtype=float)
        t1 = beta0.shape[0]
        s_tt = np.atleast_2d(np.asarray(sigma_theta_theta, dtype=float))
        s_xx = np.atleast_2d(np.asarray(sigma_xx, dtype=float))
        q = 0 if s_tt.size == 0 else s_tt.shape[0]
        p = 0 if s_xx.size == 0 else s_xx.shape[0]
        return cls(
            n_units=n_units,
            p_treated=p_treated,
            t_pre=t1 - 1,
            beta0=beta0.tolist(),
            beta_theta=np.asarray(beta_theta, dtype=float).reshape(t1, q).tolist(),
            beta_x=np.asarray(beta_x, dtype=float).reshape(t1, p).tolist(),
            mu_theta_by_group=np.asarray(mu_theta, dtype=float).reshape(2, q).tolist(),
            mu_x_by_group=np.asarray(mu_x, dtype=float).reshape(2, p).tolist(),
            sigma_theta_theta=s_tt.reshape(q, q).tolist(),
            sigma_xx=s_xx.reshape(p, p).tolist(),
            sigma_theta_x=np.asarray(sigma_theta_x, dtype=float).reshape(q, p).tolist(),
            sigma_e2=sigma_e2,
            tau=tau,
            latent_law=latent_law,
            n_treated=n_treated,
        )


class CanonicalParams(BaseModel):
    """Univariate two-period restriction: q = p = 1, T = 1.

    Coefficient and mean pairs are (period 0, period 1) and
    (control, treated); the Delta/delta quantities are derived.
    """

    model_config = ConfigDict(frozen=True)

    sigma_theta: float = 1.0
    sigma_x: float = 1.0
    rho: float = 0.0
    beta_theta: Tuple[float, float] = (0.0, 0.0)
    beta_x: Tuple[float, float] = (0.0, 0.0)
    mu_theta: Tuple[float, float] = (0.0, 0.0)
    mu_x: Tuple[float, float] = (0.0, 0.0)
    beta0: Tuple[float, float] = (0.0, 0.0)
    sigma_e2: float = 1.0
    tau: float = 0.0
    n_units: int = 400
    p_treated: float = 0.5
    latent_law: LatentLaw = LatentLaw.gaussian
    n_treated: Optional[int] = None

    @property
    def delta_theta(self) -> float:
        return self.beta_theta[1] - self.beta_theta[0]

    @property
    def delta_x(self) -> float:
        return self.beta_x[1] - self.beta_x[0]

    @property
    def imbalance_theta(self) -> float:
        return self.mu_theta[1] - self.mu_theta[0]

    @property
    def imbalance_x(self) -> float:
        return self.mu_x[1] - self.mu_x[0]

    def to_dgp(self) -> DgpParams:
        cov_tx = self.rho * self.sigma_theta * self.sigma_x
        return DgpParams(
            n_units=self.n_units,
            p_treated=self.p_treated,
            t_pre=1,
            beta0=list(self.beta0),
            beta_theta=[[self.beta_theta[0]], [self.beta_theta[1]]],
            beta_x=[[self.beta_x[0]], [self.beta_x[1]]],
            mu_theta_by_group=[[self.mu_theta[0]], [self.mu_theta[1]]],
            mu_x_by_group=[[self.mu_x[0]], [self.mu_x[1]]],
            sigma_theta_theta=[[self.sigma_theta ** 2]],
            sigma_xx=[[self.sigma_x ** 2]],
            sigma_theta_x=[[cov_tx]],
            sigma_e2=self.sigma_e2,
            tau=self.tau,
            latent_law=self.latent_law,
            n_treated=self.n_treated,
        )

    @classmethod
    def from_dgp(cls, params: DgpParams) -> "CanonicalParams":
        if params.q != 1 or params.p != 1 or params.t_pre != 1:
            raise ParameterError("canonical form needs q = p = 1 and T = 1")
        a = params.arrays()
        s_t = math.sqrt(a["s_tt"][0, 0])
        s_x = math.sqrt(a["s_xx"][0, 0])
        return cls(
            sigma_theta=s_t,
            sigma_x=s_x,
            rho=float(a["s_tx"][0, 0]) / (s_t * s_x),
            beta_theta=tuple(a["beta_theta"][:, 0]),
            beta_x=tuple(a["beta_x"][:, 0]),
            mu_theta=tuple(a["mu_theta"][:, 0]),
            mu_x=tuple(a["mu_x"][:, 0]),
            beta0=tuple(a["beta0"]),
            sigma_e2=params.sigma_e2,
            tau=params.tau,
            n_units=params.n_units,
            p_treated=params.p_treated,
            latent_law=params.latent_law,
            n_treated=params.n_treated,
        )


class ValidationReport(BaseModel):
    violations: List[str] = Field(default_factory=list)
    notes: List[str] = Field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _shape_violations(params: DgpParams) -> List[str]:
    out: List[str] = []
    q, p, t1 = params.q, params.p, params.t_pre + 1
    if len(params.beta0) != t1:
        out.append(f"beta0 must have {t1} entries")
    if len(params.beta_theta) != t1 or any(len(r) != q for r in params.beta_theta):
        out.append(f"beta_theta must be {t1} rows of length {q}")
    if len(params.beta_x) != t1 or any(len(r) != p for r in params.beta_x):
        out.append(f"beta_x must be {t1} rows of length {p}")
    if len(params.mu_theta_by_group) != 2 or any(len(r) != q for r in params.mu_theta_by_group):
        out.append(f"mu_theta_by_group must be 2 rows of length {q}")
    if len(params.mu_x_by_group) != 2 or any(len(r) != p for r in params.mu_x_by_group):
        out.append(f"mu_x_by_group must be 2 rows of length {p}")
    if any(len(r) != q for r in params.sigma_theta_theta):
        out.append("sigma_theta_theta must be square")
    if any(len(r) != p for r in params.sigma_xx):
        out.append("sigma_xx must be square")
    if q and p and (len(params.sigma_theta_x) != q or any(len(r) != p for r in params.sigma_theta_x)):
        out.append(f"sigma_theta_x must be {q} x {p}")
    return out


def validate_params(params: DgpParams) -> ValidationReport:
    """List every violated admissibility condition; never raises."""
    report = ValidationReport()
    if params.n_units < 4:
        report.violations.append("n_units must be at least 4")
    if not (0.0 < params.p_treated <= 0.5):
        report.violations.append("p outside (0, 0.5]")
    if params.n_treated is not None and not (2 <= params.n_treated <= params.n_units // 2):
        report.violations.append("n_treated outside [2, n_units // 2]")
    if params.t_pre < 1:
        report.violations.append("t_pre must be at least 1")
        return report
    if params.sigma_e2 < 0:
        report.violations.append("sigma_e2 must be positive")
    elif params.sigma_e2 == 0:
        report.notes.append("sigma_e2 = 0: noiseless outcomes")
    shape = _shape_violations(params)
    report.violations.extend(shape)
    if shape:
        return report
    a = params.arrays()
    if not is_pd(a["s_tt"]):
        report.violations.append("sigma_theta_theta not positive definite")
    if not is_pd(a["s_xx"]):
        report.violations.append("sigma_xx not positive definite")
    try:
        psd_factor(params.joint_covariance())
    except ParameterError:
        report.violations.append("joint covariance not PSD")
    return report


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


def standard_draws(rng: np.random.Generator, law: LatentLaw, size: Tuple[int, ...]) -> np.ndarray:
    """Mean-zero, unit-variance iid draws from the chosen family."""
    if law is LatentLaw.gaussian:
        return rng.standard_normal(size)
    if law is LatentLaw.shifted_uniform:
        return rng.uniform(-SQRT3, SQRT3, size)
    return np.where(rng.random(size) < 0.5, -1.0, 1.0)


def _draw_treatment(rng: np.random.Generator, n: int, p: float, n_treated: Optional[int] = None) -> np.ndarray:
    if n_treated is not None:
        z = np.zeros(n, dtype=np.int8)
        z[rng.permutation(n)[:n_treated]] = 1
        return z
    for _ in range(MAX_TREATMENT_DRAWS):
        z = (rng.random(n) < p).astype(np.int8)
        n1 = int(z.sum())
        if n1 >= 2 and n - n1 >= n1:
            return z
    raise ParameterError(f"could not draw n0 >= n1 >= 2 with n={n}, p={p}")


def _ensure_admissible(params: DgpParams) -> None:
    report = validate_params(params)
    if not report.ok:
        raise ParameterError("; ".join(report.violations))


def _outcomes(a: Dict[str, np.ndarray], theta: np.ndarray, x: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return a["beta0"][None, :] + theta @ a["beta_theta"].T + x @ a["beta_x"].T + eps


def simulate(params: DgpParams, seed: int, stream: Sequence[int] = ()) -> PanelData:
    """Draw one balanced panel; a pure function of (params, seed, stream)."""
    _ensure_admissible(params)
    rng = make_rng(seed, *stream)
    a = params.arrays()
    n, q, t = params.n_units, params.q, params.t_pre
    law = params.latent_law

    z = _draw_treatment(rng, n, params.p_treated, params.n_treated)
    chol = psd_factor(params.joint_covariance())
    means = np.hstack([a["mu_theta"], a["mu_x"]])
    latent = means[z] + standard_draws(rng, law, (n, chol.shape[0])) @ chol.T
    theta, x = latent[:, :q], latent[:, q:]
    eps = math.sqrt(params.sigma_e2) * standard_draws(rng, law, (n, t + 1))

    y = _outcomes(a, theta, x, eps)
    y[z == 1, t] += params.tau
    return PanelData(
        unit_ids=tuple(f"u{i}" for i in range(n)),
        z=z,
        y=y,
        x=x,
        t_pre=t,
        theta=theta,
    )


def simulate_matched(params: DgpParams, seed: int, features: FeatureSet, stream: Sequence[int] = ()) -> Tuple[PanelData, MatchAssignment]:
    """Draw a panel whose first n1 controls are perfect matches of the treated units.

    Treated unit k (in ascending order) is paired with a control "twin" that
    shares its matching features exactly: the same X, plus the same
    pre-treatment outcomes under `covariates_and_preoutcomes`. The twin's
    latent trait is drawn from the control-group law conditional on those
    features. This realizes the zero-discrepancy matching the closed-form
    moments assume. Conditioning on pre-outcomes uses the linear projection,
    exact for the Gaussian law.
    """
    from app.services.theory import derive_structure

    panel = simulate(params, seed, stream)
    rng = make_rng(seed, *stream, 1)
    a = params.arrays()
    s = derive_structure(params)
    q, t = params.q, params.t_pre
    law = params.latent_law

    treated = panel.treated_idx
    twins = panel.control_idx[: treated.shape[0]]
    x_t = panel.x[treated]
    theta = panel.theta.copy()
    y = panel.y.copy()

    # theta | X within controls: mean mu0 + S_tx S_xx^-1 (X - mu_x0), cov S_tilde
    cond_mean = a["mu_theta"][0][None, :] + (x_t - a["mu_x"][0][None, :]) @ s.proj_x_to_theta.T
    m = treated.shape[0]
    if features is FeatureSet.covariates_only:
        chol = psd_factor(s.sigma_tilde, "conditional latent covariance")
        theta_tw = cond_mean + standard_draws(rng, law, (m, q)) @ chol.T
        eps = math.sqrt(params.sigma_e2) * standard_draws(rng, law, (m, t + 1))
        y_tw = _outcomes(a, theta_tw, x_t, eps)
    else:
        y_pre = panel.y[treated, :t]
        resid = y_pre - a["beta0"][None, :t] - x_t @ a["beta_x"][:t].T - cond_mean @ s.b_theta.T
        post_mean = cond_mean + resid @ s.gain.T
        chol = psd_factor(s.posterior_cov, "posterior latent covariance")
        theta_tw = post_mean + standard_draws(rng, law, (m, q)) @ chol.T
        eps_t = math.sqrt(params.sigma_e2) * standard_draws(rng, law, (m,))
        y_tw = np.empty((m, t + 1))
        y_tw[:, :t] = y_pre
        y_tw[:, t] = a["beta0"][t] + theta_tw @ a["beta_theta"][t] + x_t @ a["beta_x"][t] + eps_t

    theta[twins] = theta_tw
    y[twins] = y_tw
    x = panel.x.copy()
    x[twins] = x_t
    matched = PanelData(panel.unit_ids, panel.z, y, x, t, theta)
    pairs = np.column_stack([treated, twins])
    assignment = assignment_from_pairs(matched, pairs, np.zeros(m), features, unmatched_treated=[])
    return matched, assignment


def empirical_moments(panels: Sequence[PanelData], estimator: EstimatorKind, spec=None) -> Tuple[float, float]:
    """Sample mean and variance (ddof=1) of one estimator across replicate panels.

    Matched estimators build their assignment with `spec` (see
    `estimators.run_estimator`).
    """
    from app.services.estimators import run_estimator

    if len(panels) < 2:
        raise ConfigurationError("need >= 2 replicates")
    values: List[float] = []
    for i, panel in enumerate(panels):
        try:
            values.append(run_estimator(panel, estimator, spec).tau_hat)
        except Exception as e:
            raise ReplicateError(str(e), replicate=i) from e
    return sample_mean_var(values)


def sample_mean_var(values: Sequence[float]) -> Tuple[float, float]:
    k = len(values)
    mean = math.fsum(values) / k
    var = math.fsum((v - mean) ** 2 for v in values) / (k - 1)
    return mean, var


class MonteCarloSummary(BaseModel):
    kind: EstimatorKind
    reps: int
    mean: float
    variance: float
    mse: float
    mc_se: float


def monte_carlo(
    params: DgpParams,
    kind: EstimatorKind,
    reps: int,
    seed: int,
    threads: Optional[int] = None,
) -> MonteCarloSummary:
    """Monte Carlo moments of one estimator over fresh replicate panels.

    Classic DiD runs on `simulate`; matched estimators run on
    `simulate_matched` twins. Replicate k uses stream (kind, k).
    """
    from app.services.estimators import estimate_classic, estimate_matched_x, estimate_matched_xy
    from app.services.reports import KIND_ORDER
    from app.services.replicates import run_replicates

    if reps < 2:
        raise ConfigurationError("need >= 2 replicates")
    kind_id = KIND_ORDER.index(kind)

    def one(k: int) -> float:
        if kind is EstimatorKind.classic_did:
            return estimate_classic(simulate(params, seed, (kind_id, k))).tau_hat
        if kind is EstimatorKind.matched_x:
            panel, asg = simulate_matched(params, seed, FeatureSet.covariates_only, (kind_id, k))
            return estimate_matched_x(panel, asg).tau_hat
        panel, asg = simulate_matched(params, seed, FeatureSet.covariates_and_preoutcomes, (kind_id, k))
        return estimate_matched_xy(panel, asg).tau_hat

    values = run_replicates(one, reps, threads=threads, label=f"monte_carlo_{kind.value}").values
    mean, var = sample_mean_var(values)
    mse = math.fsum((v - params.tau) ** 2 for v in values) / reps
    log.info("monte_carlo_done", extra={"kind": kind.value, "reps": reps, "mean": mean, "variance": var})
    return MonteCarloSummary(kind=kind, reps=reps, mean=mean, variance=var, mse=mse, mc_se=math.sqrt(var / reps))
