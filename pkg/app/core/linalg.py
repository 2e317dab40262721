"""Guarded factorizations and solves.

Every linear solve in the oracle and plug-in layers goes through
`guarded_solve`, which checks the condition number against the
MDID_COND_WARN / MDID_COND_ERROR thresholds before solving.
"""

import logging
from typing import Optional

import numpy as np
import scipy.linalg

from app.core.errors import NumericalError, ParameterError
from app.core import settings


log = logging.getLogger(__name__)

PSD_TOL = 1e-10


def condition_number(a: np.ndarray) -> float:
    if a.size == 0:
        return 1.0
    with np.errstate(all="ignore"):
        c = float(np.linalg.cond(a))
    return c if np.isfinite(c) else float("inf")


def guarded_solve(a: np.ndarray, b: np.ndarray, label: str) -> np.ndarray:
    """Solve a x = b for symmetric a, refusing ill-conditioned systems."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] == 0:
        return np.zeros((0,) + b.shape[1:])
    cond = condition_number(a)
    if cond > settings.cond_error():
        raise NumericalError(f"singular system in {label}", condition_number=cond)
    if cond > settings.cond_warn():
        log.warning("ill_conditioned_solve", extra={"label": label, "condition_number": cond})
    try:
        return scipy.linalg.solve(a, b, assume_a="sym")
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"solve failed in {label}: {e}", condition_number=cond) from e


def psd_factor(cov: np.ndarray, label: str = "joint covariance") -> np.ndarray:
    """Return L with L @ L.T == cov.

    Cholesky first; semidefinite matrices fall back to an eigen factor.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.shape[0] == 0:
        return np.zeros((0, 0))
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ParameterError(f"{label} not symmetric")
    try:
        return scipy.linalg.cholesky(cov, lower=True)
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(cov)
    if w.min() < -PSD_TOL * max(1.0, float(np.abs(w).max())):
        raise ParameterError(f"{label} not PSD")
    return v * np.sqrt(np.clip(w, 0.0, None))


def is_psd(cov: np.ndarray) -> bool:
    try:
        psd_factor(cov)
        return True
    except ParameterError:
        return False


def is_pd(cov: np.ndarray) -> bool:
    cov = np.asarray(cov, dtype=float)
    if cov.shape[0] == 0:
        return True
    if not np.allclose(cov, cov.T, atol=1e-12):
        return False
    try:
        scipy.linalg.cholesky(cov, lower=True)
        return True
    except np.linalg.LinAlgError:
        return False


def sym_sqrt(a: np.ndarray, floor: Optional[float] = 0.0) -> np.ndarray:
    """Symmetric square root of a PSD matrix."""
    w, v = np.linalg.eigh(np.asarray(a, dtype=float))
    if floor is not None:
        w = np.clip(w, floor, None)
    return (v * np.sqrt(w)) @ v.T
