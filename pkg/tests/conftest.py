from pathlib import Path
from typing import Optional

import numpy as np
import pytest

from app.services.panel import PanelData
from app.services.sem_dgp import CanonicalParams, DgpParams


DATA_DIR = Path(__file__).parent / "data"


def canonical(
    d_theta: float = 0.5,
    d_x: float = 0.3,
    rho: float = 0.0,
    n_units: int = 200,
    n_treated: Optional[int] = 100,
    **kw,
) -> CanonicalParams:
    """Two-period model with beta_theta = (1, 1 + d_theta), beta_x = (0, d_x)."""
    return CanonicalParams(
        beta_theta=(1.0, 1.0 + d_theta),
        beta_x=(0.0, d_x),
        rho=rho,
        n_units=n_units,
        n_treated=n_treated,
        **kw,
    )


def random_dgp(rng: np.random.Generator, q: int, p: int, t_pre: int, n_units: int = 400, **kw) -> DgpParams:
    """Admissible random parameters: Wishart-style joint covariance, normal coefficients."""
    k = q + p
    a = rng.normal(size=(k, k + 2))
    joint = a @ a.T / (k + 2) + 0.2 * np.eye(k)
    return DgpParams.from_arrays(
        n_units=n_units,
        p_treated=0.5,
        beta0=rng.normal(size=t_pre + 1),
        beta_theta=rng.normal(size=(t_pre + 1, q)),
        beta_x=rng.normal(size=(t_pre + 1, p)),
        mu_theta=rng.normal(scale=0.5, size=(2, q)),
        mu_x=rng.normal(scale=0.5, size=(2, p)),
        sigma_theta_theta=joint[:q, :q],
        sigma_xx=joint[q:, q:],
        sigma_theta_x=joint[:q, q:],
        sigma_e2=float(rng.uniform(0.5, 1.5)),
        **kw,
    )


def make_panel(y, z, x=None, ids=None) -> PanelData:
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    return PanelData(
        unit_ids=tuple(ids or (f"u{i}" for i in range(n))),
        z=np.asarray(z),
        y=y,
        x=np.zeros((n, 0)) if x is None else np.asarray(x, dtype=float),
        t_pre=y.shape[1] - 1,
    )


@pytest.fixture
def hand_panel() -> PanelData:
    """Treated (1,3), (2,5); controls (0,1), (1,2)."""
    return make_panel(
        y=[[1, 3], [2, 5], [0, 1], [1, 2]],
        z=[1, 1, 0, 0],
        x=[[0.5], [1.0], [0.4], [1.2]],
    )


@pytest.fixture
def golden_panel_path() -> Path:
    return DATA_DIR / "golden_4unit.csv"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)
