"""Balanced panel container shared by every service.

PanelData holds unit-level arrays: treatment flags z (n,), outcomes y
(n, T+1) with the post period in the last column, covariates x (n, p).
Construction checks shapes and balance; the group-size convention
(n1 >= 2, n0 >= n1) is enforced where panels enter the system
(`check_group_sizes`, called by the loader and the simulator).
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core.errors import PanelValidationError


@dataclass(frozen=True, eq=False)
class PanelData:
    unit_ids: Tuple[str, ...]
    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    t_pre: int
    # Latent traits, kept for diagnostics on synthetic data only.
    theta: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        z = np.asarray(self.z).astype(np.int8).reshape(-1)
        y = np.asarray(self.y, dtype=float)
        n = z.shape[0]
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        elif x.ndim == 1:
            x = x.reshape(n, 1)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "unit_ids", tuple(str(u) for u in self.unit_ids))
        if self.t_pre < 1:
            raise PanelValidationError("need at least one pre-treatment period")
        if y.ndim != 2 or y.shape != (n, self.t_pre + 1):
            raise PanelValidationError(f"outcome matrix must be {n} x {self.t_pre + 1}, got {y.shape}")
        if x.ndim != 2 or x.shape[0] != n:
            raise PanelValidationError(f"covariate matrix must have {n} rows, got {x.shape}")
        if len(self.unit_ids) != n:
            raise PanelValidationError("unit_ids length does not match z")
        if not np.isin(z, (0, 1)).all():
            raise PanelValidationError("treatment flags must be 0/1")
        if not np.isfinite(y).all():
            raise PanelValidationError("unbalanced panel: missing or non-finite outcome cells")
        if not np.isfinite(x).all():
            raise PanelValidationError("non-finite covariate values")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PanelData):
            return NotImplemented
        return (
            self.unit_ids == other.unit_ids
            and self.t_pre == other.t_pre
            and np.array_equal(self.z, other.z)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
        )

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def treated_idx(self) -> np.ndarray:
        return np.flatnonzero(self.z == 1)

    @property
    def control_idx(self) -> np.ndarray:
        return np.flatnonzero(self.z == 0)

    def contrast(self) -> np.ndarray:
        """Y_T minus the mean of the pre-treatment outcomes, per unit."""
        return self.y[:, self.t_pre] - self.y[:, : self.t_pre].mean(axis=1)

    def take(self, indices: Sequence[int]) -> "PanelData":
        idx = np.asarray(indices, dtype=int)
        return PanelData(
            unit_ids=tuple(self.unit_ids[i] for i in idx),
            z=self.z[idx],
            y=self.y[idx],
            x=self.x[idx],
            t_pre=self.t_pre,
            theta=None if self.theta is None else self.theta[idx],
        )

    def shifted(self, offsets: Sequence[float]) -> "PanelData":
        """Add a per-period constant to every unit's outcomes."""
        off = np.asarray(offsets, dtype=float).reshape(1, -1)
        return PanelData(self.unit_ids, self.z, self.y + off, self.x, self.t_pre, self.theta)


def check_group_sizes(panel: PanelData) -> None:
    if panel.n1 < 2:
        raise PanelValidationError(f"need at least 2 treated units, got {panel.n1}")
    if panel.n0 < panel.n1:
        raise PanelValidationError(f"need n0 >= n1, got n0={panel.n0} n1={panel.n1}")
