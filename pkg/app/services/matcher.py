"""1:1 treated-to-control matching without replacement.

`match` is the default greedy matcher: treated units in ascending panel
order each take the nearest still-unmatched control (Euclidean distance
on optionally standardized features; ties go to the lowest control
index). `optimal_match` solves the full assignment problem and serves as
a quality ceiling. Both report the mean distance (Delta_n) and mean
squared distance (Xi_n) over matched pairs.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.optimize import linear_sum_assignment
from scipy.spatial import distance

from app.core.errors import ConfigurationError, MatchingError
from app.services.panel import PanelData


log = logging.getLogger(__name__)

# Above this many treated x control cells, greedy matching computes rows on demand.
DENSE_CELLS = 25_000_000
VERY_LARGE_NUMBER = 1e100


class FeatureSet(str, Enum):
    covariates_only = "covariates_only"
    covariates_and_preoutcomes = "covariates_and_preoutcomes"


class MatchMethod(str, Enum):
    exact = "exact"
    nearest_neighbor = "nearest_neighbor"
    caliper = "caliper"


class MatchSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    features: FeatureSet = FeatureSet.covariates_only
    method: MatchMethod = MatchMethod.nearest_neighbor
    caliper_width: Optional[float] = None
    standardize: bool = True

    @model_validator(mode="after")
    def _check_caliper(self) -> "MatchSpec":
        if self.method is MatchMethod.caliper and (self.caliper_width is None or self.caliper_width <= 0):
            raise ValueError("caliper width must be positive")
        return self


@dataclass(frozen=True)
class MatchAssignment:
    """Matched pairs as panel row indices, sorted by treated index."""

    pairs: np.ndarray
    distances: np.ndarray
    m_flags: np.ndarray
    delta_n: float
    xi_n: float
    features: FeatureSet
    n1: int
    unmatched_treated: List[int] = field(default_factory=list)

    @property
    def n_matched(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def total_distance(self) -> float:
        return math.fsum(self.distances.tolist())

    @property
    def treated_rows(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def control_rows(self) -> np.ndarray:
        return self.pairs[:, 1]

    def to_frame(self, panel: PanelData) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "treated_id": [panel.unit_ids[i] for i in self.treated_rows],
                "control_id": [panel.unit_ids[j] for j in self.control_rows],
                "distance": self.distances,
            }
        )


class DiscrepancyReport(BaseModel):
    delta_n: float
    xi_n: float
    delta_scaled: float
    xi_scaled: float
    empty: bool = False


def feature_matrix(panel: PanelData, features: FeatureSet, standardize: bool) -> np.ndarray:
    if features is FeatureSet.covariates_only:
        w = panel.x
    else:
        w = np.hstack([panel.x, panel.y[:, : panel.t_pre]])
    if w.shape[1] == 0:
        raise MatchingError("feature set is empty: panel has no covariates")
    if standardize:
        sd = w.std(axis=0)
        sd[sd == 0] = 1.0
        w = (w - w.mean(axis=0)) / sd
    return w


def assignment_from_pairs(
    panel: PanelData,
    pairs: np.ndarray,
    distances: np.ndarray,
    features: FeatureSet,
    unmatched_treated: Sequence[int],
) -> MatchAssignment:
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    distances = np.asarray(distances, dtype=float).reshape(-1)
    order = np.argsort(pairs[:, 0], kind="stable")
    pairs, distances = pairs[order], distances[order]
    if np.unique(pairs[:, 1]).shape[0] != pairs.shape[0]:
        raise MatchingError("control unit matched more than once")
    flags = np.zeros(panel.n, dtype=np.int8)
    flags[pairs[:, 1]] = 1
    k = pairs.shape[0]
    delta_n = math.fsum(distances.tolist()) / k if k else 0.0
    xi_n = math.fsum((distances ** 2).tolist()) / k if k else 0.0
    return MatchAssignment(
        pairs=pairs,
        distances=distances,
        m_flags=flags,
        delta_n=delta_n,
        xi_n=xi_n,
        features=features,
        n1=panel.n1,
        unmatched_treated=sorted(int(i) for i in unmatched_treated),
    )


def _check_sizes(panel: PanelData, spec: MatchSpec) -> None:
    if spec.method is not MatchMethod.caliper and panel.n0 < panel.n1:
        raise MatchingError(f"insufficient controls: n0={panel.n0} < n1={panel.n1}")


def match(panel: PanelData, spec: MatchSpec) -> MatchAssignment:
    """Greedy sequential nearest-neighbour matching without replacement."""
    _check_sizes(panel, spec)
    w = feature_matrix(panel, spec.features, spec.standardize)
    treated, controls = panel.treated_idx, panel.control_idx
    wt, wc = w[treated], w[controls]
    dense = distance.cdist(wt, wc) if treated.size * controls.size <= DENSE_CELLS else None

    available = np.ones(controls.shape[0], dtype=bool)
    pairs: List[tuple] = []
    dists: List[float] = []
    unmatched: List[int] = []
    for k, ti in enumerate(treated):
        if not available.any():
            unmatched.append(int(ti))
            continue
        row = dense[k] if dense is not None else distance.cdist(wt[k : k + 1], wc)[0]
        row = np.where(available, row, np.inf)
        j = int(np.argmin(row))
        d = float(row[j])
        if spec.method is MatchMethod.exact and d > 0:
            raise MatchingError(f"no exact match for treated unit {panel.unit_ids[ti]}")
        if spec.method is MatchMethod.caliper and d > spec.caliper_width:
            unmatched.append(int(ti))
            continue
        available[j] = False
        pairs.append((int(ti), int(controls[j])))
        dists.append(d)

    a = assignment_from_pairs(panel, np.array(pairs, dtype=int), np.array(dists), spec.features, unmatched)
    _log_assignment("greedy", a)
    return a


def optimal_match(panel: PanelData, spec: MatchSpec) -> MatchAssignment:
    """Minimum-total-distance injective assignment."""
    if spec.method is MatchMethod.exact:
        raise ConfigurationError("optimal matching supports nearest_neighbor or caliper specs")
    _check_sizes(panel, spec)
    w = feature_matrix(panel, spec.features, spec.standardize)
    treated, controls = panel.treated_idx, panel.control_idx
    dm = distance.cdist(w[treated], w[controls])
    cost = dm.copy()
    if spec.method is MatchMethod.caliper:
        cost[cost > spec.caliper_width] = VERY_LARGE_NUMBER
    rows, cols = linear_sum_assignment(cost)
    keep = dm[rows, cols] <= (spec.caliper_width if spec.method is MatchMethod.caliper else np.inf)
    rows, cols = rows[keep], cols[keep]
    matched = set(rows.tolist())
    unmatched = [int(treated[k]) for k in range(treated.shape[0]) if k not in matched]
    pairs = np.column_stack([treated[rows], controls[cols]])
    a = assignment_from_pairs(panel, pairs, dm[rows, cols], spec.features, unmatched)
    _log_assignment("optimal", a)
    return a


def _log_assignment(mode: str, a: MatchAssignment) -> None:
    log.debug(
        "match_done",
        extra={"mode": mode, "pairs": a.n_matched, "unmatched": len(a.unmatched_treated), "delta_n": a.delta_n},
    )
    if a.unmatched_treated:
        log.warning(
            "match_dropped_treated",
            extra={"mode": mode, "dropped": len(a.unmatched_treated), "n1": a.n1},
        )


def discrepancy_report(a: MatchAssignment, n: int) -> DiscrepancyReport:
    """Discrepancies with their sqrt(n) and n scalings for rate checks."""
    if a.n_matched == 0:
        log.warning("discrepancy_empty_assignment")
        return DiscrepancyReport(delta_n=0.0, xi_n=0.0, delta_scaled=0.0, xi_scaled=0.0, empty=True)
    return DiscrepancyReport(
        delta_n=a.delta_n,
        xi_n=a.xi_n,
        delta_scaled=a.delta_n * math.sqrt(n),
        xi_scaled=a.xi_n * n,
    )
