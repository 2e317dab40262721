"""Shared JSON report schema.

Oracle, plug-in and decision reports all serialize through these
pydantic models; `SCHEMA_VERSION` is stamped on every top-level report.
"""

from enum import Enum
from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict


SCHEMA_VERSION = "1.0"


class EstimatorKind(str, Enum):
    classic_did = "classic_did"
    matched_x = "matched_x"
    matched_x_y = "matched_x_y"


KIND_ORDER = (EstimatorKind.classic_did, EstimatorKind.matched_x, EstimatorKind.matched_x_y)

# Column headings used by the table renderers.
KIND_LABELS: Dict[EstimatorKind, str] = {
    EstimatorKind.classic_did: "No Match",
    EstimatorKind.matched_x: "Match on X",
    EstimatorKind.matched_x_y: "Match on X and Y^T",
}


class EstimatorMoments(BaseModel):
    """Bias / variance / MSE of one estimator.

    var_full = size_factor * var_core and mse = bias**2 + var_full.
    """

    model_config = ConfigDict(frozen=True)

    bias: float
    var_core: float
    size_factor: float
    var_full: float
    mse: float

    @classmethod
    def compose(cls, bias: float, var_core: float, size_factor: float) -> "EstimatorMoments":
        var_full = size_factor * var_core
        return cls(bias=bias, var_core=var_core, size_factor=size_factor, var_full=var_full, mse=bias * bias + var_full)


def size_factor(kind: EstimatorKind, n1: int, n0: int, n_matched: Optional[int] = None) -> float:
    """Sample-size coefficient in front of the core variance.

    Matched estimators use 1/n1 + 1/ntilde1 where ntilde1 is the realized
    number of matched controls (n1 under drop-free 1:1 matching).
    """
    if kind is EstimatorKind.classic_did:
        return 1.0 / n1 + 1.0 / n0
    nt = n1 if n_matched is None else n_matched
    return 1.0 / n1 + 1.0 / nt
