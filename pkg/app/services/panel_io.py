"""CSV panels and JSON configuration files.

Panels are stored long: one row per (unit_id, time) with columns
unit_id, time, z, y, x1..xp. Covariates and z must be constant within a
unit. Row numbers in errors are file line numbers (header is line 1).
"""

import json
import logging
import re
from pathlib import Path
from typing import List, Optional, Type, TypeVar, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from app.core.errors import ConfigurationError, PanelFormatError, PanelValidationError
from app.services.decision import GuidelineConfig
from app.services.matcher import MatchAssignment, MatchSpec
from app.services.panel import PanelData, check_group_sizes
from app.services.reports import SCHEMA_VERSION
from app.services.sem_dgp import DgpParams


log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("unit_id", "time", "z", "y")
FLOAT_FORMAT = "%.17g"
HEADER_LINES = 1
_X_COLUMN = re.compile(r"^x(\d+)$")

M = TypeVar("M", bound=BaseModel)
PathLike = Union[str, Path]


class VerifyConfig(BaseModel):
    reps: int = 10_000
    var_rel_tol: float = 0.05
    bias_se_mult: float = 3.0


class RunConfig(BaseModel):
    """Bundle of the parameter blocks a `decide` or `verify` run needs."""

    schema_version: str = SCHEMA_VERSION
    # Relative paths resolve against the config file's directory.
    params_file: Optional[Path] = None
    panel_file: Optional[Path] = None
    match_spec: MatchSpec = MatchSpec()
    guideline: GuidelineConfig = GuidelineConfig()
    verify: VerifyConfig = VerifyConfig()
    seed: int = 0
    out: Optional[Path] = None


def _line(pos: int) -> int:
    return pos + HEADER_LINES + 1


def _covariate_columns(columns: List[str]) -> List[str]:
    found = sorted((int(m.group(1)), c) for c in columns if (m := _X_COLUMN.match(c)))
    expected = list(range(1, len(found) + 1))
    if [i for i, _ in found] != expected:
        raise PanelFormatError(f"covariate columns must be x1..x{len(found)}, got {[c for _, c in found]}")
    return [c for _, c in found]


def _numeric(df: pd.DataFrame, col: str, integer: bool = False) -> pd.Series:
    values = pd.to_numeric(df[col], errors="coerce")
    bad = values.isna() | ~np.isfinite(values.astype(float))
    if integer:
        bad |= values.notna() & (values != values.round())
    if bad.any():
        pos = int(np.flatnonzero(bad.to_numpy())[0])
        kind = "an integer" if integer else "a finite number"
        raise PanelFormatError(f"{col} is not {kind}: {df[col].iloc[pos]!r}", row=_line(pos))
    return values.astype(int) if integer else values.astype(float)


def load_panel(path: PathLike) -> PanelData:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigurationError(f"panel file not found: {path}") from e
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise PanelFormatError(f"unreadable CSV: {e}") from e

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise PanelFormatError(f"missing column(s): {', '.join(missing)}")
    xcols = _covariate_columns(list(df.columns))
    if df.empty:
        raise PanelFormatError("panel has no rows")

    empty_id = (df["unit_id"].str.strip() == "").to_numpy()
    if empty_id.any():
        raise PanelFormatError("empty unit_id", row=_line(int(np.flatnonzero(empty_id)[0])))
    time = _numeric(df, "time", integer=True)
    if (time < 0).any():
        raise PanelFormatError("time must be >= 0", row=_line(int(np.flatnonzero((time < 0).to_numpy())[0])))
    z = _numeric(df, "z", integer=True)
    if not z.isin((0, 1)).all():
        raise PanelFormatError("z must be 0 or 1", row=_line(int(np.flatnonzero((~z.isin((0, 1))).to_numpy())[0])))
    y = _numeric(df, "y")
    x = pd.DataFrame({c: _numeric(df, c) for c in xcols}, index=df.index)

    data = pd.concat([df["unit_id"], time.rename("time"), z.rename("z"), y.rename("y"), x], axis=1)
    dup = data.duplicated(["unit_id", "time"]).to_numpy()
    if dup.any():
        pos = int(np.flatnonzero(dup)[0])
        raise PanelFormatError(
            f"duplicate (unit_id, time) = ({data['unit_id'].iloc[pos]}, {data['time'].iloc[pos]})", row=_line(pos)
        )

    for col in ["z"] + xcols:
        first = data.groupby("unit_id", sort=False)[col].transform("first")
        varies = (data[col] != first).to_numpy()
        if varies.any():
            pos = int(np.flatnonzero(varies)[0])
            raise PanelFormatError(f"{col} varies within unit {data['unit_id'].iloc[pos]}", row=_line(pos))

    t_pre = int(data["time"].max())
    if t_pre < 1:
        raise PanelValidationError("panel needs at least two periods (time 0..T with T >= 1)")
    units = list(pd.unique(data["unit_id"]))
    wide = data.pivot(index="unit_id", columns="time", values="y").reindex(index=units, columns=range(t_pre + 1))
    holes = wide.isna().to_numpy()
    if holes.any():
        i, t = np.argwhere(holes)[0]
        raise PanelValidationError(f"unbalanced panel: unit {units[i]} missing t={t} (a balanced panel is required)")

    per_unit = data.groupby("unit_id", sort=False).first().reindex(units)
    panel = PanelData(
        unit_ids=tuple(units),
        z=per_unit["z"].to_numpy(),
        y=wide.to_numpy(dtype=float),
        x=per_unit[xcols].to_numpy(dtype=float) if xcols else np.zeros((len(units), 0)),
        t_pre=t_pre,
    )
    check_group_sizes(panel)
    log.info(
        "panel_loaded",
        extra={"path": str(path), "n": panel.n, "n1": panel.n1, "n0": panel.n0, "t_pre": t_pre, "p": panel.p},
    )
    return panel


def panel_frame(panel: PanelData) -> pd.DataFrame:
    periods = panel.t_pre + 1
    frame = pd.DataFrame(
        {
            "unit_id": np.repeat(np.array(panel.unit_ids, dtype=object), periods),
            "time": np.tile(np.arange(periods), panel.n),
            "z": np.repeat(panel.z.astype(int), periods),
            "y": panel.y.reshape(-1),
        }
    )
    for j in range(panel.p):
        frame[f"x{j + 1}"] = np.repeat(panel.x[:, j], periods)
    return frame


def write_panel(panel: PanelData, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panel_frame(panel).to_csv(path, index=False, float_format=FLOAT_FORMAT, encoding="utf-8", lineterminator="\n")
    log.info("panel_written", extra={"path": str(path), "n": panel.n, "t_pre": panel.t_pre})
    return path


def write_assignment(assignment: MatchAssignment, panel: PanelData, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    assignment.to_frame(panel).to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def load_model(path: PathLike, model: Type[M]) -> M:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except FileNotFoundError as e:
        raise ConfigurationError(f"file not found: {path}") from e
    try:
        return model.model_validate_json(raw)
    except ValidationError as e:
        raise ConfigurationError(f"{path}: invalid {model.__name__}: {e.errors()[0]['msg']}") from e


def save_model(obj: BaseModel, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(obj.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_params(path: PathLike) -> DgpParams:
    return load_model(path, DgpParams)


def _check_schema(version: str) -> None:
    if version.split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise ConfigurationError(f"incompatible schema_version {version}, expected {SCHEMA_VERSION}")


def load_run_config(path: PathLike) -> RunConfig:
    """Load a RunConfig and resolve its file references."""
    path = Path(path)
    cfg = load_model(path, RunConfig)
    _check_schema(cfg.schema_version)
    base = path.parent
    updates = {}
    for field in ("params_file", "panel_file"):
        ref = getattr(cfg, field)
        if ref is None:
            continue
        resolved = ref if ref.is_absolute() else base / ref
        if not resolved.exists():
            raise ConfigurationError(f"{field} does not exist: {resolved}")
        updates[field] = resolved
    return cfg.model_copy(update=updates)


def write_json(obj, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    return path
