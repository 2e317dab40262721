"""Runtime settings read from the environment.

Env vars:
- MDID_THREADS: worker threads for replicate pools (default: 1; CLI --threads wins)
- MDID_COND_WARN: condition number above which solves log a warning (default: 1e10)
- MDID_COND_ERROR: condition number above which solves fail (default: 1e14)
"""

import os
from typing import Optional


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return float(raw)
    except ValueError:
        return default


def thread_count(override: Optional[int] = None) -> int:
    if override is not None:
        return max(1, int(override))
    raw = os.getenv("MDID_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def cond_warn() -> float:
    return _float_env("MDID_COND_WARN", 1e10)


def cond_error() -> float:
    return _float_env("MDID_COND_ERROR", 1e14)
