import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Generic, List, Optional, TypeVar

from app.core.errors import MdidError, ReplicateError
from app.core.settings import thread_count


T = TypeVar("T")

log = logging.getLogger(__name__)


@dataclass
class ReplicateBatch(Generic[T]):
    # Successful results in replicate order; indices of skipped replicates in `failed`.
    values: List[T] = field(default_factory=list)
    failed: List[int] = field(default_factory=list)


def run_replicates(
    fn: Callable[[int], T],
    reps: int,
    threads: Optional[int] = None,
    label: str = "replicates",
    max_failures: int = 0,
) -> ReplicateBatch[T]:
    """Evaluate fn(0..reps-1) on a thread pool and collect results in index order.

    Each replicate derives its randomness from its own index, so the
    output does not depend on the worker count. Up to `max_failures`
    replicates may raise; they are skipped and reported. One more
    failure aborts the batch with ReplicateError.
    """
    workers = min(thread_count(threads), max(1, reps))
    log.debug("replicates_start", extra={"label": label, "reps": reps, "threads": workers})

    def guarded(i: int):
        try:
            return i, fn(i), None
        except (MdidError, ArithmeticError, ValueError, FloatingPointError) as e:
            return i, None, e

    if workers == 1:
        results = [guarded(i) for i in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(guarded, range(reps)))

    batch: ReplicateBatch[T] = ReplicateBatch()
    for i, out, err in results:
        if err is None:
            batch.values.append(out)
            continue
        batch.failed.append(i)
        if len(batch.failed) > max_failures:
            log.error("replicates_failed", extra={"label": label, "replicate": i, "error": str(err)})
            raise ReplicateError(str(err), replicate=i) from err
    if batch.failed:
        log.warning("replicates_skipped", extra={"label": label, "skipped": len(batch.failed), "reps": reps})
    log.debug("replicates_done", extra={"label": label, "completed": len(batch.values)})
    return batch
