"""
Parallel Job Runner
Runs independent jobs (chains, SBC replicates, backtest fits) on a process
pool and returns results in submission order.
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


def default_workers() -> int:
    """Worker count from LOSSFLOW_WORKERS, falling back to 1."""
    raw = os.getenv('LOSSFLOW_WORKERS', '1')
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning(f"Ignoring non-integer LOSSFLOW_WORKERS={raw!r}")
        return 1


def run_jobs(
    func: Callable[..., Any],
    jobs: Sequence[Tuple[Any, ...]],
    workers: Optional[int] = None,
) -> List[Any]:
    """
    Apply ``func(*args)`` to every job.

    Results are ordered like ``jobs`` regardless of completion order, so the
    outcome does not depend on the worker count. The first job exception is
    re-raised after the pool shuts down.
    """
    workers = workers or default_workers()
    if workers <= 1 or len(jobs) <= 1:
        return [func(*args) for args in jobs]

    results: List[Any] = [None] * len(jobs)
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as executor:
        futures = {executor.submit(func, *args): index for index, args in enumerate(jobs)}
        for future in as_completed(futures):
            index = futures[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logger.error(f"Job {index} failed: {e}")
                for pending in futures:
                    pending.cancel()
                raise
    return results


def derive_seed(*keys: int) -> int:
    """Independent integer seed for a job identified by ``keys``."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])
