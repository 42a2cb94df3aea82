"""Process-level runtime tuning."""

from __future__ import annotations

import logging

log = logging.getLogger(__name__)

_LIMITED = False


def limit_blas_threads(n: int = 1) -> None:
    """Pin BLAS pools to n threads (idempotent).

    The models here are small enough that GEMM thread wake-ups cost more
    than the parallelism returns; sweeps parallelize across seeds instead.
    """
    global _LIMITED
    if _LIMITED:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
        _LIMITED = True
    except Exception as exc:  # pragma: no cover - depends on environment
        log.debug("could not limit BLAS threads: %s", exc)
