"""Process-pool helper with deterministic result ordering.

Jobs are pure functions of their arguments; results are returned in submission
order so the output never depends on scheduling.  Worker BLAS pools are pinned
to one thread to keep job results identical to a serial run.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def _init_worker():
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = "1"


def parallel_starmap(fn, argtuples, threads: int):
    argtuples = list(argtuples)
    if threads <= 1 or len(argtuples) <= 1:
        return [fn(*args) for args in argtuples]
    workers = min(threads, len(argtuples))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker) as pool:
        futures = [pool.submit(fn, *args) for args in argtuples]
        return [f.result() for f in futures]
