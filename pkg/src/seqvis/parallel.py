"""Thread-count control.

``SSV_THREADS`` caps both the worker pool used for embarrassingly parallel
work (task generation, evaluation rollouts) and the BLAS thread pool. Results
are always collected in input order, so the cap never changes outputs.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits

from .exceptions import ConfigError

ENV_VAR = "SSV_THREADS"


def max_threads():
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn, items):
    items = list(items)
    n = min(max_threads(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@contextmanager
def limited_blas():
    with threadpool_limits(limits=max_threads()):
        yield
