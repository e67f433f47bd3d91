"""Selection of the inner-loop backend.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. Setting ``TIMEBLOCKS_BACKEND=python`` forces the
fallback, which is how the benchmark and the cross-backend tests run it.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_requested = os.environ.get("TIMEBLOCKS_BACKEND", "").strip().lower()
if _requested in _BACKENDS:
    ACTIVE = _requested
else:
    ACTIVE = "compiled" if _ckernels is not None else "python"

_threads = 1
# Below this many rows a thread pool costs more than it saves.
_PARALLEL_MIN_ROWS = 4096


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global ACTIVE
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    ACTIVE = name


def set_threads(n):
    """Number of worker threads used for large row batches (1 = sequential)."""
    global _threads
    if n < 1:
        raise ValueError("thread count must be at least 1")
    _threads = int(n)


def get_threads():
    return _threads


def _run_rows(func, n_rows, args, threads):
    if threads <= 1 or n_rows < _PARALLEL_MIN_ROWS:
        func(*args, 0, n_rows)
        return
    bounds = np.linspace(0, n_rows, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        jobs = [pool.submit(func, *args, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        for job in jobs:
            job.result()


def min_expectation(values, probs, *, backend=None, threads=None):
    """Return ``(min_u E_p[values[:, u, :]], argmin)`` row by row.

    ``values`` has shape ``(rows, controls, outcomes)`` and ``probs`` has
    shape ``(rows, outcomes)``. Zero-probability outcomes never contribute,
    so an infinite value there is ignored.
    """
    impl = _BACKENDS[backend or ACTIVE]
    values = np.ascontiguousarray(values, dtype=np.float64)
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    n = values.shape[0]
    if probs.shape != (n, values.shape[2]):
        raise ValueError(f"probability table shape {probs.shape} does not match values {values.shape}")
    out_value = np.empty(n)
    out_arg = np.empty(n, dtype=np.int64)
    if values.shape[1] == 0:
        raise ValueError("empty control axis")
    _run_rows(impl.min_expectation, n, (values, probs, out_value, out_arg), threads or _threads)
    return out_value, out_arg


def min_last_axis(values, *, backend=None, threads=None):
    impl = _BACKENDS[backend or ACTIVE]
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = values.shape[0]
    out_value = np.empty(n)
    out_arg = np.empty(n, dtype=np.int64)
    _run_rows(impl.min_last_axis, n, (values, out_value, out_arg), threads or _threads)
    return out_value, out_arg
