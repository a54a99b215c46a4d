"""Counter-based random streams and worker-pool sizing.

Every stream is a ``SeedSequence`` keyed by ``(root seed, *key)``, so a
stream's values depend only on its key and never on the order in which
other streams are created or consumed.
"""

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "GAUSSFLOW_THREADS"


def _entropy(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed.entropy, tuple(seed.spawn_key)
    seed = int(seed)
    if seed < 0:
        raise ValueError("seeds must be non-negative integers")
    return seed, ()


def derive(seed, *key):
    """SeedSequence for the stream ``key`` under ``seed`` (an integer or a
    SeedSequence whose own key is extended)."""
    entropy, base = _entropy(seed)
    return np.random.SeedSequence(entropy, spawn_key=base + tuple(int(k) for k in key))


def generator(seed, *key):
    return np.random.Generator(np.random.PCG64(derive(seed, *key)))


def particle_generators(seed, n, *key):
    """One independent generator per particle index."""
    return [generator(seed, *key, i) for i in range(n)]


def thread_count():
    """Worker threads: ``GAUSSFLOW_THREADS`` if set, else the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


def map_ordered(fn, items, threads=None):
    """``[fn(x) for x in items]``, possibly on a thread pool; results keep
    input order."""
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
