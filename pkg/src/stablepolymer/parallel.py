"""Order-preserving replica maps over a process pool."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def _run_chunk(fn, indices):
    return [fn(i) for i in indices]


def map_replicas(fn, n: int, workers: int = 1, chunk: int | None = None) -> list:
    """``[fn(0), ..., fn(n-1)]``, optionally spread over ``workers`` processes.

    ``fn`` must be picklable when ``workers > 1``.  Each replica seeds its own
    stream, so the result does not depend on ``workers`` or ``chunk``.
    """
    if workers <= 1 or n < 2:
        return [fn(i) for i in range(n)]
    if chunk is None:
        chunk = max(1, n // (4 * workers))
    blocks = [range(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    out = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(_run_chunk, [fn] * len(blocks), blocks):
            out.extend(part)
    return out
