"""Process-wide worker cap.

Parallel sections split work into fixed-size chunks whose results are merged
in a fixed order, so the cap changes wall time only, never results.
"""

from __future__ import annotations

import os
import threading

_lock = threading.Lock()
_threads: int | None = None


def set_threads(n: int | None) -> None:
    """Cap worker threads (``None`` restores the default of 1)."""
    global _threads
    if n is not None and int(n) < 1:
        raise ValueError("thread count must be >= 1")
    with _lock:
        _threads = None if n is None else int(n)


def effective_threads(n: int | None = None) -> int:
    if n is not None:
        return max(1, int(n))
    with _lock:
        if _threads is not None:
            return _threads
    return 1


def cpu_count() -> int:
    return os.cpu_count() or 1
