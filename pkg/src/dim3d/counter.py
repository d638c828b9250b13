"""Runtime floating-point operation counter.

Operations report what they actually executed, derived from the shapes
they see at runtime.  Counting is off unless a :func:`counting` block is
active on the current thread.
"""
from __future__ import annotations

import contextlib
import threading
from collections import Counter

_local = threading.local()


def add(kind: str, flops: int) -> None:
    active = getattr(_local, "active", None)
    if active is not None:
        active[kind] += int(flops)


@contextlib.contextmanager
def counting():
    """Collect per-kind FLOP counts into the yielded ``Counter``."""
    prev = getattr(_local, "active", None)
    tally: Counter = Counter()
    _local.active = tally
    try:
        yield tally
    finally:
        _local.active = prev
