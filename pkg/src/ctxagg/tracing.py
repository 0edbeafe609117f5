"""Runtime multiply-accumulate tracing, used to cross-check analytical counts."""

from __future__ import annotations

import contextlib


class MacCounter:
    """Accumulates multiply-accumulate counts from ops run while active."""

    def __init__(self):
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, op: str, n: int):
        self.total += int(n)
        self.by_op[op] = self.by_op.get(op, 0) + int(n)


_counters: list[MacCounter] = []


@contextlib.contextmanager
def trace_macs():
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def record(op: str, n: int):
    for c in _counters:
        c.add(op, n)
