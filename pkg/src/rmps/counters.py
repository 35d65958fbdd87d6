"""Process-local call counters used to assert isolation properties in tests."""
from __future__ import annotations

from collections import Counter

_COUNTS: Counter = Counter()


def bump(name: str, amount: int = 1) -> None:
    _COUNTS[name] += amount


def value(name: str) -> int:
    return _COUNTS[name]


def reset() -> None:
    _COUNTS.clear()


def snapshot() -> dict:
    return dict(_COUNTS)
