"""Lightweight in-process counters.

Used by tests and the CLI --dry-run contract ("dry run performs zero model
computation") to observe how many forward passes / cache recomputations
actually happened. Not a metrics system; just a Counter.
"""

from collections import Counter

counters: Counter = Counter()


def count(name: str, n: int = 1) -> None:
    counters[name] += n


def reset() -> None:
    counters.clear()


def total_forward_calls() -> int:
    return sum(v for k, v in counters.items() if k.startswith("forward."))
