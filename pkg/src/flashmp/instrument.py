"""Phase timers and flop counters shared by the solver stack.

Timing phases mirror the breakdown reported by the harness:
``reorder``, ``asm_comm`` and ``fast_solve`` make up preconditioner time;
``p2p``, ``spmv``, ``reduction`` and ``axpy_dot`` make up core time.
Flop counters are incremented with analytic counts (2*m*n*k per GEMM and
so on) at the call sites of the three dense kernels, which lets tests
compare an instrumented run against the analytic cost model exactly.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field

BREAKDOWN_CATEGORIES = (
    "reorder",
    "asm_comm",
    "fast_solve",
    "spmv",
    "p2p",
    "reduction",
    "axpy_dot",
)


class PhaseTimer:
    """Accumulates wall-clock seconds per breakdown category."""

    def __init__(self):
        self.seconds = {cat: 0.0 for cat in BREAKDOWN_CATEGORIES}

    @contextmanager
    def phase(self, category: str):
        if category not in self.seconds:
            raise KeyError(f"unknown timing category {category!r}")
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[category] += time.perf_counter() - t0

    def merge(self, other: "PhaseTimer") -> None:
        """Fold another timer's accumulated seconds into this one."""
        for cat, sec in other.seconds.items():
            self.seconds[cat] += sec


class NullTimer:
    """Timer stand-in that costs nothing."""

    @contextmanager
    def phase(self, category: str):
        yield


NULL_TIMER = NullTimer()


@dataclass
class FlopCounter:
    """Flops counted at GEMM / block-solve / GEMV call sites."""

    gemm: int = 0
    bspmv: int = 0
    gemv: int = 0

    @property
    def total(self) -> int:
        return self.gemm + self.bspmv + self.gemv

    def reset(self) -> None:
        self.gemm = self.bspmv = self.gemv = 0
