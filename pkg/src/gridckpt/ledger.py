"""Exact accounting of live activation bytes with a running peak.

The ledger counts logical bytes of buffers an engine retains, not resident
machine memory, so assertions about peaks can be tight and free of
allocator noise. Charges are grouped under a fixed set of tags. One ledger
belongs to one run; it is never shared across threads.

Accounting rules used by every engine in this package:
  * a buffer is charged when the engine retains it past the step/chunk that
    produced it, and released when consumed;
  * buffers handed to the caller (model outputs, gradient bundles) and
    caller-owned inputs that are only read (loss gradients) are not charged;
  * the input sequence is charged (tag io) because every strategy retains
    it for the backward pass;
  * parameters, parameter gradients and optimizer state are out of scope.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

TAGS = ("l_ckpt", "s_ckpt", "cell_cache", "frontier", "io", "full_cache")


class LedgerError(RuntimeError):
    """Accounting corruption, e.g. releasing more than was charged."""


class BudgetExceededError(LedgerError):
    """Live bytes crossed the configured budget; the run must be abandoned."""


class ActivationLedger:
    """Charge/release bookkeeping in whole bytes, with per-tag subtotals."""

    def __init__(self, budget_units: int | None = None, auto_audit: bool = False):
        self.subtotals: dict[str, int] = {tag: 0 for tag in TAGS}
        self.live_units = 0
        self.peak_units = 0
        self.baseline_units = 0
        self.budget_units = budget_units
        self.auto_audit = auto_audit

    def charge(self, tag: str, units: int) -> None:
        if tag not in self.subtotals:
            raise LedgerError(f"unknown tag {tag!r}")
        if units < 0:
            raise LedgerError("charge must be >= 0")
        self.subtotals[tag] += units
        self.live_units += units
        if self.live_units > self.peak_units:
            self.peak_units = self.live_units
        if self.auto_audit:
            self.audit()
        if self.budget_units is not None and self.live_units > self.budget_units:
            raise BudgetExceededError(
                f"live {self.live_units} exceeds budget {self.budget_units}"
            )

    def release(self, tag: str, units: int) -> None:
        if tag not in self.subtotals:
            raise LedgerError(f"unknown tag {tag!r}")
        if units < 0:
            raise LedgerError("release must be >= 0")
        if units > self.subtotals[tag]:
            raise LedgerError(
                f"over-release on {tag!r}: {units} > {self.subtotals[tag]}"
            )
        self.subtotals[tag] -= units
        self.live_units -= units
        if self.auto_audit:
            self.audit()

    def audit(self) -> None:
        total = sum(self.subtotals.values())
        if total != self.live_units:
            raise LedgerError(f"conservation violated: {total} != {self.live_units}")


@dataclass
class MeasureResult:
    baseline_units: int
    peak_units: int
    overhead_units: int
    leak: bool
    value: object = None


def measure(ledger: ActivationLedger, run: Callable[[], object]) -> MeasureResult:
    """Two-step measurement: snapshot a baseline, run, report peak - baseline.

    The overhead is the sequence-dependent quantity a planner predicts. A
    leak (live bytes not returning to the baseline) is flagged, not raised.
    """
    ledger.baseline_units = ledger.live_units
    ledger.peak_units = ledger.live_units
    value = run()
    return MeasureResult(
        baseline_units=ledger.baseline_units,
        peak_units=ledger.peak_units,
        overhead_units=ledger.peak_units - ledger.baseline_units,
        leak=ledger.live_units != ledger.baseline_units,
        value=value,
    )


@dataclass
class StepEvalCounter:
    """Exact counts of per-(layer, step) forward evaluations in a run."""

    forward_evals: int = 0
    recompute_evals: int = 0

    @property
    def total(self) -> int:
        return self.forward_evals + self.recompute_evals


@dataclass
class RunClock:
    """Monotonic wall-clock window around forward+backward only."""

    start: float = 0.0
    elapsed_ms: float = 0.0

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed_ms = (time.perf_counter() - self.start) * 1e3
        return False
