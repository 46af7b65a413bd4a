"""Headstage ADC scheduler: clock plan, downsampling factors and round gating."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .signal_core import NeuralTrace, resample_trace, stack_channels

DEFAULT_FACTORS = (1, 2, 3, 4, 5, 6, 8, 10)


class TargetRateExceedsMax(ValueError):
    """Requested rate is above R_max, so not even factor 1 satisfies it."""


@dataclass(frozen=True)
class ClockPlan:
    """Master clock and per-round command schedule of the ADC interface."""

    f_clk_hz: float
    n_total: int
    n_sampling: int

    def __post_init__(self):
        if not self.f_clk_hz > 0:
            raise ValueError("f_clk_hz must be positive")
        if self.n_total <= 0 or self.n_sampling <= 0:
            raise ValueError("cycle counts must be positive")
        if self.n_sampling > self.n_total:
            raise ValueError("n_sampling cannot exceed n_total")

    @property
    def r_max_hz(self) -> float:
        return compute_r_max(self)

    @property
    def round_period_s(self) -> float:
        return 1.0 / self.r_max_hz


# 24 MHz, one sampling command per 800-cycle round: 30 kS/s per electrode.
DEFAULT_PLAN = ClockPlan(f_clk_hz=24e6, n_total=800, n_sampling=1)


@dataclass(frozen=True)
class FactorSet:
    factors: tuple[int, ...] = DEFAULT_FACTORS

    def __post_init__(self):
        f = tuple(int(x) for x in self.factors)
        object.__setattr__(self, "factors", f)
        if not f:
            raise ValueError("factor set is empty")
        if list(f) != sorted(set(f)):
            raise ValueError("factors must be strictly ascending")
        if f[0] != 1 or any(x <= 0 for x in f):
            raise ValueError("factors must be positive and include 1")

    def __contains__(self, x) -> bool:
        return x in self.factors

    def __iter__(self):
        return iter(self.factors)

    def __len__(self):
        return len(self.factors)


@dataclass(frozen=True)
class ElectrodeSchedule:
    electrode_id: int
    target_rate_hz: float
    factor: int
    realized_rate_hz: float
    threshold_uv: float
    flagged: bool = False

    @classmethod
    def build(cls, electrode_id: int, target_rate_hz: float, threshold_uv: float,
              plan: ClockPlan, factors: FactorSet = FactorSet(), flagged: bool = False):
        x = select_factor(target_rate_hz, plan.r_max_hz, factors)
        return cls(electrode_id, target_rate_hz, x, plan.r_max_hz / x, threshold_uv, flagged)

    def validate(self, plan: ClockPlan, factors: FactorSet = FactorSet()) -> None:
        if self.factor not in factors:
            raise ValueError(f"factor {self.factor} not supported")
        if not math.isclose(self.realized_rate_hz, plan.r_max_hz / self.factor, rel_tol=1e-12):
            raise ValueError("realized rate does not equal r_max / factor")
        if self.realized_rate_hz < self.target_rate_hz * (1 - 1e-12):
            raise ValueError("realized rate undershoots the target")


@dataclass(frozen=True)
class AcquisitionCost:
    """Executed and skipped sampling commands per channel over ``total_rounds``."""

    channel_ids: tuple[int, ...]
    factors: tuple[int, ...]
    executed: tuple[int, ...]
    skipped: tuple[int, ...]
    total_rounds: int

    def __post_init__(self):
        for e, s in zip(self.executed, self.skipped):
            if e + s != self.total_rounds:
                raise ValueError("executed + skipped must equal total rounds")

    @property
    def total_executed(self) -> int:
        return sum(self.executed)

    @property
    def total_skipped(self) -> int:
        return sum(self.skipped)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel_id", "factor", "executed", "skipped"])
            for row in zip(self.channel_ids, self.factors, self.executed, self.skipped):
                w.writerow(row)
        return path


def compute_r_max(plan: ClockPlan) -> float:
    return plan.n_sampling * plan.f_clk_hz / plan.n_total


def select_factor(target_rate_hz: float, r_max_hz: float, factors: FactorSet = FactorSet()) -> int:
    """Largest supported factor whose rate still meets the target."""
    if not target_rate_hz > 0:
        raise ValueError("target rate must be positive")
    feasible = [x for x in factors if r_max_hz / x >= target_rate_hz]
    if not feasible:
        raise TargetRateExceedsMax(f"target {target_rate_hz} Hz exceeds R_max {r_max_hz} Hz")
    return max(feasible)


def round_gate(round_index: int, factor: int) -> bool:
    return round_index % factor == 0


def commands_executed(n_rounds: int, factor: int) -> int:
    """Closed form of counting ``round_gate`` over rounds 0..n_rounds-1."""
    return -(-n_rounds // factor)


class RoundScheduler:
    """Cycle-level model of the FPGA round counter.

    ``step`` advances one round and returns the channels whose sampling
    command is asserted in it.
    """

    def __init__(self, factors: Sequence[int]):
        self.factors = np.asarray(factors, dtype=np.int64)
        self.round = 0
        self.executed = np.zeros(len(self.factors), dtype=np.int64)

    def step(self) -> np.ndarray:
        fire = self.round % self.factors == 0
        self.executed += fire
        self.round += 1
        return np.flatnonzero(fire)

    def run(self, n_rounds: int) -> np.ndarray:
        for _ in range(n_rounds):
            self.step()
        return self.executed.copy()


def acquire(full_rate_trace: NeuralTrace, schedules: Sequence[ElectrodeSchedule],
            plan: ClockPlan) -> tuple[NeuralTrace, AcquisitionCost]:
    """Sample every electrode at its scheduled rate.

    Each channel is re-digitised from the band-limited reconstruction of the
    full-rate input; skipped rounds produce no samples at all.
    """
    if len(schedules) != full_rate_trace.n_channels:
        raise ValueError(f"{len(schedules)} schedules for {full_rate_trace.n_channels} channels")
    by_id = {s.electrode_id: s for s in schedules}
    if set(by_id) != set(full_rate_trace.channel_ids):
        raise ValueError("schedule electrode ids do not match trace channels")
    r_max = plan.r_max_hz
    for rate in full_rate_trace.sample_rate_hz:
        if not math.isclose(rate, r_max, rel_tol=1e-9):
            raise ValueError(f"input channel rate {rate} Hz differs from R_max {r_max} Hz")

    n_rounds = max(len(s) for s in full_rate_trace.samples)
    parts, factors, executed = [], [], []
    for ch in full_rate_trace.channel_ids:
        sched = by_id[ch]
        part = resample_trace(full_rate_trace, ch, r_max / sched.factor)
        source = full_rate_trace.samples[full_rate_trace.index(ch)]
        if np.issubdtype(source.dtype, np.integer):
            part = _redigitise(part)
        parts.append(part)
        factors.append(sched.factor)
        executed.append(commands_executed(n_rounds, sched.factor))
    cost = AcquisitionCost(
        channel_ids=tuple(full_rate_trace.channel_ids),
        factors=tuple(factors),
        executed=tuple(executed),
        skipped=tuple(n_rounds - e for e in executed),
        total_rounds=n_rounds,
    )
    return stack_channels(parts), cost


def _redigitise(trace: NeuralTrace) -> NeuralTrace:
    """Quantise a reconstructed channel back to int16 ADC counts."""
    y = trace.samples[0]
    if np.issubdtype(y.dtype, np.integer):
        return trace
    return replace(trace, samples=(np.clip(np.rint(y), -32768, 32767).astype(np.int16),))
