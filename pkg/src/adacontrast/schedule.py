"""Temperature schedules for the contrastive losses.

The default is a cosine sweep between an upper and a lower temperature over
the training run; fixed, step, random, and oscillating variants exist for
ablation sweeps. All kinds are stateless: the temperature at iteration t is
a pure function of (schedule, t), which keeps resumed runs bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .numerics import RngStream

SCHEDULE_KINDS = ("cosine", "fixed", "step", "random", "oscillating")


class ScheduleRangeError(ValueError):
    """Iteration index outside [0, total_iters]."""


@dataclass(frozen=True)
class TemperatureSchedule:
    """Temperature curve description.

    Args:
        kind: one of cosine / fixed / step / random / oscillating.
        tau_minus: lower bound τ⁻ (> 0).
        tau_plus: upper bound τ⁺ (≥ τ⁻).
        total_iters: horizon T ≥ 1.
        period_multiplier: scales the effective period of the periodic kinds;
            1.0 means one full cycle over the horizon.
        seed: only the random kind draws from it.
        step_count: plateau count of the step kind.
    """

    kind: str = "cosine"
    tau_minus: float = 0.1
    tau_plus: float = 1.0
    total_iters: int = 1000
    period_multiplier: float = 1.0
    seed: int = 0
    step_count: int = 4

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not (0.0 < self.tau_minus <= self.tau_plus):
            raise ValueError("need 0 < tau_minus <= tau_plus")
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if self.period_multiplier <= 0.0:
            raise ValueError("period_multiplier must be positive")
        if self.step_count < 1:
            raise ValueError("step_count must be >= 1")


def temperature_at(schedule: TemperatureSchedule, t: float) -> float:
    """Temperature τ_t for iteration t ∈ [0, total_iters].

    Raises ScheduleRangeError outside the horizon.
    """
    T = float(schedule.total_iters)
    if not 0.0 <= t <= T:
        raise ScheduleRangeError(f"iteration {t} outside [0, {schedule.total_iters}]")
    lo, hi = schedule.tau_minus, schedule.tau_plus
    span = hi - lo
    period = T * schedule.period_multiplier

    if schedule.kind == "fixed":
        return hi
    if schedule.kind == "cosine":
        return lo + 0.5 * (1.0 + math.cos(2.0 * math.pi * t / period)) * span
    if schedule.kind == "step":
        # Descending staircase: plateau values linearly spaced hi -> lo.
        idx = min(int(t / T * schedule.step_count), schedule.step_count - 1)
        if schedule.step_count == 1:
            return hi
        return hi - span * idx / (schedule.step_count - 1)
    if schedule.kind == "random":
        gen = RngStream(schedule.seed).substream("temperature", int(t)).generator()
        return float(gen.uniform(lo, hi))
    if schedule.kind == "oscillating":
        phase = (t / period) % 1.0
        return lo + span * (1.0 - 2.0 * min(phase, 1.0 - phase))
    raise AssertionError(f"unreachable kind {schedule.kind!r}")
