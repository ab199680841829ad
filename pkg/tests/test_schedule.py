"""Temperature schedule closed form, range bounds, and determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adacontrast.schedule import (
    SCHEDULE_KINDS,
    ScheduleRangeError,
    TemperatureSchedule,
    temperature_at,
)


def cosine(T=1000, pm=1.0):
    return TemperatureSchedule(
        kind="cosine", tau_minus=0.1, tau_plus=1.0, total_iters=T,
        period_multiplier=pm,
    )


class TestCosineClosedForm:
    def test_start_at_upper(self):
        assert temperature_at(cosine(), 0) == pytest.approx(1.0, abs=1e-12)

    def test_quarter_at_midpoint(self):
        assert temperature_at(cosine(), 250) == pytest.approx(0.55, abs=1e-12)

    def test_half_at_lower(self):
        assert temperature_at(cosine(), 500) == pytest.approx(0.1, abs=1e-12)

    def test_full_period_returns_to_upper(self):
        assert temperature_at(cosine(), 1000) == pytest.approx(1.0, abs=1e-12)

    def test_period_multiplier_stretches_the_cycle(self):
        # with pm=2 the half-period lands at t=T, so tau_T = tau_minus
        assert temperature_at(cosine(pm=2.0), 1000) == pytest.approx(0.1, abs=1e-12)


class TestRangeAndErrors:
    @pytest.mark.parametrize("kind", SCHEDULE_KINDS)
    def test_stays_within_bounds(self, kind):
        sched = TemperatureSchedule(
            kind=kind, tau_minus=0.2, tau_plus=0.9, total_iters=777, seed=5
        )
        gen = np.random.Generator(np.random.Philox(key=1))
        for t in gen.uniform(0, 777, size=500):
            tau = temperature_at(sched, float(t))
            assert 0.2 - 1e-12 <= tau <= 0.9 + 1e-12

    def test_out_of_range_iteration(self):
        with pytest.raises(ScheduleRangeError):
            temperature_at(cosine(T=10), 11)
        with pytest.raises(ScheduleRangeError):
            temperature_at(cosine(T=10), -1)

    def test_invalid_parameters(self):
        with pytest.raises(ValueError):
            TemperatureSchedule(kind="warmup")
        with pytest.raises(ValueError):
            TemperatureSchedule(tau_minus=0.0)
        with pytest.raises(ValueError):
            TemperatureSchedule(tau_minus=0.5, tau_plus=0.4)
        with pytest.raises(ValueError):
            TemperatureSchedule(total_iters=0)
        with pytest.raises(ValueError):
            TemperatureSchedule(period_multiplier=0.0)


class TestKinds:
    def test_fixed_is_constant_at_upper(self):
        sched = TemperatureSchedule(kind="fixed", tau_minus=0.1, tau_plus=0.8)
        for t in (0, 123, 1000):
            assert temperature_at(sched, t) == 0.8

    def test_step_descends_through_evenly_spaced_plateaus(self):
        sched = TemperatureSchedule(
            kind="step", tau_minus=0.1, tau_plus=1.0, total_iters=100, step_count=4
        )
        taus = [temperature_at(sched, t) for t in (0, 30, 60, 99)]
        np.testing.assert_allclose(taus, [1.0, 0.7, 0.4, 0.1])
        # single plateau degenerates to the upper bound
        flat = TemperatureSchedule(kind="step", total_iters=100, step_count=1)
        assert temperature_at(flat, 50) == flat.tau_plus

    def test_random_is_a_pure_function_of_t(self):
        sched = TemperatureSchedule(kind="random", total_iters=100, seed=9)
        assert temperature_at(sched, 17) == temperature_at(sched, 17)
        # different iterations draw independently
        vals = {temperature_at(sched, t) for t in range(20)}
        assert len(vals) > 1

    def test_random_depends_on_seed(self):
        a = TemperatureSchedule(kind="random", total_iters=100, seed=1)
        b = TemperatureSchedule(kind="random", total_iters=100, seed=2)
        assert temperature_at(a, 3) != temperature_at(b, 3)

    def test_oscillating_triangle_wave(self):
        sched = TemperatureSchedule(
            kind="oscillating", tau_minus=0.1, tau_plus=1.0, total_iters=100
        )
        assert temperature_at(sched, 0) == pytest.approx(1.0)
        assert temperature_at(sched, 50) == pytest.approx(0.1)
        assert temperature_at(sched, 100) == pytest.approx(1.0)
        assert temperature_at(sched, 25) == pytest.approx(0.55)

    @given(st.floats(0.01, 2.0), st.floats(0.0, 5.0))
    @settings(max_examples=60, deadline=None)
    def test_cosine_symmetry_about_half_period(self, span, offset):
        sched = TemperatureSchedule(
            kind="cosine", tau_minus=0.1, tau_plus=0.1 + span, total_iters=1000
        )
        t = min(offset * 100, 500.0)
        left = temperature_at(sched, 500 - t)
        right = temperature_at(sched, 500 + t)
        assert left == pytest.approx(right, abs=1e-9)
