import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stepnm.autoswitch import (
    GEOMETRIC_FLOOR,
    StepStats,
    SwitchCriterion,
    WindowSampler,
    autoswitch_decide,
    avg_change_metric,
    avg_change_metric_from_diffs,
    evaluate_offline,
    make_detector,
    mixing_window,
    relative_criterion,
    staleness_criterion,
    variance_change_sample,
)
from stepnm.errors import ConfigError, DimensionError, DomainError, RangeError, StateError


class TestMixingWindow:
    def test_beta2_point999_gives_1000(self):
        assert mixing_window(0.999) == 1000

    @pytest.mark.parametrize("beta2,expected", [(0.9, 10), (0.99, 100), (0.995, 200), (0.5, 2)])
    def test_values(self, beta2, expected):
        assert mixing_window(beta2) == expected

    def test_at_least_one(self):
        assert mixing_window(0.0) == 1

    def test_domain(self):
        with pytest.raises(DomainError):
            mixing_window(1.0)


class TestVarianceChangeSample:
    def test_arithmetic(self):
        z = variance_change_sample([0.002, 0.001], [0.001, 0.004])
        assert math.isclose(z, 0.002, rel_tol=1e-15)

    def test_equal_coordinates_both_options(self):
        v_prev = np.array([1.0, 2.0, 3.0])
        v = v_prev + 0.005
        assert math.isclose(variance_change_sample(v, v_prev, "arithmetic"), 0.005, rel_tol=1e-12)
        assert math.isclose(variance_change_sample(v, v_prev, "geometric"), 0.005, rel_tol=1e-12)

    def test_geometric_floor(self):
        z = variance_change_sample([1.0, 1.004], [1.0, 1.0], "geometric")
        assert math.isclose(z, math.sqrt(GEOMETRIC_FLOOR * 0.004), rel_tol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            variance_change_sample([1.0], [1.0, 2.0])

    def test_unknown_option(self):
        with pytest.raises(DomainError):
            variance_change_sample([1.0], [1.0], "harmonic")


class TestWindowSampler:
    def test_mean_of_identical_values(self):
        sampler = WindowSampler("arithmetic", 1000)
        for _ in range(1000):
            sampler.add(0.002)
        assert sampler.mean() == 0.002

    def test_window_keeps_most_recent(self):
        sampler = WindowSampler("arithmetic", 3)
        for z in (10.0, 1.0, 2.0, 3.0):
            sampler.add(z)
        assert len(sampler) == 3
        assert sampler.mean() == 2.0

    def test_empty_mean_raises(self):
        with pytest.raises(StateError):
            WindowSampler("arithmetic", 5).mean()

    def test_capacity_validation(self):
        with pytest.raises(ConfigError):
            WindowSampler("arithmetic", 0)


class TestAutoswitchDecide:
    def _full_sampler(self, value, capacity=10):
        sampler = WindowSampler("arithmetic", capacity)
        for _ in range(capacity):
            sampler.add(value)
        return sampler

    def test_zero_changes_fire_unclipped(self):
        assert autoswitch_decide(self._full_sampler(0.0), t=50, eps=1e-8)

    def test_above_eps_does_not_fire(self):
        assert not autoswitch_decide(self._full_sampler(1.0), t=50, eps=1e-8)

    def test_partial_window_is_suppressed(self):
        sampler = WindowSampler("arithmetic", 10)
        sampler.add(0.0)
        assert not autoswitch_decide(sampler, t=1, eps=1e-8)

    def test_empty_sampler_raises(self):
        with pytest.raises(StateError):
            autoswitch_decide(WindowSampler("arithmetic", 5), t=1, eps=1e-8)

    def test_budget_cap_fires_regardless_of_window(self):
        sampler = WindowSampler("arithmetic", 10)
        sampler.add(1e6)
        assert autoswitch_decide(sampler, t=501, eps=1e-8, clip=(100, 500))
        assert autoswitch_decide(sampler, t=500, eps=1e-8, clip=(100, 500))

    def test_lower_clamp_blocks_early_fire(self):
        assert not autoswitch_decide(self._full_sampler(0.0), t=100, eps=1e-8, clip=(100, 500))
        assert autoswitch_decide(self._full_sampler(0.0), t=101, eps=1e-8, clip=(100, 500))

    def test_bad_clip(self):
        with pytest.raises(ConfigError):
            autoswitch_decide(self._full_sampler(0.0), t=5, eps=1e-8, clip=(500, 100))

    @settings(deadline=None, max_examples=60)
    @given(
        st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=1, max_size=200),
        st.integers(min_value=1, max_value=200),
    )
    def test_clip_invariants_over_random_streams(self, zs, t):
        t_min, t_max = 20, 120
        sampler = WindowSampler("arithmetic", 10)
        for z in zs:
            sampler.add(z)
        fired = autoswitch_decide(sampler, t, eps=1e-8, clip=(t_min, t_max))
        if t <= t_min:
            assert not fired
        if t >= t_max:
            assert fired


class TestBaselineCriteria:
    def test_relative_fires_under_half(self):
        assert relative_criterion(1.4, 1.0)

    def test_relative_does_not_fire_at_or_above_half(self):
        assert not relative_criterion(2.0, 1.0)
        assert not relative_criterion(1.5, 1.0)

    def test_relative_equal_norms_fire(self):
        assert relative_criterion(3.7, 3.7)

    def test_relative_zero_prev_raises(self):
        with pytest.raises(DomainError):
            relative_criterion(1.0, 0.0)

    def test_staleness_fires_above_threshold(self):
        assert staleness_criterion(0.97, 1.0)

    def test_staleness_does_not_fire_when_decayed(self):
        assert not staleness_criterion(0.5, 1.0)

    def test_staleness_equal_norms_fire(self):
        assert staleness_criterion(2.5, 2.5)

    def test_staleness_zero_lagged_raises(self):
        with pytest.raises(DomainError):
            staleness_criterion(1.0, 0.0)


def make_stats(values_by_step):
    """Build StepStats rows from dicts of per-step z/v values."""
    rows = []
    for step, (z, l1, l2) in enumerate(values_by_step, start=1):
        rows.append(StepStats(step=step, z_arith=z, z_geom=z, v_l1=l1, v_l2=l2))
    return rows


class TestDetectors:
    def test_relative_detector_needs_two_steps(self):
        crit = SwitchCriterion(kind="relative")
        det = make_detector(crit, beta2=0.9, eps=1e-8)
        stats = make_stats([(0.1, 1.0, 1.0), (0.1, 1.01, 1.01)])
        assert not det.observe(stats[0])
        assert det.observe(stats[1])

    def test_staleness_detector_uses_lag(self):
        crit = SwitchCriterion(kind="staleness")
        det = make_detector(crit, beta2=0.9, eps=1e-8)  # lag 10
        fired_at = None
        for step in range(1, 30):
            stats = StepStats(step=step, z_arith=0.1, z_geom=0.1, v_l1=5.0, v_l2=5.0)
            if det.observe(stats):
                fired_at = step
                break
        # constant norms: ratio 1 > 0.96 fires at the first step with a full lag window
        assert fired_at == 11

    def test_fixed_detector(self):
        crit = SwitchCriterion(kind="fixed", step=7)
        det = make_detector(crit, beta2=0.999, eps=1e-8)
        results = [det.observe(StepStats(t, 0.0, 0.0, 1.0, 1.0)) for t in range(1, 9)]
        assert results == [False] * 6 + [True, True]

    def test_autoswitch_detector_tracks_mean(self):
        crit = SwitchCriterion(kind="autoswitch")
        det = make_detector(crit, beta2=0.5, eps=1e-8)  # window 2
        det.observe(StepStats(1, 4.0, 4.0, 1.0, 1.0))
        det.observe(StepStats(2, 2.0, 2.0, 1.0, 1.0))
        assert det.last_mean == 3.0

    def test_evaluate_offline_no_switch(self):
        crit = SwitchCriterion(kind="autoswitch")
        stats = make_stats([(1.0, 1.0, 1.0)] * 20)
        assert evaluate_offline(crit, stats, beta2=0.9, eps=1e-8) is None

    def test_evaluate_offline_finds_first_fire(self):
        crit = SwitchCriterion(kind="autoswitch")
        stats = make_stats([(0.0, 1.0, 1.0)] * 20)
        # window of 10 fills at step 10
        assert evaluate_offline(crit, stats, beta2=0.9, eps=1e-8) == 10

    def test_frozen_variance_profile_fires_everything_at_first_eligible_step(self):
        # constant variance: zero changes, constant norms
        stats = make_stats([(0.0, 5.0, 3.0)] * 1100)
        beta2, eps = 0.9, 1e-8  # window / lag of 10
        assert evaluate_offline(SwitchCriterion(kind="autoswitch"), stats, beta2, eps) == 10
        assert evaluate_offline(SwitchCriterion(kind="relative"), stats, beta2, eps) == 2
        assert evaluate_offline(SwitchCriterion(kind="staleness"), stats, beta2, eps) == 11
        diffs = [0.0] * 1101
        for crit_t0 in (10, 2, 11):
            assert avg_change_metric_from_diffs(diffs, crit_t0) == 0.0


class TestSwitchCriterionValidation:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            SwitchCriterion(kind="oracle")

    def test_fixed_needs_step(self):
        with pytest.raises(ConfigError):
            SwitchCriterion(kind="fixed")

    def test_clip_ordering(self):
        with pytest.raises(ConfigError):
            SwitchCriterion(kind="autoswitch", clip=(500, 100))

    def test_labels(self):
        assert "autoswitch" in SwitchCriterion(kind="autoswitch").label()
        assert "0.5" in SwitchCriterion(kind="relative").label()
        assert "0.96" in SwitchCriterion(kind="staleness").label()


class TestAvgChangeMetric:
    def test_constant_change_recovers_rate(self):
        # each step changes one coordinate by c in l1: 1001 terms * c * 1e-3
        c = 0.004
        v_by_step = [np.array([c * t]) for t in range(0, 1200)]
        metric = avg_change_metric(v_by_step, t0=50)
        assert math.isclose(metric, 1.001 * c, rel_tol=1e-9)

    def test_frozen_variance_gives_zero(self):
        v_by_step = [np.array([1.0, 2.0])] * 1200
        assert avg_change_metric(v_by_step, t0=10) == 0.0

    def test_scaling_homogeneity(self):
        rng = np.random.default_rng(0)
        vals = np.cumsum(rng.random(1200))
        v_by_step = [np.array([v]) for v in vals]
        scaled = [3.0 * v for v in v_by_step]
        m1 = avg_change_metric(v_by_step, t0=5)
        m2 = avg_change_metric(scaled, t0=5)
        assert math.isclose(m2, 3.0 * m1, rel_tol=1e-12)

    def test_too_short_raises(self):
        with pytest.raises(RangeError):
            avg_change_metric([np.zeros(1)] * 500, t0=0)

    def test_diffs_variant_agrees(self):
        rng = np.random.default_rng(1)
        vals = np.abs(np.cumsum(rng.standard_normal(1300)))
        v_by_step = [np.array([v]) for v in vals]
        diffs = [0.0] + [abs(vals[t] - vals[t - 1]) for t in range(1, len(vals))]
        a = avg_change_metric(v_by_step, t0=100)
        b = avg_change_metric_from_diffs(diffs, t0=100)
        assert math.isclose(a, b, rel_tol=1e-12)

    def test_diffs_variant_too_short(self):
        with pytest.raises(RangeError):
            avg_change_metric_from_diffs([0.0] * 900, t0=0)
