import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msflow.schedules import (
    LINEAR_INTERPOLANT,
    interpolant_coefficients,
    make_scale_schedule,
    scale_for_timestep,
    timestep_grid,
)


class TestMakeScaleSchedule:
    def test_paper_ladder(self):
        sched = make_scale_schedule(32, 4, [30, 30, 30, 30])
        assert sched.resolutions == ((32, 32), (64, 64), (128, 128), (256, 256))
        assert sched.total_steps == 120

    def test_single_stage(self):
        sched = make_scale_schedule(64, 1, [120])
        assert sched.resolutions == ((64, 64),)
        assert sched.stage_bounds == ((0.0, 1.0),)

    def test_thirds_partition(self):
        sched = make_scale_schedule(16, 3, [4, 4, 4])
        assert sched.resolutions == ((16, 16), (32, 32), (64, 64))
        expected = ((0.0, 1 / 3), (1 / 3, 2 / 3), (2 / 3, 1.0))
        assert np.allclose(sched.stage_bounds, expected)

    @pytest.mark.parametrize("base", [24, 4, 7, 0])
    def test_bad_base_resolution(self, base):
        with pytest.raises(ValueError):
            make_scale_schedule(base, 2, [1, 1])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            make_scale_schedule(16, 3, [4, 4])

    def test_zero_steps(self):
        with pytest.raises(ValueError):
            make_scale_schedule(16, 2, [4, 0])

    def test_zero_stages(self):
        with pytest.raises(ValueError):
            make_scale_schedule(16, 0, [])


class TestTimestepGrid:
    def test_two_stage_first(self):
        sched = make_scale_schedule(8, 2, [2, 2])
        assert np.allclose(timestep_grid(sched, 1), [0.0, 0.25, 0.5])

    def test_single_stage(self):
        sched = make_scale_schedule(8, 1, [4])
        assert np.allclose(timestep_grid(sched, 1), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_final_paper_stage(self):
        # 31 values over [0.75, 1.0], spacing 1/120 of the full interval
        sched = make_scale_schedule(32, 4, [30, 30, 30, 30])
        grid = timestep_grid(sched, 4)
        assert len(grid) == 31
        assert grid[0] == 0.75 and grid[-1] == 1.0
        assert np.allclose(np.diff(grid), 1.0 / 120.0, rtol=1e-12)

    def test_strictly_increasing(self):
        sched = make_scale_schedule(16, 3, [7, 3, 11])
        for s in (1, 2, 3):
            assert np.all(np.diff(timestep_grid(sched, s)) > 0)

    @pytest.mark.parametrize("s", [0, 3, -1])
    def test_out_of_range_stage(self, s):
        sched = make_scale_schedule(8, 2, [1, 1])
        with pytest.raises(ValueError):
            timestep_grid(sched, s)


class TestScaleForTimestep:
    def test_examples(self):
        sched = make_scale_schedule(32, 4, [30] * 4)
        assert scale_for_timestep(sched, 0.10) == 1
        assert scale_for_timestep(sched, 1.0) == 4
        assert scale_for_timestep(sched, 0.25) == 2  # half-open intervals

    @pytest.mark.parametrize("t", [-0.01, 1.01, 2.0])
    def test_out_of_range(self, t):
        sched = make_scale_schedule(8, 2, [1, 1])
        with pytest.raises(ValueError):
            scale_for_timestep(sched, t)


class TestInterpolant:
    @pytest.mark.parametrize("t,expected", [(1.0, (1.0, 0.0)), (0.0, (0.0, 1.0)), (0.3, (0.3, 0.7))])
    def test_linear_rule(self, t, expected):
        assert interpolant_coefficients(t) == pytest.approx(expected)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            interpolant_coefficients(1.5)

    def test_endpoints_of_callable_form(self):
        assert LINEAR_INTERPOLANT.alpha_of_t(1.0) == 1.0
        assert LINEAR_INTERPOLANT.sigma_of_t(1.0) == 0.0
        assert LINEAR_INTERPOLANT.alpha_of_t(0.0) == 0.0
        assert LINEAR_INTERPOLANT.sigma_of_t(0.0) == 1.0


schedule_strategy = st.builds(
    lambda log_base, stages, steps: make_scale_schedule(
        2 ** log_base, stages, (steps * stages)[:stages]
    ),
    log_base=st.integers(min_value=3, max_value=6),
    stages=st.integers(min_value=1, max_value=5),
    steps=st.lists(st.integers(min_value=1, max_value=40), min_size=5, max_size=5),
)


@settings(max_examples=50, deadline=None)
@given(sched=schedule_strategy)
def test_bounds_partition_unit_interval(sched):
    spans = [t1 - t0 for t0, t1 in sched.stage_bounds]
    assert math.fsum(spans) == pytest.approx(1.0, abs=1e-12)
    assert sched.stage_bounds[0][0] == 0.0
    assert sched.stage_bounds[-1][1] == 1.0
    for (_, a), (b, _) in zip(sched.stage_bounds, sched.stage_bounds[1:]):
        assert a == b  # contiguous, non-overlapping


@settings(max_examples=50, deadline=None)
@given(sched=schedule_strategy, t=st.floats(min_value=0.0, max_value=1.0))
def test_grid_brackets_every_time(sched, t):
    s = scale_for_timestep(sched, t)
    grid = timestep_grid(sched, s)
    assert grid[0] <= t <= grid[-1]


@settings(max_examples=50, deadline=None)
@given(sched=schedule_strategy)
def test_grid_spacing_uniform(sched):
    for s in range(1, sched.num_stages + 1):
        diffs = np.diff(timestep_grid(sched, s))
        assert np.allclose(diffs, diffs[0], rtol=1e-12)


@settings(max_examples=100, deadline=None)
@given(t=st.floats(min_value=0.0, max_value=1.0))
def test_coefficients_sum_to_one(t):
    alpha, sigma = interpolant_coefficients(t)
    assert alpha + sigma == pytest.approx(1.0, abs=1e-15)
    assert alpha >= 0 and sigma >= 0


def test_interpolant_monotone():
    grid = np.linspace(0.0, 1.0, 101)
    alphas = [LINEAR_INTERPOLANT.alpha_of_t(t) for t in grid]
    sigmas = [LINEAR_INTERPOLANT.sigma_of_t(t) for t in grid]
    assert all(a <= b for a, b in zip(alphas, alphas[1:]))  # signal non-decreasing
    assert all(a >= b for a, b in zip(sigmas, sigmas[1:]))  # noise non-increasing


def test_resolutions_double():
    sched = make_scale_schedule(8, 5, [1] * 5)
    for (h0, w0), (h1, w1) in zip(sched.resolutions, sched.resolutions[1:]):
        assert h1 == 2 * h0 and w1 == 2 * w0
