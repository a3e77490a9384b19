"""Multi-scale decoding schedule: resolution ladder, per-stage time grids, and
the noise interpolant.

Time runs from 0 (pure noise) to 1 (clean data). The unit interval is split
into one sub-interval per stage; stage 1 is the coarsest resolution and each
later stage doubles it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ScaleSchedule:
    """Coarse-to-fine decoding plan.

    ``resolutions[s-1]`` is the (H, W) of stage ``s`` and ``stage_bounds[s-1]``
    its half-open time interval; the final bound is closed so t = 1 belongs to
    the last stage.
    """

    base_resolution: int
    num_stages: int
    resolutions: tuple[tuple[int, int], ...]
    steps_per_stage: tuple[int, ...]
    stage_bounds: tuple[tuple[float, float], ...]

    @property
    def total_steps(self) -> int:
        return sum(self.steps_per_stage)

    @property
    def final_resolution(self) -> tuple[int, int]:
        return self.resolutions[-1]

    def stage_start_times(self) -> tuple[float, ...]:
        return tuple(t0 for t0, _ in self.stage_bounds)


@dataclass(frozen=True)
class NoiseInterpolant:
    """Coefficient pair (signal, noise) defining the corruption law
    ``x_t = alpha(t) * x + sigma(t) * eps``."""

    alpha_of_t: Callable[[float], float]
    sigma_of_t: Callable[[float], float]


#: Linear interpolant: signal ramps up as t -> 1, noise ramps down.
LINEAR_INTERPOLANT = NoiseInterpolant(alpha_of_t=lambda t: float(t), sigma_of_t=lambda t: 1.0 - float(t))


def make_scale_schedule(
    base_resolution: int,
    num_stages: int,
    steps_per_stage: Sequence[int],
) -> ScaleSchedule:
    """Build a doubling resolution ladder with uniform stage time bounds.

    Stage ``s`` runs at ``base_resolution * 2**(s-1)`` over the time interval
    ``[(s-1)/S, s/S]``.

    Raises:
        ValueError: if ``base_resolution`` is below 8 or not a power of two,
            ``num_stages`` < 1, the step list length does not match, or any
            step count is below 1.
    """
    if base_resolution < 8 or not _is_power_of_two(base_resolution):
        raise ValueError(f"base_resolution must be a power of two >= 8, got {base_resolution}")
    if num_stages < 1:
        raise ValueError(f"num_stages must be >= 1, got {num_stages}")
    steps = tuple(int(n) for n in steps_per_stage)
    if len(steps) != num_stages:
        raise ValueError(f"steps_per_stage has length {len(steps)}, expected {num_stages}")
    if any(n < 1 for n in steps):
        raise ValueError(f"every stage needs at least one step, got {steps}")

    resolutions = tuple((base_resolution * 2 ** s, base_resolution * 2 ** s) for s in range(num_stages))
    bounds = tuple((s / num_stages, (s + 1) / num_stages) for s in range(num_stages))
    return ScaleSchedule(
        base_resolution=base_resolution,
        num_stages=num_stages,
        resolutions=resolutions,
        steps_per_stage=steps,
        stage_bounds=bounds,
    )


def timestep_grid(schedule: ScaleSchedule, s: int) -> np.ndarray:
    """Linearly spaced times for stage ``s`` (1-based): ``N_s + 1`` values from
    the stage start to the stage end, inclusive."""
    if not 1 <= s <= schedule.num_stages:
        raise ValueError(f"stage index {s} out of range 1..{schedule.num_stages}")
    t0, t1 = schedule.stage_bounds[s - 1]
    return np.linspace(t0, t1, schedule.steps_per_stage[s - 1] + 1)


def scale_for_timestep(schedule: ScaleSchedule, t: float) -> int:
    """Stage index whose time interval contains ``t``.

    Intervals are half-open ``[t0, t1)``; t = 1 maps to the final stage.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if t == 1.0:
        return schedule.num_stages
    for s, (t0, t1) in enumerate(schedule.stage_bounds, start=1):
        if t0 <= t < t1:
            return s
    # Unreachable for bounds that partition [0, 1].
    raise ValueError(f"t={t} not covered by stage bounds {schedule.stage_bounds}")


def interpolant_coefficients(t: float) -> tuple[float, float]:
    """Signal/noise coefficients of the linear interpolant at time ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    return float(t), 1.0 - float(t)
