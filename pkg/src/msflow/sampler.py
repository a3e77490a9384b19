"""Multi-stage decoding: per-stage initialization, guided velocity, Euler
integration, and upsample-plus-renoise transitions between stages.

Also provides the single-scale baseline used by the ablation harness.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import torch

from msflow.backbone import VelocityModel, velocity
from msflow.resample import UPSAMPLE_MODES, upsample
from msflow.rng import make_generator
from msflow.schedules import ScaleSchedule, timestep_grid


@dataclass(frozen=True)
class SamplerConfig:
    """Decoding knobs.

    ``alpha``/``beta`` control how much upsampled signal vs fresh noise seeds
    each stage after the first. Left as None they default per stage to the
    stage's start-time interpolant coefficients (signal = t_start, noise =
    1 - t_start), which matches how training constructs stage starts.
    """

    cfg_scale: float = 1.0
    alpha: float | None = None
    beta: float | None = None
    seed: int = 0
    upsample_mode: str = "bilinear"
    keep_intermediates: bool = False

    def __post_init__(self):
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0, got {v}")
        if self.alpha is not None and self.beta is not None and self.alpha == 0 and self.beta == 0:
            raise ValueError("at least one of alpha, beta must be positive")
        if self.upsample_mode not in UPSAMPLE_MODES:
            raise ValueError(f"upsample_mode must be one of {UPSAMPLE_MODES}")


@dataclass
class Trajectory:
    """Record of one decode: final image per stage plus cost accounting."""

    stage_outputs: list[torch.Tensor]
    forward_passes: int
    stage_seconds: list[float]
    intermediates: list[torch.Tensor] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.stage_outputs[-1]


def init_stage(
    prev: torch.Tensor | None,
    target_res: tuple[int, int],
    config: SamplerConfig,
    generator: torch.Generator,
    batch: int = 1,
    channels: int = 3,
    stage_start: float | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Initial state for one stage.

    The first stage (``prev`` None) draws a standard Gaussian at the target
    resolution. Later stages blend the upsampled previous output with fresh
    noise: ``alpha * Up(prev) + beta * eps``.
    """
    if prev is None:
        return torch.randn(batch, channels, *target_res, generator=generator, dtype=dtype)

    alpha = config.alpha
    beta = config.beta
    if alpha is None or beta is None:
        if stage_start is None:
            raise ValueError("stage_start is required when alpha/beta default to schedule coefficients")
        alpha = float(stage_start) if alpha is None else alpha
        beta = 1.0 - float(stage_start) if beta is None else beta

    th, tw = target_res
    if prev.shape[-2] > th or prev.shape[-1] > tw:
        raise ValueError(f"previous stage {tuple(prev.shape[-2:])} exceeds target resolution {target_res}")
    up = upsample(prev, target_res, mode=config.upsample_mode)
    if beta == 0:
        return alpha * up
    eps = torch.randn(up.shape, generator=generator, dtype=up.dtype)
    return alpha * up + beta * eps


def cfg_velocity(
    model: VelocityModel,
    x: torch.Tensor,
    t,
    cond: torch.Tensor,
    cfg_scale: float,
) -> torch.Tensor:
    """Guided velocity: unconditional prediction plus ``cfg_scale`` times the
    conditional-minus-unconditional difference.

    ``cfg_scale == 1`` collapses to a single conditional evaluation; any other
    scale runs the conditional and null branches as one doubled batch.
    """
    if cfg_scale == 1.0:
        return velocity(model, x, t, cond)
    b = x.shape[0]
    both = torch.cat([x, x], dim=0)
    conds = torch.cat([cond, model.null_tokens(b)], dim=0)
    if torch.is_tensor(t):
        t2 = torch.cat([t.reshape(-1).expand(b), t.reshape(-1).expand(b)])
    else:
        t2 = t
    v = velocity(model, both, t2, conds)
    v_cond, v_uncond = v[:b], v[b:]
    return v_uncond + cfg_scale * (v_cond - v_uncond)


def evaluations_per_step(cfg_scale: float) -> int:
    return 1 if cfg_scale == 1.0 else 2


def euler_step(x: torch.Tensor, t_cur: float, t_next: float, v: torch.Tensor) -> torch.Tensor:
    """One explicit Euler update ``x + (t_next - t_cur) * v``; no clamping."""
    if not t_next > t_cur:
        raise ValueError(f"times must increase, got {t_cur} -> {t_next}")
    return x + (t_next - t_cur) * v


def stage_velocity_scale(t_start: float, t_end: float) -> float:
    """Conversion from the learned per-stage displacement field to a velocity
    on the global clock.

    The training target is the whole start-to-end displacement of a stage, so
    it is the time derivative of the path only when the stage's interval is
    treated as unit length; integrating over the global grid, which allots
    ``t_end - t_start`` of clock to the stage, therefore rescales the field by
    the reciprocal span. A single full-interval stage is unaffected.
    """
    return 1.0 / (t_end - t_start)


def _run_stage(model, x, grid, z, config, trajectory):
    evals = evaluations_per_step(config.cfg_scale)
    scale = stage_velocity_scale(float(grid[0]), float(grid[-1]))
    for i in range(len(grid) - 1):
        v = cfg_velocity(model, x, float(grid[i]), z, config.cfg_scale)
        x = euler_step(x, float(grid[i]), float(grid[i + 1]), scale * v)
        trajectory.forward_passes += evals
        if config.keep_intermediates:
            trajectory.intermediates.append(x.detach().clone())
    return x


@torch.no_grad()
def decode_multiscale(
    model: VelocityModel,
    z: torch.Tensor,
    schedule: ScaleSchedule,
    config: SamplerConfig,
    generator: torch.Generator | None = None,
) -> Trajectory:
    """Decode latent tokens coarse-to-fine across every stage of the schedule.

    Deterministic given the seed: all noise is drawn from one generator in a
    fixed order. Outputs are not clamped; callers clamp the final stage before
    computing metrics.
    """
    gen = generator if generator is not None else make_generator(config.seed, "decode")
    batch = z.shape[0]
    traj = Trajectory(stage_outputs=[], forward_passes=0, stage_seconds=[])
    x = None
    for s in range(1, schedule.num_stages + 1):
        tic = time.perf_counter()
        t0 = schedule.stage_bounds[s - 1][0]
        x = init_stage(
            x,
            schedule.resolutions[s - 1],
            config,
            gen,
            batch=batch,
            channels=model.config.in_channels,
            stage_start=t0,
            dtype=z.dtype,
        )
        grid = timestep_grid(schedule, s)
        x = _run_stage(model, x, grid, z, config, traj)
        traj.stage_outputs.append(x)
        traj.stage_seconds.append(time.perf_counter() - tic)
    return traj


@torch.no_grad()
def decode_singlescale(
    model: VelocityModel,
    z: torch.Tensor,
    resolution: tuple[int, int],
    num_steps: int,
    config: SamplerConfig,
    generator: torch.Generator | None = None,
) -> Trajectory:
    """Full-resolution baseline: one stage integrating ``num_steps`` Euler
    steps over the whole [0, 1] interval."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    gen = generator if generator is not None else make_generator(config.seed, "decode-single")
    batch = z.shape[0]
    traj = Trajectory(stage_outputs=[], forward_passes=0, stage_seconds=[])
    tic = time.perf_counter()
    x = init_stage(None, resolution, config, gen, batch=batch, channels=model.config.in_channels, dtype=z.dtype)
    grid = torch.linspace(0.0, 1.0, num_steps + 1).numpy()
    x = _run_stage(model, x, grid, z, config, traj)
    traj.stage_outputs.append(x)
    traj.stage_seconds.append(time.perf_counter() - tic)
    return traj
