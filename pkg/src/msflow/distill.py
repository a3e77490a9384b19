"""Stage 2: distill the multi-step decoder into a one-step-per-scale student.

The encoder is frozen. The student rolls the whole ladder out with a single
Euler step per stage; its final output is re-noised at a sampled time and the
frozen teacher decodes from the matching scale onward, providing per-stage
regression targets. Perceptual and adversarial terms sharpen the final output.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from msflow.backbone import (
    Discriminator,
    Encoder,
    FeaturePyramid,
    VelocityModel,
    discriminate,
    encode,
    perceptual_features,
)
from msflow.pipeline.checkpoint import module_arrays, save_checkpoint
from msflow.resample import downsample_area
from msflow.rng import make_generator, stable_seed
from msflow.sampler import SamplerConfig, cfg_velocity, euler_step, init_stage, stage_velocity_scale
from msflow.schedules import ScaleSchedule, interpolant_coefficients, scale_for_timestep
from msflow.train_stage1 import TrainingDiverged


@dataclass(frozen=True)
class DistillConfig:
    lambda_rec: float = 1.0
    lambda_perc: float = 0.5
    lambda_adv: float = 0.1
    teacher_cfg_scale: float = 2.0
    student_cfg_scale: float = 1.0
    t_teacher: tuple[float, ...] | None = None  # None: the schedule's stage start times
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    disc_lr: float = 5e-5
    grad_clip: float = 1.0
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 16
    upsample_mode: str = "bilinear"
    init_alpha: float | None = None  # None: stage-start interpolant coefficients
    init_beta: float | None = None
    log_every: int = 25
    val_every: int = 250
    ckpt_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_rec", "lambda_perc", "lambda_adv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.t_teacher is not None:
            if len(self.t_teacher) == 0:
                raise ValueError("t_teacher must be non-empty")
            if any(not 0.0 <= t < 1.0 for t in self.t_teacher):
                raise ValueError(f"t_teacher values must lie in [0, 1), got {self.t_teacher}")

    def teacher_times(self, schedule: ScaleSchedule) -> tuple[float, ...]:
        return self.t_teacher if self.t_teacher is not None else schedule.stage_start_times()


@dataclass
class DistillBatchState:
    """Everything one distillation step produced along the way."""

    z: torch.Tensor
    student_outputs: list[torch.Tensor]
    t: float
    s_t: int
    x_t: torch.Tensor
    teacher_outputs: list[torch.Tensor]


@dataclass
class DistillState:
    """Student/teacher/discriminator triple plus their optimizers."""

    encoder: Encoder
    teacher: VelocityModel
    student: VelocityModel
    discriminator: Discriminator
    perceptual: torch.nn.Module
    config: DistillConfig
    schedule: ScaleSchedule
    student_opt: torch.optim.Optimizer
    disc_opt: torch.optim.Optimizer
    step: int = 0


def setup_distillation(
    encoder: Encoder,
    teacher: VelocityModel,
    config: DistillConfig,
    schedule: ScaleSchedule,
    perceptual: torch.nn.Module | None = None,
    discriminator: Discriminator | None = None,
) -> DistillState:
    """Freeze encoder and teacher, clone the student from the teacher, and
    attach fresh optimizers."""
    encoder.requires_grad_(False)
    encoder.eval()
    teacher.requires_grad_(False)
    teacher.eval()
    student = copy.deepcopy(teacher)
    student.requires_grad_(True)
    student.train()

    disc = discriminator if discriminator is not None else Discriminator(seed=stable_seed(config.seed, "disc") % (2**31))
    perc = perceptual if perceptual is not None else FeaturePyramid(seed=stable_seed(config.seed, "perc") % (2**31))

    student_opt = torch.optim.AdamW(
        student.parameters(),
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )
    disc_opt = torch.optim.AdamW(
        [p for p in disc.parameters() if p.requires_grad],
        lr=config.disc_lr,
        betas=(config.beta1, config.beta2),
    )
    return DistillState(
        encoder=encoder,
        teacher=teacher,
        student=student,
        discriminator=disc,
        perceptual=perc,
        config=config,
        schedule=schedule,
        student_opt=student_opt,
        disc_opt=disc_opt,
    )


def student_rollout(
    student: VelocityModel,
    z: torch.Tensor,
    schedule: ScaleSchedule,
    config: DistillConfig,
    generator: torch.Generator,
) -> list[torch.Tensor]:
    """One denoising step per stage, coarsest to finest, keeping gradients.

    Starts from pure noise at the base resolution; each stage takes a single
    Euler step across its whole time interval, then hands off through the
    usual upsample-plus-noise transition. Exactly one velocity evaluation per
    stage when the student guidance scale is 1.
    """
    sampler_cfg = SamplerConfig(
        cfg_scale=config.student_cfg_scale,
        alpha=config.init_alpha,
        beta=config.init_beta,
        upsample_mode=config.upsample_mode,
    )
    outputs: list[torch.Tensor] = []
    x = None
    for s in range(1, schedule.num_stages + 1):
        t0, t1 = schedule.stage_bounds[s - 1]
        x = init_stage(
            x,
            schedule.resolutions[s - 1],
            sampler_cfg,
            generator,
            batch=z.shape[0],
            channels=student.config.in_channels,
            stage_start=t0,
            dtype=z.dtype,
        )
        v = cfg_velocity(student, x, t0, z, config.student_cfg_scale)
        x = euler_step(x, t0, t1, stage_velocity_scale(t0, t1) * v)
        outputs.append(x)
    return outputs


@torch.no_grad()
def student_decode(
    student: VelocityModel,
    z: torch.Tensor,
    schedule: ScaleSchedule,
    config: DistillConfig,
    generator: torch.Generator | None = None,
):
    """Inference wrapper around the rollout, returning a trajectory with the
    same cost accounting as the multi-step sampler."""
    from msflow.sampler import Trajectory, evaluations_per_step

    gen = generator if generator is not None else make_generator(config.seed, "student-decode")
    tic = time.perf_counter()
    outputs = student_rollout(student, z, schedule, config, gen)
    elapsed = time.perf_counter() - tic
    nfe = schedule.num_stages * evaluations_per_step(config.student_cfg_scale)
    return Trajectory(stage_outputs=outputs, forward_passes=nfe, stage_seconds=[elapsed])


def renoise(
    x_hat: torch.Tensor,
    t: float,
    eps: torch.Tensor,
    schedule: ScaleSchedule | None = None,
) -> torch.Tensor:
    """Corrupt the student's output back to time ``t``.

    With a schedule, the output is first area-downsampled to the resolution of
    the stage containing ``t`` so the teacher can resume there.
    """
    if not 0.0 <= t < 1.0:
        raise ValueError(f"re-noising time must lie in [0, 1), got {t}")
    target = x_hat
    if schedule is not None:
        s_t = scale_for_timestep(schedule, t)
        res = schedule.resolutions[s_t - 1]
        if tuple(target.shape[-2:]) != res:
            target = downsample_area(target, res)
    if eps.shape != target.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} must match target {tuple(target.shape)}")
    alpha, sigma = interpolant_coefficients(t)
    return alpha * target + sigma * eps


@torch.no_grad()
def teacher_rollout_from(
    teacher: VelocityModel,
    x_t: torch.Tensor,
    s_t: int,
    z: torch.Tensor,
    schedule: ScaleSchedule,
    config: DistillConfig,
    generator: torch.Generator,
    t_start: float | None = None,
) -> list[torch.Tensor]:
    """Teacher decodes from stage ``s_t`` to the top, one step per stage.

    Runs without building a graph; teacher weights never receive gradients.
    ``t_start`` places the first step's left endpoint inside stage ``s_t``
    (defaults to the stage start).
    """
    if not 1 <= s_t <= schedule.num_stages:
        raise ValueError(f"stage index {s_t} out of range 1..{schedule.num_stages}")
    if tuple(x_t.shape[-2:]) != schedule.resolutions[s_t - 1]:
        raise ValueError(
            f"x_t resolution {tuple(x_t.shape[-2:])} must match stage {s_t} resolution {schedule.resolutions[s_t - 1]}"
        )
    sampler_cfg = SamplerConfig(
        cfg_scale=config.teacher_cfg_scale,
        alpha=config.init_alpha,
        beta=config.init_beta,
        upsample_mode=config.upsample_mode,
    )
    outputs: list[torch.Tensor] = []
    x = x_t
    for s in range(s_t, schedule.num_stages + 1):
        t0, t1 = schedule.stage_bounds[s - 1]
        if s == s_t:
            start = t0 if t_start is None else float(t_start)
            if not t0 <= start < t1:
                raise ValueError(f"t_start {start} outside stage {s} interval [{t0}, {t1})")
        else:
            x = init_stage(
                x,
                schedule.resolutions[s - 1],
                sampler_cfg,
                generator,
                batch=x.shape[0],
                channels=teacher.config.in_channels,
                stage_start=t0,
            )
            start = t0
        v = cfg_velocity(teacher, x, start, z, config.teacher_cfg_scale)
        x = euler_step(x, start, t1, stage_velocity_scale(t0, t1) * v)
        outputs.append(x)
    return outputs


def rec_loss(
    student_outputs: list[torch.Tensor],
    teacher_outputs: list[torch.Tensor],
    s_t: int,
) -> torch.Tensor:
    """Sum over stages >= ``s_t`` of per-pixel mean squared student-teacher
    differences."""
    num_stages = len(student_outputs)
    expected = num_stages - s_t + 1
    if len(teacher_outputs) != expected:
        raise ValueError(f"teacher supplied {len(teacher_outputs)} outputs, expected {expected} for s_t={s_t}")
    total = None
    for k, s in enumerate(range(s_t, num_stages + 1)):
        a, b = student_outputs[s - 1], teacher_outputs[k]
        if a.shape != b.shape:
            raise ValueError(f"stage {s}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
        term = F.mse_loss(a, b)
        total = term if total is None else total + term
    return total


def perc_loss(
    extractor: torch.nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    layer_weights: list[float] | None = None,
) -> torch.Tensor:
    """Weighted mean squared distance between unit-normalized feature maps."""
    fx = perceptual_features(extractor, x)
    fy = perceptual_features(extractor, y)
    weights = layer_weights if layer_weights is not None else [1.0 / len(fx)] * len(fx)
    total = x.new_zeros(())
    for w, a, b in zip(weights, fx, fy):
        na = a / (a.norm(dim=1, keepdim=True) + 1e-10)
        nb = b / (b.norm(dim=1, keepdim=True) + 1e-10)
        total = total + w * ((na - nb) ** 2).mean()
    return total


def adv_losses(disc: Discriminator, x_hat: torch.Tensor, x_real: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Generator and discriminator objectives.

    The generator term back-propagates only into ``x_hat`` (discriminator
    parameters are masked during its forward); the discriminator term sees
    ``x_hat`` detached, so it trains only the classifier.
    """
    flags = [(p, p.requires_grad) for p in disc.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        l_adv = -torch.log(discriminate(disc, x_hat)).mean()
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)
    score_real = discriminate(disc, x_real)
    score_fake = discriminate(disc, x_hat.detach())
    l_disc = (-torch.log(score_real) - torch.log(1.0 - score_fake)).mean()
    return l_adv, l_disc


def distill_forward(state: DistillState, x0: torch.Tensor, generator: torch.Generator) -> DistillBatchState:
    """Student rollout, re-noising at a sampled teacher time, and the teacher's
    partial rollout; teacher supervision is constant with respect to the
    student."""
    config, schedule = state.config, state.schedule
    with torch.no_grad():
        z = encode(state.encoder, x0)

    student_outputs = student_rollout(state.student, z, schedule, config, generator)

    times = config.teacher_times(schedule)
    t = float(times[int(torch.randint(len(times), (1,), generator=generator))])
    s_t = scale_for_timestep(schedule, t)
    with torch.no_grad():
        target = student_outputs[-1].detach()
        res = schedule.resolutions[s_t - 1]
        eps = torch.randn(target.shape[0], target.shape[1], *res, generator=generator, dtype=target.dtype)
        x_t = renoise(target, t, eps, schedule)
        teacher_outputs = teacher_rollout_from(
            state.teacher, x_t, s_t, z, schedule, config, generator, t_start=t
        )
    return DistillBatchState(z=z, student_outputs=student_outputs, t=t, s_t=s_t, x_t=x_t, teacher_outputs=teacher_outputs)


def distill_step(state: DistillState, batch: torch.Tensor, generator: torch.Generator) -> dict:
    """One alternating update: student on the weighted objective, then the
    discriminator on its classification loss. Returns all loss components."""
    config = state.config
    bs = distill_forward(state, batch, generator)
    x_hat = bs.student_outputs[-1]

    l_rec = rec_loss(bs.student_outputs, bs.teacher_outputs, bs.s_t)
    l_perc = perc_loss(state.perceptual, x_hat, batch)
    l_adv, l_disc = adv_losses(state.discriminator, x_hat, batch)
    total = config.lambda_rec * l_rec + config.lambda_perc * l_perc + config.lambda_adv * l_adv

    if not (torch.isfinite(total) and torch.isfinite(l_disc)):
        raise TrainingDiverged(
            f"non-finite distillation loss at step {state.step}: "
            f"rec={l_rec.item()} perc={l_perc.item()} adv={l_adv.item()} disc={l_disc.item()}"
        )

    state.student_opt.zero_grad(set_to_none=True)
    total.backward()
    torch.nn.utils.clip_grad_norm_(state.student.parameters(), config.grad_clip)
    state.student_opt.step()

    state.disc_opt.zero_grad(set_to_none=True)
    l_disc.backward()
    state.disc_opt.step()

    state.step += 1
    return {
        "loss_total": total.item(),
        "loss_rec": l_rec.item(),
        "loss_perc": l_perc.item(),
        "loss_adv": l_adv.item(),
        "loss_disc": l_disc.item(),
        "t": bs.t,
        "s_t": bs.s_t,
    }


@dataclass
class DistillResult:
    checkpoint_path: Path
    log_path: Path
    loss_history: list[dict] = field(default_factory=list)
    val_psnr_history: list[tuple[int, float]] = field(default_factory=list)


def train_distill(
    state: DistillState,
    train_images: torch.Tensor,
    out_dir: str | Path,
    val_images: torch.Tensor | None = None,
    meta: dict | None = None,
) -> DistillResult:
    """Run the distillation loop; writes a per-step loss-component log and
    student checkpoints."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "distill_log.jsonl"
    log_path.write_text("")  # fresh log per run
    config = state.config

    n = train_images.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch

    gen = make_generator(config.seed, "distill")
    data_rng = np.random.default_rng(stable_seed(config.seed, "distill-order"))
    history: list[dict] = []
    val_history: list[tuple[int, float]] = []
    start = time.perf_counter()

    def log(record: dict):
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def validate(step_now: int):
        if val_images is None or len(val_images) == 0:
            return
        from msflow.metrics import psnr

        with torch.no_grad():
            sub = val_images[: min(8, len(val_images))]
            z = encode(state.encoder, sub)
            outs = student_rollout(state.student, z, state.schedule, config, make_generator(config.seed, "distill-val"))
            recon = outs[-1].clamp(-1, 1)
            scores = [psnr(recon[i], sub[i], data_range=2.0) for i in range(sub.shape[0])]
        val_psnr = float(np.mean(scores))
        val_history.append((step_now, val_psnr))
        log({"step": step_now, "val_psnr": val_psnr})

    done = False
    while not done:
        order = data_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = train_images[order[lo : lo + config.batch_size]]
            report = distill_step(state, batch, gen)
            history.append(report)
            step = state.step - 1
            if step % config.log_every == 0:
                log({"step": step, "wall": time.perf_counter() - start, **report})
            if config.val_every and step > 0 and step % config.val_every == 0:
                validate(step)
            if config.ckpt_every and step > 0 and step % config.ckpt_every == 0:
                _save(out_dir / f"distill_step{step}.ckpt", state, meta)
            if state.step >= total_steps:
                done = True
                break

    validate(state.step)
    final_path = _save(out_dir / "distill_final.ckpt", state, meta)
    return DistillResult(
        checkpoint_path=final_path,
        log_path=log_path,
        loss_history=history,
        val_psnr_history=val_history,
    )


def _save(path: Path, state: DistillState, meta: dict | None) -> Path:
    tensors = {
        **module_arrays("encoder", state.encoder),
        **module_arrays("decoder", state.student),
        **module_arrays("discriminator", state.discriminator),
    }
    return save_checkpoint(path, tensors, meta={"kind": "distill", "step": state.step, **(meta or {})})
