"""Joint encoder/decoder training with the per-stage velocity-regression
objective.

Each training example is assigned a random stage; the stage's start and end
states are built by corrupting area-downsampled versions of the clean image
with one shared noise draw, and the model regresses their difference (the
constant velocity of the linear path between them).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from msflow.backbone import Encoder, VelocityModel
from msflow.pipeline.checkpoint import module_arrays, optimizer_arrays, save_checkpoint
from msflow.resample import downsample_area, upsample
from msflow.rng import make_generator, stable_seed
from msflow.sampler import SamplerConfig, decode_multiscale
from msflow.schedules import ScaleSchedule


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; diagnostic state is dumped first."""


@dataclass
class StagePair:
    """Endpoints of one stage's linear path, and their difference.

    ``v_target`` is exactly ``x_t1 - x_t0``; ``tau`` is the sampled time the
    model is evaluated at (filled by the loss, not by endpoint construction).
    """

    x_t0: torch.Tensor
    x_t1: torch.Tensor
    v_target: torch.Tensor
    stage: int
    t_start: float
    t_end: float
    tau: torch.Tensor | float | None = None


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    warmup_epochs: float = 1.0
    grad_clip: float = 1.0
    precision: str = "float32"
    cond_drop_prob: float = 0.1
    stage_weighting: str = "uniform"
    max_steps: int | None = None
    log_every: int = 25
    val_every: int = 250
    val_at: tuple[int, ...] | None = None  # explicit validation steps, overrides val_every
    ckpt_every: int = 1000
    val_cfg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.grad_clip <= 0:
            raise ValueError(f"grad_clip must be > 0, got {self.grad_clip}")
        if self.precision not in ("float32", "bfloat16"):
            raise ValueError(f"precision must be float32 or bfloat16, got {self.precision!r}")
        if self.stage_weighting not in ("uniform", "pixel"):
            raise ValueError(f"stage_weighting must be uniform or pixel, got {self.stage_weighting!r}")
        if not 0.0 <= self.cond_drop_prob < 1.0:
            raise ValueError(f"cond_drop_prob must be in [0, 1), got {self.cond_drop_prob}")


def stage_endpoints(
    x: torch.Tensor,
    s: int,
    noise: torch.Tensor,
    schedule: ScaleSchedule,
    upsample_mode: str = "bilinear",
) -> StagePair:
    """Start/end states of stage ``s`` for clean images ``x``.

    The end state corrupts the image downsampled to the stage resolution at
    the stage's end time. The start state corrupts the previous (coarser)
    stage's image, upsampled to the stage resolution, at the start time; for
    the first stage the signal term is zero so decoding starts from what
    inference starts from.
    """
    if not 1 <= s <= schedule.num_stages:
        raise ValueError(f"stage index {s} out of range 1..{schedule.num_stages}")
    res = schedule.resolutions[s - 1]
    if tuple(x.shape[-2:]) != schedule.final_resolution:
        raise ValueError(f"clean images must be at full resolution {schedule.final_resolution}, got {tuple(x.shape[-2:])}")
    if tuple(noise.shape) != (x.shape[0], x.shape[1], *res):
        raise ValueError(f"noise must have shape {(x.shape[0], x.shape[1], *res)}, got {tuple(noise.shape)}")

    t0, t1 = schedule.stage_bounds[s - 1]
    x_t1 = t1 * downsample_area(x, res) + (1.0 - t1) * noise
    if s == 1:
        x_t0 = (1.0 - t0) * noise
    else:
        coarse = downsample_area(x, schedule.resolutions[s - 2])
        x_t0 = t0 * upsample(coarse, res, mode=upsample_mode) + (1.0 - t0) * noise
    return StagePair(x_t0=x_t0, x_t1=x_t1, v_target=x_t1 - x_t0, stage=s, t_start=t0, t_end=t1)


def interpolate_state(pair: StagePair, tau) -> torch.Tensor:
    """Linear interpolation between the pair's endpoints at time ``tau``.

    ``tau`` may be a scalar or a per-example tensor; every value must lie
    inside the pair's stage interval.
    """
    t = torch.as_tensor(tau, dtype=pair.x_t0.dtype)
    if ((t < pair.t_start) | (t > pair.t_end)).any():
        raise ValueError(f"tau {tau} outside stage interval [{pair.t_start}, {pair.t_end}]")
    w = (t - pair.t_start) / (pair.t_end - pair.t_start)
    w = w.reshape(-1, *([1] * (pair.x_t0.ndim - 1))) if w.ndim == 1 else w
    return pair.x_t0 + w * (pair.x_t1 - pair.x_t0)


def _sample_stages(schedule: ScaleSchedule, batch: int, weighting: str, generator: torch.Generator) -> torch.Tensor:
    if weighting == "uniform":
        return torch.randint(1, schedule.num_stages + 1, (batch,), generator=generator)
    pixels = torch.tensor([float(h * w) for h, w in schedule.resolutions])
    return torch.multinomial(pixels / pixels.sum(), batch, replacement=True, generator=generator) + 1


def stage1_loss(
    encoder: Encoder,
    model: VelocityModel,
    images: torch.Tensor,
    schedule: ScaleSchedule,
    generator: torch.Generator,
    cond_drop_prob: float = 0.0,
    stage_weighting: str = "uniform",
) -> tuple[torch.Tensor, dict]:
    """Velocity-regression loss for one clean batch.

    Per example: sample a stage and a time within it, build the interpolated
    state, and penalize the squared error between the predicted velocity and
    the endpoint difference. Conditioning falls back to the learned null
    tokens with probability ``cond_drop_prob``.
    """
    batch = images.shape[0]
    z = encoder(images)

    stages = _sample_stages(schedule, batch, stage_weighting, generator)
    u = torch.rand(batch, generator=generator)
    drop = torch.rand(batch, generator=generator) < cond_drop_prob

    per_example = images.new_zeros(batch)
    info: dict = {"per_stage_loss": {}, "per_stage_count": {}}
    for s in range(1, schedule.num_stages + 1):
        idx = torch.nonzero(stages == s, as_tuple=False).flatten()
        if idx.numel() == 0:
            continue
        res = schedule.resolutions[s - 1]
        noise = torch.randn(idx.numel(), images.shape[1], *res, generator=generator, dtype=images.dtype)
        pair = stage_endpoints(images[idx], s, noise, schedule)
        tau = pair.t_start + u[idx].to(images.dtype) * (pair.t_end - pair.t_start)
        pair.tau = tau
        x_tau = interpolate_state(pair, tau)

        cond = z[idx]
        sub_drop = drop[idx]
        if sub_drop.any():
            cond = torch.where(sub_drop[:, None, None], model.null_tokens(idx.numel()), cond)

        v_hat = model(x_tau, tau, cond)
        err = ((v_hat - pair.v_target) ** 2).mean(dim=(1, 2, 3))
        per_example[idx] = err
        info["per_stage_loss"][s] = float(err.detach().mean())
        info["per_stage_count"][s] = int(idx.numel())

    loss = per_example.mean()
    info["loss"] = float(loss.detach())
    return loss, info


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warm-up to ``base_lr`` then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    final_loss: float
    loss_history: list[float]
    val_psnr_history: list[tuple[int, float]]


def _dump_divergence(out_dir: Path, step: int, encoder, model, info: dict) -> Path:
    tensors = {**module_arrays("encoder", encoder), **module_arrays("decoder", model)}
    path = out_dir / f"diverged_step{step}.ckpt"
    save_checkpoint(path, tensors, meta={"kind": "diagnostic", "step": step, "info": info})
    return path


def train_stage1(
    encoder: Encoder,
    model: VelocityModel,
    train_images: torch.Tensor,
    config: Stage1Config,
    schedule: ScaleSchedule,
    out_dir: str | Path,
    val_images: torch.Tensor | None = None,
    meta: dict | None = None,
) -> TrainResult:
    """Optimize encoder and decoder jointly; writes JSONL logs and checkpoints.

    Raises:
        TrainingDiverged: on a non-finite loss, after dumping model state.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "stage1_log.jsonl"
    log_path.write_text("")  # fresh log per run

    n = train_images.shape[0]
    if n == 0:
        raise ValueError("training set is empty")
    steps_per_epoch = max(1, math.ceil(n / config.batch_size))
    total_steps = config.max_steps if config.max_steps is not None else config.epochs * steps_per_epoch
    warmup_steps = int(round(config.warmup_epochs * steps_per_epoch))

    params = list(encoder.parameters()) + list(model.parameters())
    optimizer = torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        weight_decay=config.weight_decay,
    )

    gen = make_generator(config.seed, "stage1")
    loss_history: list[float] = []
    val_history: list[tuple[int, float]] = []
    start = time.perf_counter()
    step = 0

    def log(record: dict):
        with open(log_path, "a") as f:
            f.write(json.dumps(record) + "\n")

    def validate(step_now: int):
        if val_images is None or len(val_images) == 0:
            return
        from msflow.metrics import psnr  # local import keeps module deps one-way

        encoder.eval()
        model.eval()
        with torch.no_grad():
            sub = val_images[: min(8, len(val_images))]
            z = encoder(sub)
            cfg = SamplerConfig(cfg_scale=config.val_cfg_scale, seed=config.seed)
            traj = decode_multiscale(model, z, schedule, cfg, generator=make_generator(config.seed, "val"))
            recon = traj.final.clamp(-1, 1)
            scores = [psnr(recon[i], sub[i], data_range=2.0) for i in range(sub.shape[0])]
        encoder.train()
        model.train()
        val_psnr = float(np.mean(scores))
        val_history.append((step_now, val_psnr))
        log({"step": step_now, "val_psnr": val_psnr})

    encoder.train()
    model.train()
    data_rng = np.random.default_rng(stable_seed(config.seed, "order"))
    done = False
    while not done:
        order = data_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = train_images[order[lo : lo + config.batch_size]]
            lr = cosine_warmup_lr(step, total_steps, warmup_steps, config.learning_rate)
            for group in optimizer.param_groups:
                group["lr"] = lr

            if config.precision == "bfloat16":
                with torch.autocast("cpu", dtype=torch.bfloat16):
                    loss, info = stage1_loss(
                        encoder, model, batch, schedule, gen,
                        cond_drop_prob=config.cond_drop_prob,
                        stage_weighting=config.stage_weighting,
                    )
                loss = loss.float()
            else:
                loss, info = stage1_loss(
                    encoder, model, batch, schedule, gen,
                    cond_drop_prob=config.cond_drop_prob,
                    stage_weighting=config.stage_weighting,
                )

            if not torch.isfinite(loss):
                dump = _dump_divergence(out_dir, step, encoder, model, info)
                log({"step": step, "event": "diverged", "dump": str(dump)})
                raise TrainingDiverged(f"non-finite loss at step {step}; state dumped to {dump}")

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            optimizer.step()

            loss_history.append(loss.item())
            if step % config.log_every == 0:
                log({"step": step, "loss": loss.item(), "lr": lr, "wall": time.perf_counter() - start})
            if config.val_at is not None:
                if step in config.val_at:
                    validate(step)
            elif config.val_every and step > 0 and step % config.val_every == 0:
                validate(step)
            if config.ckpt_every and step > 0 and step % config.ckpt_every == 0:
                _save(out_dir / f"stage1_step{step}.ckpt", encoder, model, optimizer, step, meta)

            step += 1
            if step >= total_steps:
                done = True
                break

    validate(step)
    final_path = _save(out_dir / "stage1_final.ckpt", encoder, model, optimizer, step, meta)
    return TrainResult(
        checkpoint_path=final_path,
        log_path=log_path,
        final_loss=loss_history[-1],
        loss_history=loss_history,
        val_psnr_history=val_history,
    )


def _save(path: Path, encoder, model, optimizer, step: int, meta: dict | None) -> Path:
    tensors = {**module_arrays("encoder", encoder), **module_arrays("decoder", model)}
    opt_tensors, opt_meta = optimizer_arrays("optimizer", optimizer)
    tensors.update(opt_tensors)
    full_meta = {"kind": "stage1", "step": step, "optimizer": opt_meta, **(meta or {})}
    return save_checkpoint(path, tensors, meta=full_meta)
