"""Multi-scale flow-matching image tokenizer.

Coarse-to-fine diffusion decoding over a doubling resolution ladder, plus
per-scale single-step distillation of the trained decoder.
"""

from msflow.backbone import Discriminator, Encoder, ModelConfig, VelocityModel, build_tokenizer
from msflow.distill import DistillConfig, setup_distillation, train_distill
from msflow.sampler import SamplerConfig, Trajectory, decode_multiscale, decode_singlescale
from msflow.schedules import (
    LINEAR_INTERPOLANT,
    NoiseInterpolant,
    ScaleSchedule,
    interpolant_coefficients,
    make_scale_schedule,
    scale_for_timestep,
    timestep_grid,
)
from msflow.train_stage1 import Stage1Config, train_stage1

__all__ = [
    "Discriminator",
    "DistillConfig",
    "Encoder",
    "LINEAR_INTERPOLANT",
    "ModelConfig",
    "NoiseInterpolant",
    "SamplerConfig",
    "ScaleSchedule",
    "Stage1Config",
    "Trajectory",
    "VelocityModel",
    "build_tokenizer",
    "decode_multiscale",
    "decode_singlescale",
    "interpolant_coefficients",
    "make_scale_schedule",
    "scale_for_timestep",
    "setup_distillation",
    "timestep_grid",
    "train_distill",
    "train_stage1",
]

__version__ = "0.1.0"
