"""Shared fixtures: tiny model configs and stub networks sized for fast tests."""

from types import SimpleNamespace

import pytest
import torch

from msflow.backbone import ModelConfig, build_tokenizer


class StubVelocity(torch.nn.Module):
    """Velocity-model stand-in driven by a plain function.

    Counts forward invocations and the number of batch rows evaluated, so
    tests can verify call/evaluation accounting. Carries the same conditioning
    surface as the real model (null tokens, channel config).
    """

    def __init__(self, fn, channels=3, num_latent_tokens=4, latent_token_dim=8):
        super().__init__()
        self.fn = fn
        self.calls = 0
        self.rows = 0
        self.config = SimpleNamespace(in_channels=channels)
        self.null_condition = torch.nn.Parameter(torch.zeros(num_latent_tokens, latent_token_dim))

    def null_tokens(self, batch):
        return self.null_condition[None].expand(batch, -1, -1)

    def forward(self, x, t, cond=None):
        self.calls += 1
        self.rows += x.shape[0]
        if cond is None:
            cond = self.null_tokens(x.shape[0])
        return self.fn(x, t, cond)


def zero_velocity(**kwargs) -> StubVelocity:
    return StubVelocity(lambda x, t, cond: torch.zeros_like(x), **kwargs)


def constant_velocity(value: float, **kwargs) -> StubVelocity:
    return StubVelocity(lambda x, t, cond: torch.full_like(x, value), **kwargs)


def cond_sensitive_velocity(cond_value: float, null_value: float, **kwargs) -> StubVelocity:
    """Constant field whose level depends on whether conditioning is the null
    embedding (all zeros) or not."""

    def fn(x, t, cond):
        is_null = cond.abs().sum(dim=(1, 2)) == 0
        levels = torch.where(is_null, torch.tensor(null_value), torch.tensor(cond_value))
        return levels.view(-1, 1, 1, 1).expand_as(x).clone()

    return StubVelocity(fn, **kwargs)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        width=32,
        depth=1,
        heads=2,
        patch_size=4,
        num_latent_tokens=4,
        latent_token_dim=8,
        encoder_depth=1,
    )


@pytest.fixture
def tiny_models(tiny_config):
    return build_tokenizer(tiny_config, seed=0)
