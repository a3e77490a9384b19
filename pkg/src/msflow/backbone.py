"""Networks: latent-token encoder, conditional velocity model, patch
discriminator, and the frozen feature pyramid used for perceptual and
distributional comparisons.

Everything is sized for a single workstation. The velocity model is
resolution-polymorphic: one set of weights serves every rung of the scale
ladder because patch tokens carry rotary phases computed from their normalized
grid coordinates rather than absolute indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters shared by the encoder and the velocity model."""

    width: int = 128
    depth: int = 4
    heads: int = 4
    patch_size: int = 8
    num_latent_tokens: int = 32
    latent_token_dim: int = 32
    encoder_depth: int = 2
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} must divide into {self.heads} heads")
        if (self.width // self.heads) % 4 != 0:
            raise ValueError("head dim must be a multiple of 4 for 2-D rotary phases")


def sinusoidal_time_embedding(t: torch.Tensor, dim: int, max_period: float = 10_000.0) -> torch.Tensor:
    """Map times in [0, 1] to a ``dim``-wide sinusoidal feature vector."""
    half = dim // 2
    device, dtype = t.device, t.dtype
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, device=device, dtype=dtype) / half)
    args = t[:, None] * 1000.0 * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def _grid_coords(grid_h: int, grid_w: int, device, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    # Cell-center coordinates normalized to [0, 1): the same image content
    # lands at the same coordinate regardless of stage resolution.
    rows = (torch.arange(grid_h, device=device, dtype=dtype) + 0.5) / grid_h
    cols = (torch.arange(grid_w, device=device, dtype=dtype) + 0.5) / grid_w
    rr = rows[:, None].expand(grid_h, grid_w).reshape(-1)
    cc = cols[None, :].expand(grid_h, grid_w).reshape(-1)
    return rr, cc


def rotary_phases_2d(
    grid_h: int,
    grid_w: int,
    head_dim: int,
    device=None,
    dtype=torch.float32,
    box: float = 16.0,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-token cos/sin tables for axial 2-D rotary attention.

    Half the rotation pairs encode the row coordinate, half the column, both
    scaled into a fixed ``box`` so phases are comparable across grid sizes.
    Returns (cos, sin), each of shape (T, head_dim // 2).
    """
    if head_dim % 4 != 0:
        raise ValueError(f"head_dim must be a multiple of 4, got {head_dim}")
    quarter = head_dim // 4
    rr, cc = _grid_coords(grid_h, grid_w, device, dtype)
    inv_freq = 1.0 / (100.0 ** (torch.arange(quarter, device=device, dtype=dtype) / max(quarter, 1)))
    angles = torch.cat([rr[:, None] * box * inv_freq[None, :], cc[:, None] * box * inv_freq[None, :]], dim=-1)
    return angles.cos(), angles.sin()


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate consecutive feature pairs of ``x`` (..., T, head_dim) by the
    per-token phases."""
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def coordinate_features(grid_h: int, grid_w: int, dim: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal 2-D position features over normalized coordinates, (T, dim)."""
    quarter = dim // 4
    rr, cc = _grid_coords(grid_h, grid_w, device, dtype)
    freqs = 2.0 ** torch.arange(quarter, device=device, dtype=dtype) * math.pi
    feats = [
        torch.sin(rr[:, None] * freqs),
        torch.cos(rr[:, None] * freqs),
        torch.sin(cc[:, None] * freqs),
        torch.cos(cc[:, None] * freqs),
    ]
    out = torch.cat(feats, dim=-1)
    if out.shape[-1] < dim:
        out = F.pad(out, (0, dim - out.shape[-1]))
    return out


class Attention(nn.Module):
    """Multi-head attention; self-attention when ``ctx`` is None, otherwise
    cross-attention from ``x`` queries to ``ctx`` keys/values."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.to_q = nn.Linear(width, width)
        self.to_kv = nn.Linear(width, 2 * width)
        self.proj = nn.Linear(width, width)

    def forward(self, x, ctx=None, rope=None):
        b, t, _ = x.shape
        source = x if ctx is None else ctx
        q = self.to_q(x).view(b, t, self.heads, self.head_dim).transpose(1, 2)
        kv = self.to_kv(source).view(b, source.shape[1], self.heads, 2 * self.head_dim).transpose(1, 2)
        k, v = kv.chunk(2, dim=-1)
        if rope is not None:
            cos, sin = rope
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, t, -1))


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention, optional cross-attention, MLP."""

    def __init__(self, width: int, heads: int, mlp_ratio: float = 4.0, cross: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.cross = None
        if cross:
            self.norm_ctx = nn.LayerNorm(width)
            self.cross = Attention(width, heads)
        hidden = int(width * mlp_ratio)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x, ctx=None, rope=None):
        x = x + self.attn(self.norm1(x), rope=rope)
        if self.cross is not None and ctx is not None:
            x = x + self.cross(self.norm_ctx(x), ctx=ctx)
        return x + self.mlp(self.norm2(x))


class _PatchTokens(nn.Module):
    """Patchify an image into width-wide tokens plus coordinate features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.patch_size = config.patch_size
        self.embed = nn.Conv2d(config.in_channels, config.width, config.patch_size, stride=config.patch_size)
        self.coord_proj = nn.Linear(config.width, config.width)

    def forward(self, x):
        p = self.patch_size
        if x.shape[-2] % p != 0 or x.shape[-1] % p != 0:
            raise ValueError(f"spatial dims {tuple(x.shape[-2:])} must be divisible by patch size {p}")
        tokens = self.embed(x)
        gh, gw = tokens.shape[-2:]
        tokens = tokens.flatten(2).transpose(1, 2)  # (B, T, width)
        coords = coordinate_features(gh, gw, tokens.shape[-1], device=x.device, dtype=tokens.dtype)
        return tokens + self.coord_proj(coords)[None], (gh, gw)


class Encoder(nn.Module):
    """Compresses an image into a fixed-length sequence of latent tokens.

    A stack of self-attention blocks over patch tokens is read out by a set of
    learned query tokens via cross-attention, so the latent length is a
    constant of the model, independent of image resolution.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patches = _PatchTokens(config)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.width, config.heads, config.mlp_ratio) for _ in range(config.encoder_depth)
        )
        self.queries = nn.Parameter(torch.randn(config.num_latent_tokens, config.width) * 0.02)
        self.reader = TransformerBlock(config.width, config.heads, config.mlp_ratio, cross=True)
        self.norm_out = nn.LayerNorm(config.width)
        self.proj_out = nn.Linear(config.width, config.latent_token_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        tokens, (gh, gw) = self.patches(images)
        rope = rotary_phases_2d(gh, gw, self.config.width // self.config.heads, device=images.device, dtype=tokens.dtype)
        for block in self.blocks:
            tokens = block(tokens, rope=rope)
        queries = self.queries[None].expand(images.shape[0], -1, -1)
        queries = self.reader(queries, ctx=tokens)
        return self.proj_out(self.norm_out(queries))


class VelocityModel(nn.Module):
    """Conditional velocity field over noisy image grids.

    Maps (noisy image, time, latent tokens) to a velocity of the same spatial
    shape. A learned null-condition token set stands in for the latent when
    conditioning is dropped or guidance needs an unconditional branch.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.patches = _PatchTokens(config)
        self.time_mlp = nn.Sequential(nn.Linear(config.width, config.width), nn.GELU(), nn.Linear(config.width, config.width))
        self.latent_proj = nn.Linear(config.latent_token_dim, config.width)
        self.null_condition = nn.Parameter(torch.randn(config.num_latent_tokens, config.latent_token_dim) * 0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(config.width, config.heads, config.mlp_ratio, cross=True) for _ in range(config.depth)
        )
        self.norm_out = nn.LayerNorm(config.width)
        out_dim = config.in_channels * config.patch_size ** 2
        self.proj_out = nn.Linear(config.width, out_dim)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def null_tokens(self, batch: int) -> torch.Tensor:
        return self.null_condition[None].expand(batch, -1, -1)

    def forward(self, x: torch.Tensor, t, cond: torch.Tensor | None = None) -> torch.Tensor:
        if not torch.isfinite(x).all():
            raise ValueError("velocity model input contains non-finite values")
        b, c, h, w = x.shape
        if not torch.is_tensor(t):
            t = torch.full((b,), float(t), device=x.device, dtype=x.dtype)
        t = t.reshape(-1)
        if t.numel() == 1 and b > 1:
            t = t.expand(b)
        if ((t < 0) | (t > 1)).any():
            raise ValueError(f"time must lie in [0, 1], got {t}")
        if cond is None:
            cond = self.null_tokens(b)

        tokens, (gh, gw) = self.patches(x)
        tokens = tokens + self.time_mlp(sinusoidal_time_embedding(t.to(tokens.dtype), tokens.shape[-1]))[:, None, :]
        ctx = self.latent_proj(cond)
        rope = rotary_phases_2d(gh, gw, self.config.width // self.config.heads, device=x.device, dtype=tokens.dtype)
        for block in self.blocks:
            tokens = block(tokens, ctx=ctx, rope=rope)
        out = self.proj_out(self.norm_out(tokens))

        # tokens -> patches -> image
        p = self.config.patch_size
        out = out.view(b, gh, gw, c, p, p)
        return out.permute(0, 3, 1, 4, 2, 5).reshape(b, c, h, w)


class FeaturePyramid(nn.Module):
    """Frozen fixed-seed convolutional feature stack.

    Serves three pluggable roles at desk scale: perceptual-loss features, the
    discriminator's input features, and the pooled features behind the
    reconstruction Frechet distance. Deterministic by construction; expects
    images in [-1, 1].
    """

    input_range = (-1.0, 1.0)

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = (16, 32, 64, 96), in_channels: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(int(seed))
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            stride = 1 if i == 0 else 2
            conv = nn.Conv2d(prev, ch, kernel_size=3, stride=stride, padding=1)
            # Orthogonal-ish random features: unit-variance kaiming draw.
            with torch.no_grad():
                fan_in = prev * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
            layers.append(conv)
            prev = ch
        self.convs = nn.ModuleList(layers)
        self.out_channels = tuple(channels)
        self.requires_grad_(False)
        self.eval()

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = images
        for conv in self.convs:
            h = F.gelu(conv(h))
            feats.append(h)
        return feats


class PooledFeatures(nn.Module):
    """Adapter turning a feature-map extractor into one vector per image."""

    def __init__(self, extractor: nn.Module):
        super().__init__()
        self.extractor = extractor

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        feats = perceptual_features(self.extractor, images)
        return torch.cat([f.mean(dim=(2, 3)) for f in feats], dim=1)


class _SpectralResBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.utils.spectral_norm(nn.Conv2d(width, width, 3, padding=1))
        self.conv2 = nn.utils.spectral_norm(nn.Conv2d(width, width, 3, padding=1))

    def forward(self, x):
        h = self.conv2(F.silu(self.conv1(F.silu(x))))
        return x + h


class Discriminator(nn.Module):
    """Patch-level realness classifier over frozen extractor features.

    Spectrally normalized residual convolutions score each feature patch; the
    per-image score is the sigmoid of the mean patch logit, clamped strictly
    inside (0, 1) so both adversarial log terms stay finite. The final layer
    is zero-initialized, so a fresh discriminator scores exactly 0.5.
    """

    score_eps = 1e-6

    def __init__(self, feature_extractor: nn.Module | None = None, width: int = 64, seed: int = 101):
        super().__init__()
        self.features = feature_extractor if feature_extractor is not None else FeaturePyramid(seed=seed)
        self.features.requires_grad_(False)
        in_ch = self.features.out_channels[-1] if hasattr(self.features, "out_channels") else 96
        self.stem = nn.utils.spectral_norm(nn.Conv2d(in_ch, width, 1))
        self.res1 = _SpectralResBlock(width)
        self.res2 = _SpectralResBlock(width)
        self.head = nn.Conv2d(width, 1, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def patch_logits(self, images: torch.Tensor) -> torch.Tensor:
        feat = self.features(images)[-1]
        h = self.res2(self.res1(self.stem(feat)))
        return self.head(h)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        logits = self.patch_logits(images).mean(dim=(1, 2, 3))
        score = torch.sigmoid(logits)
        return score.clamp(self.score_eps, 1.0 - self.score_eps)


def encode(model: Encoder, images: torch.Tensor) -> torch.Tensor:
    """Latent tokens for a batch of images, (B, num_tokens, token_dim)."""
    return model(images)


def velocity(model: VelocityModel, x: torch.Tensor, t, cond: torch.Tensor | None) -> torch.Tensor:
    """Velocity field with the same shape as ``x``; ``cond=None`` selects the
    learned null condition (unconditional branch)."""
    return model(x, t, cond)


def discriminate(disc: Discriminator, images: torch.Tensor) -> torch.Tensor:
    """Per-image realness scores, each strictly inside (0, 1)."""
    return disc(images)


def perceptual_features(extractor: nn.Module, images: torch.Tensor) -> list[torch.Tensor]:
    """Feature maps from a frozen extractor, adapting the input value range
    when the extractor declares one other than [-1, 1]."""
    lo, hi = getattr(extractor, "input_range", (-1.0, 1.0))
    if (lo, hi) != (-1.0, 1.0):
        images = (images + 1.0) * (0.5 * (hi - lo)) + lo
    return extractor(images)


def build_tokenizer(config: ModelConfig, seed: int = 0) -> tuple[Encoder, VelocityModel]:
    """Encoder/velocity-model pair with seeded initialization."""
    torch.manual_seed(int(seed))
    return Encoder(config), VelocityModel(config)
