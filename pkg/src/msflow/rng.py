"""Deterministic seed derivation.

All stochastic components take an explicit ``torch.Generator`` so a run is a
pure function of its seed. Sub-streams are split off by hashing the base seed
with string tags, which keeps independent consumers (data order, sampler
noise, condition dropout) decoupled.
"""

from __future__ import annotations

import hashlib

import torch


def stable_seed(base_seed: int, *tags) -> int:
    """64-bit seed derived from ``base_seed`` and any hashable tags."""
    text = ":".join([str(int(base_seed))] + [str(t) for t in tags])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_generator(seed: int, *tags) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(stable_seed(seed, *tags) if tags else int(seed))
    return gen
