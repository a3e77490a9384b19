"""Dataset construction: image-folder ingestion and the procedural texture
set used for desk-scale runs.

All emitted images are float32 CHW in [-1, 1] at the configured resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic_textures"
    resolution: int = 64
    split: str = "train"

    def __post_init__(self):
        if self.kind not in ("image_folder", "synthetic_textures"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.split not in ("train", "val"):
            raise ValueError(f"split must be train or val, got {self.split!r}")


def preprocess(image, resolution: int) -> np.ndarray:
    """Center-crop to square on the shorter side, resize, and map to [-1, 1].

    Accepts a PIL image or an (H, W, 3) uint8 array; returns float32 (3, R, R).
    """
    from PIL import Image

    if isinstance(image, np.ndarray):
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) array, got shape {image.shape}")
        image = Image.fromarray(image.astype(np.uint8), mode="RGB")
    image = image.convert("RGB")
    w, h = image.size
    if min(w, h) < 16:
        raise ValueError(f"image too small to preprocess: {w}x{h}")
    side = min(w, h)
    left = (w - side) // 2
    top = (h - side) // 2
    image = image.crop((left, top, left + side, top + side))
    if image.size != (resolution, resolution):
        image = image.resize((resolution, resolution), Image.BILINEAR)
    arr = np.asarray(image, dtype=np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_image_folder(path: str | Path, resolution: int) -> np.ndarray:
    """Preprocess every readable image under ``path``; unreadable files are
    skipped with a log line rather than failing the run."""
    path = Path(path)
    if not path.is_dir():
        raise ValueError(f"image folder {path} does not exist")
    files = sorted(p for p in path.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS)
    images = []
    from PIL import Image

    for p in files:
        try:
            with Image.open(p) as img:
                images.append(preprocess(img, resolution))
        except Exception as err:  # corrupt or undecodable: skip with log
            log.warning("skipping unreadable image %s: %s", p, err)
    if not images:
        raise ValueError(f"no decodable images found under {path}")
    return np.stack(images)


def _coords(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(0.0, 1.0, resolution, dtype=np.float32)
    return np.meshgrid(axis, axis, indexing="ij")


def _gradient(rng: np.random.Generator, resolution: int) -> np.ndarray:
    yy, xx = _coords(resolution)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.0) / 2.0
    c0 = rng.uniform(-1, 1, size=3)
    c1 = rng.uniform(-1, 1, size=3)
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def _checkerboard(rng: np.random.Generator, resolution: int) -> np.ndarray:
    # Log-uniform cell sizes cover several octaves of spatial frequency.
    cell = int(2 ** rng.integers(1, int(np.log2(resolution)) - 1))
    phase = rng.integers(0, cell, size=2)
    yy, xx = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    mask = (((yy + phase[0]) // cell) + ((xx + phase[1]) // cell)) % 2
    c0 = rng.uniform(-1, 1, size=3)
    c1 = rng.uniform(-1, 1, size=3)
    return np.where(mask[None], c0[:, None, None], c1[:, None, None]).astype(np.float32)


def _blobs(rng: np.random.Generator, resolution: int) -> np.ndarray:
    yy, xx = _coords(resolution)
    img = np.tile(rng.uniform(-0.8, 0.2, size=3)[:, None, None].astype(np.float32), (1, resolution, resolution))
    for _ in range(rng.integers(2, 7)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        sigma = rng.uniform(0.04, 0.25)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        color = rng.uniform(-1, 1, size=3)
        img += color[:, None, None] * bump[None]
    return img


def _strokes(rng: np.random.Generator, resolution: int) -> np.ndarray:
    yy, xx = _coords(resolution)
    bg = rng.choice([-0.9, 0.9])
    img = np.full((3, resolution, resolution), bg, dtype=np.float32)
    ink = -bg * rng.uniform(0.6, 1.0, size=3)
    for _ in range(rng.integers(3, 9)):
        a = rng.uniform(0.05, 0.95, size=2)
        b = a + rng.uniform(-0.4, 0.4, size=2)
        b = np.clip(b, 0.02, 0.98)
        # distance from each pixel to the segment a-b
        d = b - a
        length_sq = max(float(d @ d), 1e-8)
        t = np.clip(((xx - a[0]) * d[0] + (yy - a[1]) * d[1]) / length_sq, 0.0, 1.0)
        dist = np.sqrt((xx - (a[0] + t * d[0])) ** 2 + (yy - (a[1] + t * d[1])) ** 2)
        width = rng.uniform(0.8, 2.0) / resolution
        mask = dist < width
        img[:, mask] = ink[:, None]
    return img


_GENERATORS = (_gradient, _checkerboard, _blobs, _strokes)


def synthetic_dataset(n: int, resolution: int, seed: int) -> np.ndarray:
    """Deterministic procedural images covering low and high frequency
    content: gradients, checkerboards, Gaussian blobs, and stroke marks.

    Same (n, resolution, seed) always yields a bit-identical array.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    children = np.random.SeedSequence(seed).spawn(n)
    out = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        image = _GENERATORS[i % len(_GENERATORS)](rng, resolution)
        if rng.uniform() < 0.3:  # occasional composite for mixed-band content
            overlay = _GENERATORS[int(rng.integers(len(_GENERATORS)))](rng, resolution)
            image = 0.7 * image + 0.3 * overlay
        out[i] = np.clip(image, -1.0, 1.0)
    return out


def build_dataset(
    kind: str,
    resolution: int,
    split: str,
    path: str | Path | None = None,
    num_images: int = 512,
    seed: int = 0,
) -> torch.Tensor:
    """Materialize a dataset split as a float32 tensor (N, 3, R, R)."""
    spec = DatasetSpec(kind=kind, resolution=resolution, split=split)
    if spec.kind == "synthetic_textures":
        from msflow.rng import stable_seed

        arr = synthetic_dataset(num_images, resolution, stable_seed(seed, "dataset", split) % (2**31))
        return torch.from_numpy(arr)

    if path is None:
        raise ValueError("image_folder datasets need a path")
    split_dir = Path(path) / split
    if split_dir.is_dir():
        arr = load_image_folder(split_dir, resolution)
    else:
        arr = load_image_folder(path, resolution)
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(arr))
        n_val = max(1, len(arr) // 10)
        arr = arr[order[n_val:]] if split == "train" else arr[order[:n_val]]
    return torch.from_numpy(arr)
