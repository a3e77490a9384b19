"""Reconstruction quality and throughput metrics.

PSNR and SSIM are computed per image pair in float64. The reconstruction
Frechet distance works over any pluggable feature extractor; the desk-scale
default is a fixed-seed frozen convolutional net, so absolute values are
internally consistent but not comparable to published scores.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F


class NumericalFailure(RuntimeError):
    """Matrix square root did not converge even after jitter."""


def _to_f64(x) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x.detach() if torch.is_tensor(x) else x))
    return t.to(torch.float64)


def psnr(x, y, data_range: float, cap: float = 100.0) -> float:
    """Peak signal-to-noise ratio in dB.

    Parameters
    ----------
    x, y : array_like
      Images of identical shape.
    data_range : float
      Peak-to-peak range of the data (2.0 for images in [-1, 1]).
    cap : float
      Value returned for identical inputs, where the ratio is infinite.
    """
    if data_range <= 0:
        raise ValueError(f"data_range must be > 0, got {data_range}")
    a, b = _to_f64(x), _to_f64(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float(cap)
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(x, y, window_size: int = 11, sigma: float = 1.5, data_range: float = 2.0) -> float:
    """Mean structural similarity over a Gaussian-windowed local statistic map.

    Uses the standard stabilizers C1 = (0.01 * range)^2, C2 = (0.03 * range)^2
    and valid (un-padded) windows. Accepts (H, W), (C, H, W) or (B, C, H, W)
    inputs; channels are scored independently and averaged.
    """
    a, b = _to_f64(x), _to_f64(y)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    while a.ndim < 4:
        a, b = a[None], b[None]
    bsz, ch, h, w = a.shape
    if h < window_size or w < window_size:
        raise ValueError(f"image {h}x{w} smaller than the {window_size}x{window_size} window")

    kernel = _gaussian_window(window_size, sigma).expand(ch, 1, window_size, window_size)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(img):
        return F.conv2d(img, kernel, groups=ch)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(score.mean())


@dataclass
class FeatureStats:
    """Empirical first and second moments of pooled features."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean size {self.mean.size}")


def feature_stats(extractor: Callable, images: torch.Tensor) -> FeatureStats:
    """Mean and covariance of ``extractor(images)``, one feature row per image.

    The extractor must return a (B, D) matrix; ``PooledFeatures`` adapts
    feature-map extractors. Requires at least two samples.
    """
    with torch.no_grad():
        feats = extractor(images)
    arr = np.asarray(feats.detach().cpu().numpy() if torch.is_tensor(feats) else feats, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"extractor must return a (B, D) matrix, got shape {arr.shape}")
    if arr.shape[0] < 2:
        raise ValueError(f"need at least 2 samples for covariance, got {arr.shape[0]}")
    mean = arr.mean(axis=0)
    cov = np.cov(arr, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    return FeatureStats(mean=mean, cov=cov, count=arr.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _sqrt_trace_of_product(cov_a: np.ndarray, cov_b: np.ndarray, jitter: float = 1e-6) -> float:
    """Tr((cov_a cov_b)^(1/2)) via the symmetrized product, retrying once with
    diagonal jitter when the eigendecomposition misbehaves."""
    def attempt(a, b):
        root_a = _psd_sqrt(a)
        inner = root_a @ b @ root_a
        vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
        if vals.min() < -1e-3 * max(1.0, abs(vals.max())):
            raise np.linalg.LinAlgError("strongly negative eigenvalue in product root")
        return float(np.sqrt(np.clip(vals, 0.0, None)).sum())

    try:
        return attempt(cov_a, cov_b)
    except np.linalg.LinAlgError:
        eye = np.eye(cov_a.shape[0])
        try:
            return attempt(cov_a + jitter * eye, cov_b + jitter * eye)
        except np.linalg.LinAlgError as err:
            raise NumericalFailure(f"matrix square root failed even with jitter {jitter}") from err


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between two Gaussians summarized by ``FeatureStats``:
    squared mean gap plus the covariance term
    Tr(cov_a + cov_b - 2 (cov_a cov_b)^(1/2)). Symmetric and non-negative."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * _sqrt_trace_of_product(a.cov, b.cov))
    return max(value, 0.0)


@dataclass
class ThroughputResult:
    images_per_second: float
    total_images: int
    elapsed_seconds: float
    forward_passes: int
    batch_seconds: list[float] = field(default_factory=list)


def measure_throughput(
    decode_fn: Callable,
    batch_source: Iterable,
    warmup_batches: int = 1,
    timed_batches: int = 4,
) -> ThroughputResult:
    """Wall-clock decoding rate after warm-up, excluding data loading.

    Batches are materialized up front; ``decode_fn`` is called once per batch
    and may return a trajectory-like object carrying ``forward_passes``.
    """
    if timed_batches < 1:
        raise ValueError(f"timed_batches must be >= 1, got {timed_batches}")
    batches = []
    it = iter(batch_source)
    for _ in range(warmup_batches + timed_batches):
        try:
            batches.append(next(it))
        except StopIteration:
            raise ValueError(f"batch_source yielded only {len(batches)} of {warmup_batches + timed_batches} batches")

    for batch in batches[:warmup_batches]:
        decode_fn(batch)

    total_images = 0
    forward_passes = 0
    batch_seconds = []
    tic = time.perf_counter()
    for batch in batches[warmup_batches:]:
        t0 = time.perf_counter()
        result = decode_fn(batch)
        batch_seconds.append(time.perf_counter() - t0)
        total_images += int(batch.shape[0]) if hasattr(batch, "shape") else len(batch)
        forward_passes += int(getattr(result, "forward_passes", 0))
    elapsed = time.perf_counter() - tic
    return ThroughputResult(
        images_per_second=total_images / elapsed,
        total_images=total_images,
        elapsed_seconds=elapsed,
        forward_passes=forward_passes,
        batch_seconds=batch_seconds,
    )


@dataclass
class MetricsReport:
    """One evaluation row: fidelity metrics plus decoding cost."""

    rfid: float
    psnr_mean: float
    ssim_mean: float
    throughput: float
    forward_pass_count: int
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.throughput <= 0:
            raise ValueError(f"throughput must be > 0, got {self.throughput}")

    def as_dict(self) -> dict:
        return {
            "rfid": self.rfid,
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
            "throughput": self.throughput,
            "forward_pass_count": self.forward_pass_count,
            "config_fingerprint": self.config_fingerprint,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)
