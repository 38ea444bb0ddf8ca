"""Synthetic datasets and the stochastic augmentation pipeline."""

from __future__ import annotations

import numpy as np

from .config import AugmentationSpec, DatasetSpec
from .errors import ConfigError, NumericError
from .tensor import Tensor


def synthesize_dataset(spec: DatasetSpec, seed: int) -> tuple[Tensor, np.ndarray]:
    """Deterministic labelled dataset for the requested mode.

    gaussian-mixture: class means drawn uniformly on a sphere, samples are
    mean + std*noise. tiny-grid: per-class binary pixel templates plus noise.
    Classes are balanced (exactly samples/num_classes each when divisible)
    and rows are shuffled.
    """
    spec.validate()
    rng = np.random.default_rng([seed, 0xDA7A])
    m, d, c = spec.samples, spec.input_dim, spec.num_classes

    per_class = np.full(c, m // c, dtype=np.int64)
    per_class[: m % c] += 1
    labels = np.repeat(np.arange(c), per_class)

    if spec.mode == "gaussian-mixture":
        means = rng.standard_normal((c, d))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= spec.cluster_radius
        inputs = means[labels] + spec.cluster_std * rng.standard_normal((m, d))
    elif spec.mode == "tiny-grid":
        side = int(round(d**0.5))
        templates = 3.0 * rng.integers(0, 2, size=(c, d)).astype(np.float64)
        inputs = templates[labels] + spec.cluster_std * rng.standard_normal((m, d))
    else:
        raise ConfigError(f"unknown dataset mode {spec.mode!r}")

    order = rng.permutation(m)
    return Tensor(inputs[order]), labels[order]


def augment(
    x: Tensor,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    grid_side: int | None = None,
) -> Tensor:
    """One stochastic view: scale -> noise -> mask (-> crop on grids).

    Randomness comes from the caller's generator, so two calls on the same
    batch yield two independent views.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NumericError("augmentation input must be finite")
    n, d = data.shape
    out = data.copy()

    lo, hi = spec.random_scale_range
    if (lo, hi) != (1.0, 1.0):
        out *= rng.uniform(lo, hi, size=(n, 1))
    if spec.gaussian_noise_std > 0:
        out += spec.gaussian_noise_std * rng.standard_normal((n, d))
    if spec.coordinate_mask_prob > 0:
        out *= rng.random((n, d)) >= spec.coordinate_mask_prob
    if grid_side is not None and spec.crop_fraction < 1.0:
        out = _random_window_crop(out, grid_side, spec.crop_fraction, rng)
    return Tensor(out)


def _random_window_crop(
    flat: np.ndarray, side: int, fraction: float, rng: np.random.Generator
) -> np.ndarray:
    """Keep one random square window per sample, zero everything outside."""
    window = max(1, int(round(side * fraction)))
    n = flat.shape[0]
    grids = flat.reshape(n, side, side)
    kept = np.zeros_like(grids)
    max_off = side - window
    rows = rng.integers(0, max_off + 1, size=n)
    cols = rng.integers(0, max_off + 1, size=n)
    for i in range(n):
        r, c = rows[i], cols[i]
        kept[i, r : r + window, c : c + window] = grids[i, r : r + window, c : c + window]
    return kept.reshape(n, side * side)
