"""Kinematics-preserving RDI augmentations and the stability-training noise.

All functions take a single image (PN, W, C) or a batch (N, PN, W, C);
the Doppler axis is -3 and the range axis is -2.
"""

from dataclasses import dataclass, replace

import numpy as np

from srw.radar import RDISample


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.1
    max_shift: int = 5
    noise_sigma: float = 0.01
    zero_fill: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.max_shift < 0:
            raise ValueError(f"max_shift must be >= 0, got {self.max_shift}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _apply(sample, fn):
    if isinstance(sample, RDISample):
        return replace(sample, x=fn(sample.x))
    return fn(np.asarray(sample))


def doppler_mirror_index(n_doppler):
    """Row permutation mirroring the Doppler axis about the zero-velocity row.

    Zero velocity sits at row n/2, so row d maps to n - d; row 0 (the most
    negative bin) has no partner inside the axis and stays in place.
    """
    return (n_doppler - np.arange(n_doppler)) % n_doppler


def flip_doppler(sample):
    def fn(x):
        return x[..., doppler_mirror_index(x.shape[-3]), :, :]
    return _apply(sample, fn)


def shift_range(sample, shift, zero_fill=False, max_shift=None):
    """Move content ``shift`` bins further out in range.

    Bins below ``shift`` keep their original values unless ``zero_fill``.
    """
    shift = int(shift)
    if shift < 0 or (max_shift is not None and shift > max_shift):
        raise ValueError(f"range shift {shift} outside [0, {max_shift}]")

    def fn(x):
        width = x.shape[-2]
        if shift >= width:
            raise ValueError(f"range shift {shift} >= range bins {width}")
        if shift == 0:
            return x.copy()
        out = x.copy()
        out[..., shift:, :] = x[..., : width - shift, :]
        if zero_fill:
            out[..., :shift, :] = 0
        return out
    return _apply(sample, fn)


def add_gaussian_noise(batch, sigma, rng):
    """Pixel-wise i.i.d. N(0, sigma^2) noise; ``sigma`` is a standard deviation."""
    batch = np.asarray(batch)
    if sigma == 0:
        return batch.copy()
    return (batch + rng.normal(0.0, sigma, size=batch.shape)).astype(batch.dtype, copy=False)


def make_stability_batch(batch, sigma, rng):
    """[x; x + noise] with the clean half first; row i pairs with row i + N."""
    batch = np.asarray(batch)
    return np.concatenate([batch, add_gaussian_noise(batch, sigma, rng)], axis=0)


def augment_batch(batch, config, rng):
    """Random range shift on every frame, Doppler flip on a random subset."""
    out = np.empty_like(batch)
    shifts = rng.integers(0, config.max_shift + 1, size=len(batch))
    flips = rng.random(len(batch)) < config.flip_prob
    for i, x in enumerate(batch):
        x = shift_range(x, shifts[i], zero_fill=config.zero_fill)
        out[i] = flip_doppler(x) if flips[i] else x
    return out
