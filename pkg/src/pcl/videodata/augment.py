"""Temporally consistent clip augmentation.

Every random parameter (crop window, jitter factors, grayscale/blur/flip
decisions) is drawn once per call and applied to all frames of the clip.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ConfigError, DomainError
from .clip import RAW, Clip, as_rng

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.596, -0.274, -0.322],
                     [0.211, -0.523, 0.312]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


@dataclass
class AugmentConfig:
    crop_size: tuple = (112, 112)
    # brightness, contrast, saturation, hue
    jitter_strength: tuple = (0.4, 0.4, 0.4, 0.1)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_sigma_range: tuple = (0.1, 2.0)
    blur_prob: float = 0.5
    flip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        self.crop_size = tuple(int(v) for v in self.crop_size)
        self.jitter_strength = tuple(float(v) for v in self.jitter_strength)
        self.blur_sigma_range = tuple(float(v) for v in self.blur_sigma_range)
        self.validate()

    def validate(self):
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(name, f"probability must be in [0, 1], got {p}")
        if len(self.crop_size) != 2 or min(self.crop_size) <= 0:
            raise ConfigError("crop_size", f"expected two positive ints, got {self.crop_size}")
        if len(self.jitter_strength) != 4 or min(self.jitter_strength) < 0:
            raise ConfigError("jitter_strength", "expected four non-negative magnitudes")
        if self.jitter_strength[3] > 0.5:
            raise ConfigError("jitter_strength", "hue magnitude must be <= 0.5")
        lo, hi = self.blur_sigma_range
        if not 0 < lo <= hi:
            raise ConfigError("blur_sigma_range", f"need 0 < lo <= hi, got {self.blur_sigma_range}")


def _grayscale(x):
    return np.tensordot(_LUMA, x, axes=(0, 0))[None]


def _brightness(x, f):
    return x * f


def _contrast(x, f):
    m = _grayscale(x).mean()
    return (x - m) * f + m


def _saturation(x, f):
    g = _grayscale(x)
    return g + (x - g) * f


def _hue(x, shift):
    theta = 2.0 * np.pi * shift
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = (_YIQ2RGB @ rot @ _RGB2YIQ).astype(np.float32)
    return np.tensordot(m, x, axes=(1, 0))


def crop_window(shape, crop_size, rng=None, random=True):
    """Top-left corner of the crop for a clip of spatial ``shape``."""
    h, w = shape
    ch, cw = crop_size
    if ch > h or cw > w:
        raise DomainError(f"crop {crop_size} larger than frames {shape}")
    if random:
        rng = as_rng(rng)
        return int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1))
    return (h - ch) // 2, (w - cw) // 2


def augment(clip: Clip, cfg: AugmentConfig, rng=None, random_crop: bool = True) -> Clip:
    """Crop, then (if ``cfg.enabled``) apply the strong augmentation chain."""
    if clip.domain != RAW:
        raise DomainError("augmentation expects raw clips; convert to residual afterwards")
    rng = as_rng(rng)
    top, left = crop_window(clip.spatial, cfg.crop_size, rng, random_crop)
    ch, cw = cfg.crop_size
    x = clip.data[:, :, top:top + ch, left:left + cw].astype(np.float32, copy=True)
    if not cfg.enabled:
        return Clip(x, RAW)

    b, c, s, h = cfg.jitter_strength
    if rng.random() < cfg.jitter_prob:
        ops = [
            (_brightness, rng.uniform(max(0.0, 1 - b), 1 + b)),
            (_contrast, rng.uniform(max(0.0, 1 - c), 1 + c)),
            (_saturation, rng.uniform(max(0.0, 1 - s), 1 + s)),
            (_hue, rng.uniform(-h, h)),
        ]
        for i in rng.permutation(len(ops)):
            fn, arg = ops[i]
            x = np.clip(fn(x, arg), 0.0, 1.0).astype(np.float32)
    if rng.random() < cfg.grayscale_prob:
        x = np.repeat(_grayscale(x), 3, axis=0).astype(np.float32)
    if rng.random() < cfg.blur_prob:
        sigma = rng.uniform(*cfg.blur_sigma_range)
        x = gaussian_filter(x, sigma=(0, 0, sigma, sigma), mode="reflect")
    if rng.random() < cfg.flip_prob:
        x = x[:, :, :, ::-1]
    return Clip(np.ascontiguousarray(np.clip(x, 0.0, 1.0), dtype=np.float32), RAW)
