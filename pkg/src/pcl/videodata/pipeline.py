"""Raw frames -> encoder-ready clip: sample, crop/augment, optional residual."""
from __future__ import annotations

from .augment import AugmentConfig, augment
from .clip import Clip, as_rng, sample_clip, to_residual


def prepare_clip(frames, start, n_frames: int, aug: AugmentConfig, rng=None,
                 residual: bool = False, random_crop: bool = True, resize=None) -> Clip:
    """Residual mode reads ``n_frames + 1`` frames so the output keeps ``n_frames``.

    Augmentation runs on raw frames before differencing.
    """
    rng = as_rng(rng)
    need = n_frames + 1 if residual else n_frames
    clip = sample_clip(frames, start, need, rng, resize=resize)
    clip = augment(clip, aug, rng, random_crop=random_crop)
    return to_residual(clip) if residual else clip


def clip_span(n_frames: int, residual: bool) -> int:
    return n_frames + 1 if residual else n_frames


def uniform_starts(length: int, span: int, count: int):
    """``count`` evenly spaced start frames covering a video of ``length``."""
    last = length - span
    if last < 0:
        return []
    if count == 1:
        return [last // 2]
    return [int(round(i * last / (count - 1))) for i in range(count)]
