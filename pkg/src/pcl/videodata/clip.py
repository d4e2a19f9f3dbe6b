"""Clip container, clip sampling and residual conversion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from ..errors import BoundsError, DomainError, InputError

RAW = "raw"
RESIDUAL = "residual"


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts.

    Used for per-item randomness, e.g. ``derive_seed(seed, video_id, epoch, i)``,
    so that workers and resumed runs draw the same numbers.
    """
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") >> 1


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass
class Clip:
    """Stacked frames laid out as ``[3, T, H, W]`` (float32)."""

    data: np.ndarray
    domain: str = RAW

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != 3:
            raise InputError(f"clip must be [3,T,H,W], got {self.data.shape}")
        if min(self.data.shape[1:]) <= 0:
            raise InputError(f"empty clip {self.data.shape}")
        if self.domain not in (RAW, RESIDUAL):
            raise DomainError(f"unknown value domain {self.domain!r}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> tuple:
        return self.data.shape[2], self.data.shape[3]

    def copy(self) -> "Clip":
        return Clip(self.data.copy(), self.domain)


@dataclass(frozen=True)
class SyntheticSource:
    """Regeneration recipe for a procedurally generated video."""

    seed: int
    label: int


@dataclass
class VideoRecord:
    video_id: str
    source: Union[str, SyntheticSource]
    label: Optional[int] = None
    split: str = "train"
    n_frames: Optional[int] = None

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise InputError(f"{self.video_id}: unknown split {self.split!r}")


def frames_to_float(frames: np.ndarray) -> np.ndarray:
    """uint8 ``[T, H, W, 3]`` frames -> float32 ``[3, T, H, W]`` in [0, 1]."""
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise InputError(f"frames must be [T,H,W,3], got {frames.shape}")
    out = np.ascontiguousarray(frames.transpose(3, 0, 1, 2), dtype=np.float32)
    if frames.dtype == np.uint8:
        out /= 255.0
    return out


def resize_clip(data: np.ndarray, size) -> np.ndarray:
    """Bilinear spatial resize of a ``[3, T, H, W]`` array."""
    import torch
    import torch.nn.functional as F

    h, w = size
    if data.shape[2:] == (h, w):
        return data
    t = torch.from_numpy(np.ascontiguousarray(data)).permute(1, 0, 2, 3)
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return np.clip(t.permute(1, 0, 2, 3).numpy(), 0.0, 1.0)


def sample_clip(frames: np.ndarray, start_frame: Optional[int], n_frames: int,
                rng=None, resize=None) -> Clip:
    """Cut ``n_frames`` consecutive frames out of a decoded video.

    ``frames`` is the uint8 ``[T, H, W, 3]`` video. When ``start_frame`` is
    None a start is drawn uniformly from ``rng`` (temporal jitter).
    """
    if frames is None or frames.ndim != 4:
        raise InputError("video could not be decoded")
    length = frames.shape[0]
    if n_frames <= 0:
        raise BoundsError(f"n_frames must be positive, got {n_frames}")
    if start_frame is None:
        if n_frames > length:
            raise BoundsError(f"need {n_frames} frames, video has {length}")
        start_frame = int(as_rng(rng).integers(0, length - n_frames + 1))
    if start_frame < 0 or start_frame + n_frames > length:
        raise BoundsError(
            f"frames [{start_frame}, {start_frame + n_frames}) outside video of length {length}")
    data = frames_to_float(frames[start_frame:start_frame + n_frames])
    if resize is not None:
        data = resize_clip(data, resize)
    return Clip(data, RAW)


def to_residual(clip: Clip) -> Clip:
    """Temporal frame difference: T+1 raw frames in, T residual frames out."""
    if clip.domain != RAW:
        raise DomainError("residual clips cannot be differenced again")
    if clip.n_frames < 2:
        raise BoundsError("residual conversion needs at least two frames")
    d = clip.data
    return Clip(d[:, 1:] - d[:, :-1], RESIDUAL)
