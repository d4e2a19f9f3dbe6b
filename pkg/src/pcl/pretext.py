"""Self-supervised pretext tasks: rotation, clip order, transformation recognition.

Each task turns a clip (or a video, for clip order) into a ``PretextInstance``
whose label names the transformation applied. Every label has a deterministic
inverse map so that the transformation is recoverable from the label.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import BoundsError, DomainError
from .videodata.clip import Clip, as_rng


@dataclass
class PretextInstance:
    clips: list
    label: int
    video_id: str = ""


def _require_square(clip: Clip):
    h, w = clip.spatial
    if h != w:
        raise DomainError(f"spatial rotation needs square frames, got {h}x{w}")


def rotate(data: np.ndarray, k: int) -> np.ndarray:
    """Rotate every frame of ``[C, T, H, W]`` by ``k`` quarter turns counter-clockwise.

    Output pixel ``(r, c)`` of a single quarter turn is source pixel ``(c, H-1-r)``.
    """
    return np.ascontiguousarray(np.rot90(data, k=k % 4, axes=(2, 3)))


def reverse_time(data: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(data[:, ::-1])


def swap_adjacent(data: np.ndarray) -> np.ndarray:
    """Swap frames (0,1), (2,3), ...; an odd trailing frame stays put."""
    t = data.shape[1]
    order = np.arange(t)
    pairs = t - t % 2
    order[:pairs] = order[:pairs].reshape(-1, 2)[:, ::-1].reshape(-1)
    return np.ascontiguousarray(data[:, order])


# ---------------------------------------------------------------- rotation


class RotationTask:
    name = "rotation"
    n_classes = 4
    n_clips = 1

    def apply(self, clip: Clip, label: int) -> Clip:
        _require_square(clip)
        return Clip(rotate(clip.data, label), clip.domain)

    def invert(self, clip: Clip, label: int) -> Clip:
        return Clip(rotate(clip.data, -label), clip.domain)

    def make_instance(self, clip: Clip, rng=None) -> PretextInstance:
        _require_square(clip)
        label = int(as_rng(rng).integers(self.n_classes))
        return PretextInstance([self.apply(clip, label)], label)


def make_rotation_instance(clip: Clip, rng=None) -> PretextInstance:
    return RotationTask().make_instance(clip, rng)


# -------------------------------------------------------- transformation


TRANSFORM_OPS = {
    "identity": (lambda d: d.copy(), lambda d: d.copy(), False),
    "rotate90": (lambda d: rotate(d, 1), lambda d: rotate(d, -1), True),
    "rotate180": (lambda d: rotate(d, 2), lambda d: rotate(d, 2), True),
    "rotate270": (lambda d: rotate(d, 3), lambda d: rotate(d, 1), True),
    "reverse": (reverse_time, reverse_time, False),
    "swap_adjacent": (swap_adjacent, swap_adjacent, False),
}
DEFAULT_TRANSFORMS = ("identity", "rotate90", "rotate180", "reverse", "swap_adjacent")


class TransformTask:
    """Classify which spatial or temporal operation was applied to the clip."""

    name = "transform"
    n_clips = 1

    def __init__(self, ops=DEFAULT_TRANSFORMS):
        unknown = [o for o in ops if o not in TRANSFORM_OPS]
        if unknown or len(set(ops)) != len(ops) or not ops:
            raise DomainError(f"bad transformation set {ops}")
        self.ops = tuple(ops)
        self.n_classes = len(self.ops)

    def apply(self, clip: Clip, label: int) -> Clip:
        fwd, _, spatial = TRANSFORM_OPS[self.ops[label]]
        if spatial:
            _require_square(clip)
        return Clip(fwd(clip.data), clip.domain)

    def invert(self, clip: Clip, label: int) -> Clip:
        _, inv, _ = TRANSFORM_OPS[self.ops[label]]
        return Clip(inv(clip.data), clip.domain)

    def make_instance(self, clip: Clip, rng=None) -> PretextInstance:
        label = int(as_rng(rng).integers(self.n_classes))
        return PretextInstance([self.apply(clip, label)], label)


def make_transform_instance(clip: Clip, rng=None, ops=DEFAULT_TRANSFORMS) -> PretextInstance:
    return TransformTask(ops).make_instance(clip, rng)


# ------------------------------------------------------------ clip order


def permutation_to_label(perm) -> int:
    """Lexicographic rank of ``perm`` among all permutations of its length."""
    perm = list(perm)
    n = len(perm)
    if sorted(perm) != list(range(n)):
        raise DomainError(f"not a permutation of 0..{n - 1}: {perm}")
    rank, remaining = 0, list(range(n))
    for i, p in enumerate(perm):
        j = remaining.index(p)
        rank += j * math.factorial(n - 1 - i)
        remaining.pop(j)
    return rank


def label_to_permutation(label: int, n: int) -> tuple:
    if not 0 <= label < math.factorial(n):
        raise BoundsError(f"label {label} outside [0, {n}!)")
    remaining, perm = list(range(n)), []
    for i in range(n):
        f = math.factorial(n - 1 - i)
        j, label = divmod(label, f)
        perm.append(remaining.pop(j))
    return tuple(perm)


class OrderTask:
    """Shuffle ``n_clips`` temporally ordered clips; predict the permutation.

    Clips are non-overlapping segments separated by random gaps of
    ``0..max_gap`` frames. ``clips[i]`` of an instance is segment ``perm[i]``.
    """

    name = "order"

    def __init__(self, n_clips=3, max_gap=8):
        if n_clips < 2:
            raise DomainError("order task needs at least two clips")
        self.n_clips = n_clips
        self.n_classes = math.factorial(n_clips)
        self.max_gap = max_gap

    def required_length(self, span: int) -> int:
        return self.n_clips * span

    def segment_starts(self, length: int, span: int, rng) -> list:
        n = self.n_clips
        slack = length - n * span
        if slack < 0:
            raise BoundsError(f"video of {length} frames too short for {n} clips of {span}")
        gaps = rng.integers(0, self.max_gap + 1, size=n - 1)
        while gaps.sum() > slack:
            gaps = np.minimum(gaps, gaps.max() - 1).clip(0)
        offset = int(rng.integers(0, slack - int(gaps.sum()) + 1))
        starts, pos = [], offset
        for i in range(n):
            starts.append(pos)
            pos += span + (int(gaps[i]) if i < n - 1 else 0)
        return starts

    def shuffle(self, ordered_clips, rng=None):
        label = int(as_rng(rng).integers(self.n_classes))
        perm = label_to_permutation(label, self.n_clips)
        return [ordered_clips[p] for p in perm], label

    def make_instance(self, frames, clip_fn, span, rng=None, video_id="") -> PretextInstance:
        """``clip_fn(frames, start, rng)`` turns a segment start into a Clip."""
        rng = as_rng(rng)
        starts = self.segment_starts(frames.shape[0], span, rng)
        ordered = [clip_fn(frames, s, rng) for s in starts]
        clips, label = self.shuffle(ordered, rng)
        return PretextInstance(clips, label, video_id)


def make_order_instance(frames, n_clips=3, rng=None, n_frames=16, video_id="") -> PretextInstance:
    from .videodata.clip import sample_clip

    task = OrderTask(n_clips)
    return task.make_instance(frames, lambda f, s, r: sample_clip(f, s, n_frames),
                              n_frames, rng, video_id)


# --------------------------------------------------------------- registry


def build_task(name: str, n_clips=3, ops=DEFAULT_TRANSFORMS, max_gap=8):
    if name == "rotation":
        return RotationTask()
    if name == "transform":
        return TransformTask(ops)
    if name == "order":
        return OrderTask(n_clips, max_gap)
    if name == "none":
        return None
    raise DomainError(f"unknown pretext task {name!r}")


TASK_NAMES = ("rotation", "order", "transform", "none")


def pretext_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch."""
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise DomainError(f"logits {list(logits.shape)} vs labels {list(labels.shape)}")
    if bool(((labels < 0) | (labels >= logits.shape[1])).any()):
        raise BoundsError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def all_permutations(n: int):
    return list(itertools.permutations(range(n)))
