"""Procedural motion corpus.

Class identity lives only in how the object moves. Object shape, texture,
colours, start position and background are drawn per video from pools that
are shared by every class, so a single frame carries no label information.
Default class directions all point into the upper half-plane and objects
accelerate, so a rotated or time-reversed clip shows motion that no class
has; recognising such transformations therefore requires encoding the motion
itself. Backgrounds share a top-to-bottom shading, a static cue that only
survives in raw (non-residual) clips.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .clip import SyntheticSource, VideoRecord, derive_seed

SHAPES = ("disk", "square", "diamond", "cross")
TEXTURES = ("solid", "stripes", "checker")
RANDOM = "random"


@dataclass(frozen=True)
class MotionParams:
    direction: float  # degrees, 0 = rightwards, counter-clockwise
    speed: float  # mean pixels per frame
    shape: str = RANDOM
    texture: str = RANDOM


def default_motion_params(n_classes: int, base_speed: float = 1.2, n_directions: int = 4):
    """``n_directions`` upper-half-plane directions per speed level."""
    out = []
    for i in range(n_classes):
        direction = 180.0 * ((i % n_directions) + 0.5) / n_directions
        level = i // n_directions
        out.append(MotionParams(direction=direction, speed=round(base_speed * (1 + 1.25 * level), 4)))
    return out


@dataclass
class SyntheticSpec:
    n_classes: int = 8
    videos_per_class: int = 40
    frames_per_video: int = 48
    frame_size: tuple = (32, 32)
    motion_params: list = field(default_factory=list)
    split_fractions: tuple = (0.65, 0.10, 0.25)
    object_radius: tuple = (4.0, 7.0)

    def __post_init__(self):
        self.frame_size = tuple(int(v) for v in self.frame_size)
        if not self.motion_params:
            self.motion_params = default_motion_params(self.n_classes)
        self.motion_params = [m if isinstance(m, MotionParams) else MotionParams(**m)
                              for m in self.motion_params]
        self.validate()

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes", "need at least two classes")
        if self.videos_per_class < 1:
            raise ConfigError("videos_per_class", "must be positive")
        if self.frames_per_video < 2:
            raise ConfigError("frames_per_video", "need at least two frames")
        if len(self.frame_size) != 2 or min(self.frame_size) < 8:
            raise ConfigError("frame_size", "frames must be at least 8x8")
        if len(self.motion_params) != self.n_classes:
            raise ConfigError("motion_params",
                              f"{len(self.motion_params)} entries for {self.n_classes} classes")
        seen = set()
        for i, m in enumerate(self.motion_params):
            key = (m.direction % 360.0, m.speed, m.shape, m.texture)
            if key in seen:
                raise ConfigError(f"motion_params[{i}]", f"duplicate motion pattern {m}")
            seen.add(key)
            if m.speed <= 0:
                raise ConfigError(f"motion_params[{i}].speed", "must be positive")
            if m.shape not in SHAPES + (RANDOM,):
                raise ConfigError(f"motion_params[{i}].shape", f"unknown shape {m.shape!r}")
            if m.texture not in TEXTURES + (RANDOM,):
                raise ConfigError(f"motion_params[{i}].texture", f"unknown texture {m.texture!r}")
        fr = self.split_fractions
        if len(fr) != 3 or min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError("split_fractions", "need three non-negative fractions summing to 1")

    def class_name(self, label: int) -> str:
        m = self.motion_params[label]
        return f"dir{int(round(m.direction)) % 360:03d}_speed{m.speed:g}"


def _shape_mask(shape, dy, dx, radius):
    if shape == "disk":
        return dy ** 2 + dx ** 2 <= radius ** 2
    if shape == "square":
        return (np.abs(dy) <= radius * 0.85) & (np.abs(dx) <= radius * 0.85)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= radius * 1.2
    bar = radius * 0.35
    return ((np.abs(dy) <= bar) & (np.abs(dx) <= radius)) | (
        (np.abs(dx) <= bar) & (np.abs(dy) <= radius))


def _texture(texture, dy, dx, period):
    if texture == "solid":
        return np.zeros(dy.shape, dtype=bool)
    if texture == "stripes":
        return (np.floor(dx / period) % 2).astype(bool)
    return ((np.floor(dx / period) + np.floor(dy / period)) % 2).astype(bool)


def render_video(spec: SyntheticSpec, seed: int, label: int) -> np.ndarray:
    """Render one uint8 ``[T, H, W, 3]`` video for ``label`` from ``seed``."""
    rng = np.random.default_rng(seed)
    motion = spec.motion_params[label]
    h, w = spec.frame_size
    t_len = spec.frames_per_video

    shape = motion.shape if motion.shape != RANDOM else SHAPES[rng.integers(len(SHAPES))]
    texture = motion.texture if motion.texture != RANDOM else TEXTURES[rng.integers(len(TEXTURES))]
    radius = rng.uniform(*spec.object_radius)
    period = rng.uniform(1.5, 3.0)
    bg_color = rng.uniform(0.15, 0.85, size=3)
    fg_a = rng.uniform(0.0, 1.0, size=3)
    fg_b = rng.uniform(0.0, 1.0, size=3)
    # keep the object visible against the background
    fg_a = np.where(np.abs(fg_a - bg_color) < 0.25, 1.0 - bg_color, fg_a)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    shading = 1.15 - 0.45 * (yy / (h - 1))
    noise = rng.normal(0.0, 0.04, size=(h, w, 1))
    background = np.clip(bg_color[None, None] * shading[..., None] + noise, 0.0, 1.0)

    angle = np.deg2rad(motion.direction + rng.uniform(-8.0, 8.0))
    # image rows grow downwards, so "up" is negative dy
    unit = np.array([-np.sin(angle), np.cos(angle)])
    ramp = np.linspace(0.4, 1.6, t_len)
    steps = motion.speed * ramp[:, None] * unit[None]
    start = rng.uniform([0.0, 0.0], [h, w])
    positions = start + np.concatenate([np.zeros((1, 2)), np.cumsum(steps[:-1], axis=0)])

    frames = np.empty((t_len, h, w, 3), dtype=np.uint8)
    for t, (py, px) in enumerate(positions):
        dy = (yy - py + h / 2.0) % h - h / 2.0
        dx = (xx - px + w / 2.0) % w - w / 2.0
        mask = _shape_mask(shape, dy, dx, radius)
        alt = _texture(texture, dy, dx, period)
        obj = np.where(alt[..., None], fg_b, fg_a)
        frame = np.where(mask[..., None], obj, background)
        frames[t] = np.round(frame * 255.0).astype(np.uint8)
    return frames


def _split_counts(n, fractions):
    n_train = int(round(n * fractions[0]))
    n_val = int(round(n * fractions[1]))
    if fractions[1] > 0 and n >= 3:
        n_val = max(1, n_val)
    n_train = min(n_train, n - n_val)
    return n_train, n_val, n - n_train - n_val


def generate_synthetic(spec: SyntheticSpec, seed: int = 0):
    """Build the corpus in memory. Pure function of ``(spec, seed)``."""
    from .dataset import VideoDataset

    spec.validate()
    n_train, n_val, _ = _split_counts(spec.videos_per_class, spec.split_fractions)
    records, frames = [], {}
    for label in range(spec.n_classes):
        for i in range(spec.videos_per_class):
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            vid = f"c{label:02d}_v{i:03d}"
            src = SyntheticSource(derive_seed(seed, "synthetic", label, i), label)
            records.append(VideoRecord(vid, src, label, split, spec.frames_per_video))
            frames[vid] = render_video(spec, src.seed, label)
    names = [spec.class_name(c) for c in range(spec.n_classes)]
    return VideoDataset(records, class_names=names, frames=frames, synthetic_spec=spec)
