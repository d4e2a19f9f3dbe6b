from .augment import AugmentConfig, augment
from .clip import (RAW, RESIDUAL, Clip, SyntheticSource, VideoRecord, derive_seed,
                   frames_to_float, sample_clip, to_residual)
from .dataset import VideoDataset, read_manifest, read_tensor, write_manifest, write_tensor
from .pipeline import clip_span, prepare_clip, uniform_starts
from .synthetic import MotionParams, SyntheticSpec, generate_synthetic, render_video

__all__ = [
    "AugmentConfig", "augment", "RAW", "RESIDUAL", "Clip", "SyntheticSource",
    "VideoRecord", "derive_seed", "frames_to_float", "sample_clip", "to_residual",
    "VideoDataset", "read_manifest", "read_tensor", "write_manifest", "write_tensor",
    "clip_span", "prepare_clip", "uniform_starts", "MotionParams", "SyntheticSpec",
    "generate_synthetic", "render_video",
]
