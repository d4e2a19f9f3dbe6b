"""Spatio-temporal encoders, projection head and pretext heads."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

FAMILIES = ("c3d_like", "r3d_like", "r2plus1d_like")
BASE_WIDTHS = (64, 128, 256, 512)
PROJECTION_DIM = 128
NORM_EPS = 1e-12


@dataclass
class EncoderConfig:
    family: str = "r3d_like"
    width_multiplier: float = 1.0
    input_shape: tuple = (3, 16, 112, 112)
    feature_dim: int = 512
    blocks_per_stage: tuple = (1, 1, 1, 1)
    # "wide": 3x7x7 stride-(1,2,2) stem; "compact": 3x3x3 stride-1 stem for
    # small frames; "auto" picks compact when frames are at most 64 pixels
    stem: str = "auto"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.blocks_per_stage = tuple(int(v) for v in self.blocks_per_stage)
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError("family", f"must be one of {FAMILIES}, got {self.family!r}")
        if self.width_multiplier <= 0:
            raise ConfigError("width_multiplier", "must be positive")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim", "must be positive")
        if len(self.input_shape) != 4 or self.input_shape[0] != 3 or min(self.input_shape) <= 0:
            raise ConfigError("input_shape", f"expected [3,T,H,W], got {self.input_shape}")
        if len(self.blocks_per_stage) != 4 or min(self.blocks_per_stage) < 1:
            raise ConfigError("blocks_per_stage", "expected four positive block counts")
        if self.stem not in ("auto", "wide", "compact"):
            raise ConfigError("stem", f"must be auto, wide or compact, got {self.stem!r}")

    @property
    def compact_stem(self) -> bool:
        if self.stem == "auto":
            return max(self.input_shape[2:]) <= 64
        return self.stem == "compact"

    @property
    def widths(self):
        return tuple(max(1, int(round(b * self.width_multiplier))) for b in BASE_WIDTHS)


def _bn_relu(ch):
    return [nn.BatchNorm3d(ch), nn.ReLU(inplace=True)]


class C3DLike(nn.Module):
    """Plain stack of 3x3x3 convolutions with max pooling between stages."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w1, w2, w3, w4 = cfg.widths
        layers = [nn.Conv3d(3, w1, 3, padding=1, bias=False), *_bn_relu(w1),
                  nn.MaxPool3d((1, 2, 2), ceil_mode=True)]
        prev = w1
        for i, w in enumerate((w2, w3, w4)):
            for j in range(cfg.blocks_per_stage[i + 1]):
                layers += [nn.Conv3d(prev, w, 3, padding=1, bias=False), *_bn_relu(w)]
                prev = w
            layers.append(nn.MaxPool3d(2, ceil_mode=True))
        self.features = nn.Sequential(*layers)
        self.out_channels = w4

    def forward(self, x):
        return self.features(x)


class BasicBlock3D(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, 1, stride=stride, bias=False),
                                          nn.BatchNorm3d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class SpatioTemporalConv(nn.Module):
    """(2+1)D factorisation of a 3x3x3 convolution.

    The hidden width keeps the parameter count close to the full 3D kernel.
    """

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        mid = max(1, (27 * cin * cout) // (9 * cin + 3 * cout))
        s = stride
        self.spatial = nn.Conv3d(cin, mid, (1, 3, 3), stride=(1, s, s), padding=(0, 1, 1), bias=False)
        self.bn = nn.BatchNorm3d(mid)
        self.temporal = nn.Conv3d(mid, cout, (3, 1, 1), stride=(s, 1, 1), padding=(1, 0, 0), bias=False)

    def forward(self, x):
        return self.temporal(F.relu(self.bn(self.spatial(x))))


class Block2Plus1D(BasicBlock3D):
    def __init__(self, cin, cout, stride=1):
        super().__init__(cin, cout, stride)
        self.conv1 = SpatioTemporalConv(cin, cout, stride)
        self.conv2 = SpatioTemporalConv(cout, cout)


class ResNetLike(nn.Module):
    def __init__(self, cfg: EncoderConfig, block):
        super().__init__()
        widths = cfg.widths
        if cfg.compact_stem:
            stem = nn.Conv3d(3, widths[0], 3, padding=1, bias=False)
        else:
            stem = nn.Conv3d(3, widths[0], (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3), bias=False)
        self.stem = nn.Sequential(stem, *_bn_relu(widths[0]))
        stages, prev = [], widths[0]
        for i, (w, n) in enumerate(zip(widths, cfg.blocks_per_stage)):
            blocks = []
            for j in range(n):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block(prev, w, stride))
                prev = w
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.Sequential(*stages)
        self.out_channels = widths[-1]

    def forward(self, x):
        return self.stages(self.stem(x))


class Encoder(nn.Module):
    """Backbone + global average pooling -> ``[batch, feature_dim]``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.family == "c3d_like":
            self.body = C3DLike(cfg)
        elif cfg.family == "r3d_like":
            self.body = ResNetLike(cfg, BasicBlock3D)
        else:
            self.body = ResNetLike(cfg, Block2Plus1D)
        self.fc = None
        if self.body.out_channels != cfg.feature_dim:
            self.fc = nn.Linear(self.body.out_channels, cfg.feature_dim)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm3d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward(self, x):
        if x.dim() != 5 or tuple(x.shape[1:]) != self.cfg.input_shape:
            raise InputError(
                f"expected input [B,{','.join(map(str, self.cfg.input_shape))}], got {list(x.shape)}")
        h = self.body(x)
        h = h.mean(dim=(2, 3, 4))
        return h if self.fc is None else self.fc(h)


def normalize(v, eps=NORM_EPS):
    """Row-wise L2 normalisation; logs when the epsilon guard kicks in."""
    norms = v.norm(dim=-1, keepdim=True)
    if bool((norms < eps).any()):
        log.warning("normalize: %d near-zero rows guarded by eps=%g",
                    int((norms < eps).sum()), eps)
    return v / norms.clamp_min(eps)


class ProjectionHead(nn.Module):
    """fc-relu-fc map into the 128-d contrastive space, unit-normalised."""

    def __init__(self, in_dim, hidden_dim=None, out_dim=PROJECTION_DIM):
        super().__init__()
        hidden_dim = hidden_dim or in_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)
        self.out_dim = out_dim

    def forward(self, features):
        return normalize(self.fc2(F.relu(self.fc1(features))))


class PretextHead(nn.Module):
    """Classifier g(.) over one clip's features or n concatenated clips."""

    def __init__(self, feature_dim, n_classes, n_clips=1):
        super().__init__()
        self.in_dim = feature_dim * n_clips
        self.n_classes = n_classes
        self.n_clips = n_clips
        if n_clips == 1:
            self.net = nn.Linear(self.in_dim, n_classes)
        else:
            self.net = nn.Sequential(nn.Linear(self.in_dim, feature_dim), nn.ReLU(inplace=True),
                                     nn.Linear(feature_dim, n_classes))

    def forward(self, x):
        if x.dim() != 2 or x.shape[1] != self.in_dim:
            raise InputError(f"pretext head expects width {self.in_dim}, got {list(x.shape)}")
        return self.net(x)


class PCLModel(nn.Module):
    """Shared encoder with optional projection and pretext heads."""

    def __init__(self, encoder_cfg: EncoderConfig, n_pretext_classes=0, pretext_clips=1,
                 use_projection=True):
        super().__init__()
        self.encoder = Encoder(encoder_cfg)
        d = encoder_cfg.feature_dim
        self.projector = ProjectionHead(d) if use_projection else None
        self.pretext_head = (PretextHead(d, n_pretext_classes, pretext_clips)
                             if n_pretext_classes else None)

    def encode(self, clips):
        return self.encoder(clips)

    def project(self, features):
        return self.projector(features)

    def classify_pretext(self, features):
        return self.pretext_head(features)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def head_configs(model: PCLModel) -> dict:
    out = {}
    if model.projector is not None:
        out["projector"] = {"in_dim": model.projector.fc1.in_features,
                            "hidden_dim": model.projector.fc1.out_features,
                            "out_dim": model.projector.out_dim}
    if model.pretext_head is not None:
        out["pretext_head"] = {"n_classes": model.pretext_head.n_classes,
                               "n_clips": model.pretext_head.n_clips}
    return out
