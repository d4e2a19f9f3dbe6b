"""Video-level features, kNN retrieval, fine-tuned recognition and embedding export."""
from __future__ import annotations

import copy
import csv
import json
import logging
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError, PCLError
from .models import Encoder
from .videodata import derive_seed, prepare_clip, uniform_starts
from .videodata.pipeline import clip_span

log = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 20, 50)


@dataclass
class EvalConfig:
    clips_per_video: int = 10
    ks: tuple = DEFAULT_KS
    use_projection: bool = False
    batch_size: int = 32

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        if self.clips_per_video < 1:
            raise ConfigError("clips_per_video", "must be >= 1")
        if not self.ks or min(self.ks) < 1:
            raise ConfigError("ks", "need at least one positive k")


@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 16
    lr_milestones: tuple = (0.6, 0.8)
    lr_gamma: float = 0.1
    linear_probe: bool = False
    seed: int = 0

    def __post_init__(self):
        self.lr_milestones = tuple(float(v) for v in self.lr_milestones)
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size", "must be >= 1")


@dataclass
class VideoFeature:
    video_id: str
    vector: np.ndarray
    label: int = None


# --------------------------------------------------------------- features


def _eval_clips(frames, train_cfg, n_clips):
    span = clip_span(train_cfg.clip_len, train_cfg.use_residual)
    starts = uniform_starts(frames.shape[0], span, n_clips)
    if not starts:
        raise InputError(f"video of {frames.shape[0]} frames shorter than clip span {span}")
    aug = replace(train_cfg.augment, enabled=False)
    return np.stack([prepare_clip(frames, s, train_cfg.clip_len, aug, None, train_cfg.use_residual,
                                  random_crop=False, resize=train_cfg.resize or None).data
                     for s in starts])


def mean_features(clip_features: np.ndarray) -> np.ndarray:
    """Video feature = arithmetic mean of its clip features."""
    return np.asarray(clip_features, dtype=np.float64).mean(axis=0)


@torch.no_grad()
def extract_video_features(model, dataset, records, train_cfg, clips_per_video=10,
                           use_projection=False, batch_size=32, skipped=None):
    """One averaged feature per video; undecodable videos are skipped and
    appended to ``skipped`` (if given) as ``(video_id, reason)``."""
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for r in records:
            try:
                clips = _eval_clips(dataset.frames(r), train_cfg, clips_per_video)
            except PCLError as exc:
                warnings.warn(f"skipping {r.video_id}: {exc}")
                if skipped is not None:
                    skipped.append((r.video_id, str(exc)))
                continue
            feats = []
            for i in range(0, len(clips), batch_size):
                x = torch.from_numpy(clips[i:i + batch_size]).to(device=device, dtype=dtype)
                f = model.encode(x)
                if use_projection:
                    f = model.project(f)
                feats.append(f.double().cpu().numpy())
            out.append(VideoFeature(r.video_id, mean_features(np.concatenate(feats)), r.label))
    finally:
        model.train(was_training)
    return out


# --------------------------------------------------------------- retrieval


@dataclass
class RetrievalReport:
    topk_accuracy: dict
    per_class: dict
    class_counts: dict
    confusions: list
    n_queries: int
    n_gallery: int
    neighbors: np.ndarray = field(default=None, repr=False)
    class_names: list = None

    def to_dict(self):
        return {
            "topk_accuracy": {str(k): v for k, v in self.topk_accuracy.items()},
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "class_counts": {str(k): v for k, v in self.class_counts.items()},
            "confusions": [list(c) for c in self.confusions],
            "n_queries": self.n_queries,
            "n_gallery": self.n_gallery,
            "class_names": self.class_names,
        }

    def _name(self, c):
        return self.class_names[c] if self.class_names and 0 <= c < len(self.class_names) else str(c)

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "retrieval_topk.tsv", "w") as fh:
            fh.write("k\taccuracy\n")
            for k, v in self.topk_accuracy.items():
                fh.write(f"{k}\t{v:.6f}\n")
        with open(out / "retrieval_per_class.tsv", "w") as fh:
            fh.write("label\tname\tn_queries\ttop1\n")
            for c, v in sorted(self.per_class.items()):
                fh.write(f"{c}\t{self._name(c)}\t{self.class_counts[c]}\t{v:.6f}\n")
        with open(out / "retrieval_confusions.tsv", "w") as fh:
            fh.write("query_label\tretrieved_label\tcount\n")
            for q, g, n in self.confusions:
                fh.write(f"{self._name(q)}\t{self._name(g)}\t{n}\n")
        (out / "retrieval_summary.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return out


def _stack(features):
    x = np.stack([np.asarray(f.vector, dtype=np.float64) for f in features])
    y = np.array([-1 if f.label is None else f.label for f in features])
    return x, y


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return an @ bn.T


def knn_retrieval(queries, gallery, ks=DEFAULT_KS, class_names=None, n_confusions=10):
    """Cosine kNN retrieval; a query hits at k when any of its k nearest
    gallery videos shares its label. Ties go to the lower gallery index."""
    if not gallery:
        raise InputError("gallery is empty")
    if not queries:
        raise InputError("no queries")
    q, qy = _stack(queries)
    g, gy = _stack(gallery)
    if q.shape[1] != g.shape[1]:
        raise InputError(f"query dim {q.shape[1]} != gallery dim {g.shape[1]}")
    ks = sorted(set(int(k) for k in ks))
    eff = {}
    for k in ks:
        if k > len(gallery):
            warnings.warn(f"k={k} exceeds gallery size {len(gallery)}; clamped")
        eff[k] = min(k, len(gallery))
    sims = cosine_matrix(q, g)
    max_k = max(eff.values())
    order = np.argsort(-sims, axis=1, kind="stable")[:, :max_k]
    match = gy[order] == qy[:, None]
    hits_cum = np.cumsum(match, axis=1) > 0
    topk = {k: float(hits_cum[:, eff[k] - 1].mean()) for k in ks}

    top1 = hits_cum[:, 0]
    counts = Counter(qy.tolist())
    per_class = {int(c): float(top1[qy == c].mean()) for c in sorted(counts)}
    conf = Counter((int(a), int(b)) for a, b, h in zip(qy, gy[order[:, 0]], top1) if not h)
    confusions = [(a, b, n) for (a, b), n in sorted(conf.items(), key=lambda kv: (-kv[1], kv[0]))]
    return RetrievalReport(topk, per_class, {int(c): n for c, n in counts.items()},
                           confusions[:n_confusions], len(queries), len(gallery), order,
                           class_names)


# -------------------------------------------------------------- finetuning


class Recognizer(nn.Module):
    def __init__(self, encoder: Encoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.classifier = nn.Linear(encoder.cfg.feature_dim, n_classes)

    def forward(self, x):
        return self.classifier(self.encoder(x))


@dataclass
class FinetuneResult:
    test_accuracy: float
    best_val_accuracy: float
    best_epoch: int
    history: list


def _check_labels(records, n_classes):
    for r in records:
        if r.label is None:
            raise ConfigError("labels", f"{r.video_id} has no label")
        if not 0 <= r.label < n_classes:
            raise ConfigError("labels", f"{r.video_id}: label {r.label} outside [0, {n_classes})")


@torch.no_grad()
def recognition_accuracy(model: Recognizer, dataset, records, train_cfg, clips_per_video):
    """Video accuracy from softmax scores averaged over evenly spaced clips."""
    model.eval()
    correct = 0
    for r in records:
        clips = torch.from_numpy(_eval_clips(dataset.frames(r), train_cfg, clips_per_video))
        probs = F.softmax(model(clips), dim=1).mean(0)
        correct += int(int(probs.argmax()) == r.label)
    return correct / len(records)


def finetune_recognize(pretrained, dataset, train_cfg, ft_cfg: FinetuneConfig,
                       clips_per_video=10, n_classes=None):
    """Fine-tune an encoder plus a fresh linear classifier on labelled videos.

    ``pretrained`` is a ``PCLModel``/``Encoder`` or None for the random-init
    baseline. Projection and pretext heads are discarded. Model selection on
    val accuracy; returns test accuracy of the selected weights.
    """
    from .training import view_augment

    n_classes = n_classes or dataset.n_classes
    tr, va, te = dataset.split("train"), dataset.split("val"), dataset.split("test")
    if not (tr and va and te):
        raise ConfigError("splits", "fine-tuning needs non-empty train/val/test splits")
    _check_labels(tr + va + te, n_classes)

    torch.manual_seed(derive_seed(ft_cfg.seed, "finetune") % (2 ** 31))
    if pretrained is None:
        encoder = Encoder(train_cfg.encoder)
    else:
        encoder = copy.deepcopy(getattr(pretrained, "encoder", pretrained)).float().cpu()
    model = Recognizer(encoder, n_classes)
    if ft_cfg.linear_probe:
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=ft_cfg.lr, momentum=ft_cfg.momentum,
                          weight_decay=ft_cfg.weight_decay)
    milestones = sorted({max(1, int(round(m * max(ft_cfg.epochs, 1)))) for m in ft_cfg.lr_milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, gamma=ft_cfg.lr_gamma)
    aug = view_augment(train_cfg)

    best_acc, best_epoch, best_state, history = -1.0, -1, copy.deepcopy(model.state_dict()), []
    for epoch in range(ft_cfg.epochs):
        model.train()
        if ft_cfg.linear_probe:
            model.encoder.eval()
        perm = np.random.default_rng(derive_seed(ft_cfg.seed, "ft-shuffle", epoch)).permutation(len(tr))
        losses = []
        for s in range(0, len(perm), ft_cfg.batch_size):
            chunk = [tr[j] for j in perm[s:s + ft_cfg.batch_size]]
            if len(chunk) < 2:
                continue
            x = torch.from_numpy(np.stack([
                prepare_clip(dataset.frames(r), None, train_cfg.clip_len, aug,
                             np.random.default_rng(derive_seed(ft_cfg.seed, r.video_id, epoch, "ft")),
                             train_cfg.use_residual, True, train_cfg.resize or None).data
                for r in chunk]))
            y = torch.tensor([r.label for r in chunk])
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        sched.step()
        acc = recognition_accuracy(model, dataset, va, train_cfg, clips_per_video)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else None,
                        "val_accuracy": acc})
        if acc > best_acc:
            best_acc, best_epoch, best_state = acc, epoch, copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    if ft_cfg.epochs == 0:
        best_acc = recognition_accuracy(model, dataset, va, train_cfg, clips_per_video)
    test_acc = recognition_accuracy(model, dataset, te, train_cfg, clips_per_video)
    return FinetuneResult(test_acc, best_acc, best_epoch, history)


# ------------------------------------------------------------------ export


def export_embeddings(features, out_path, class_names=None):
    """Tab-separated ``video_id, label, label_name, v0..v{d-1}``.

    Vectors are written as float32 with 9 significant digits, which
    round-trips float32 exactly.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(features[0].vector) if features else 0
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["video_id", "label", "label_name"] + [f"v{i}" for i in range(dim)])
        for f in features:
            vec = np.asarray(f.vector, dtype=np.float32)
            name = class_names[f.label] if class_names and f.label is not None else ""
            w.writerow([f.video_id, "" if f.label is None else f.label, name]
                       + [f"{v:.9g}" for v in vec.tolist()])
    return out_path


def read_embeddings(path):
    """Inverse of ``export_embeddings``; returns ``(features, label_names)``."""
    feats, names = [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader)
        if header[:3] != ["video_id", "label", "label_name"]:
            raise InputError(f"{path}: not an embedding export")
        for row in reader:
            label = None if row[1] == "" else int(row[1])
            vec = np.array([float(v) for v in row[3:]], dtype=np.float32)
            feats.append(VideoFeature(row[0], vec, label))
            if label is not None and row[2]:
                names[label] = row[2]
    return feats, names
