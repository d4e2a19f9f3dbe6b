"""Joint pretext + contrastive optimisation loop."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import contrastive as C
from .errors import ConfigError, DivergenceError, InputError
from .models import EncoderConfig, PCLModel, head_configs
from .pretext import DEFAULT_TRANSFORMS, TASK_NAMES, OrderTask, build_task
from .videodata import AugmentConfig, derive_seed, prepare_clip
from .videodata.pipeline import clip_span

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e4


PRETEXT_VIEWS = ("primary", "independent", "shared")


@dataclass
class TrainConfig:
    task: str = "transform"
    use_contrastive: bool = True
    use_residual: bool = True
    use_augment: bool = True
    alpha: float = 0.5
    batch_size: int = 16
    epochs: int = 30
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_milestones: tuple = (0.6, 0.8)
    lr_gamma: float = 0.1
    seed: int = 0
    clip_len: int = 16
    resize: tuple = ()
    # single-clip tasks under contrastive learning: "primary" transforms view 0
    # only, "independent" draws a separate transform for view 1, "shared"
    # applies view 0's transform to view 1 as well
    pretext_views: str = "primary"
    order_clips: int = 3
    order_max_gap: int = 8
    transform_ops: tuple = DEFAULT_TRANSFORMS
    device: str = "cpu"
    workers: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    nce: C.NCEConfig = field(default_factory=C.NCEConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.lr_milestones = tuple(float(v) for v in self.lr_milestones)
        self.resize = tuple(int(v) for v in self.resize)
        self.transform_ops = tuple(self.transform_ops)
        shape = (3, self.clip_len, *self.augment.crop_size)
        if self.encoder.input_shape != shape:
            self.encoder = replace(self.encoder, input_shape=shape)
        self.validate()

    def validate(self):
        if self.task not in TASK_NAMES:
            raise ConfigError("task", f"must be one of {TASK_NAMES}, got {self.task!r}")
        if self.task == "none" and not self.use_contrastive:
            raise ConfigError("task", "need a pretext task, contrastive learning, or both")
        if not self.alpha >= 0:
            raise ConfigError("alpha", f"must be >= 0, got {self.alpha}")
        for name in ("batch_size", "clip_len", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs", "must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr", "must be >= 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay", "must be >= 0")
        if any(not 0 < m <= 1 for m in self.lr_milestones):
            raise ConfigError("lr_milestones", "fractions of the schedule must lie in (0, 1]")
        if self.resize and len(self.resize) != 2:
            raise ConfigError("resize", "expected [] or [h, w]")
        if self.resize and (self.augment.crop_size[0] > self.resize[0]
                            or self.augment.crop_size[1] > self.resize[1]):
            raise ConfigError("augment.crop_size", "crop larger than resized frames")
        if self.task in ("rotation", "transform") and \
                self.augment.crop_size[0] != self.augment.crop_size[1]:
            raise ConfigError("augment.crop_size", "rotation-based tasks need square crops")
        if self.pretext_views not in PRETEXT_VIEWS:
            raise ConfigError("pretext_views",
                              f"must be one of {PRETEXT_VIEWS}, got {self.pretext_views!r}")
        build_task(self.task, self.order_clips, self.transform_ops, self.order_max_gap)

    @property
    def use_pretext(self) -> bool:
        return self.task != "none"

    def to_dict(self) -> dict:
        return _plain(asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def total_loss(pretext_loss, contrast_loss, alpha: float):
    """L_pretext + alpha * L_contrast; either term may be None (component disabled).

    With only the contrastive term active the loss is that term alone.
    """
    if pretext_loss is None and contrast_loss is None:
        raise ValueError("at least one loss component is required")
    for name, v in (("pretext", pretext_loss), ("contrast", contrast_loss)):
        if v is None:
            continue
        finite = bool(torch.isfinite(v).all()) if torch.is_tensor(v) else math.isfinite(v)
        if not finite:
            raise DivergenceError(f"non-finite {name} loss: {v}")
    if contrast_loss is None:
        return pretext_loss
    if pretext_loss is None:
        return contrast_loss
    return pretext_loss + alpha * contrast_loss


# ------------------------------------------------------------------ batches


def view_augment(cfg: TrainConfig) -> AugmentConfig:
    return cfg.augment if cfg.use_augment else replace(cfg.augment, enabled=False)


def make_item(cfg: TrainConfig, task, frames, seed: int):
    """Tensors for one video: ``views`` [V, 3, T, H, W] and a pretext label.

    Single-clip tasks: view 0 carries the pretext transformation, view 1 (only
    built when contrastive learning is on) is a second clip of the same video,
    transformed according to ``cfg.pretext_views``.
    Multi-clip tasks: the shuffled clips are the views; clips 0 and 1 double as
    the positive pair.
    """
    rng = np.random.default_rng(seed)
    aug = view_augment(cfg)
    resize = cfg.resize or None

    def clip_fn(f, start, r):
        return prepare_clip(f, start, cfg.clip_len, aug, r, cfg.use_residual, True, resize)

    label, label2 = -1, -1
    if isinstance(task, OrderTask):
        inst = task.make_instance(frames, clip_fn, clip_span(cfg.clip_len, cfg.use_residual), rng)
        views, label = [c.data for c in inst.clips], inst.label
    else:
        v1 = clip_fn(frames, None, rng)
        v2 = clip_fn(frames, None, rng) if cfg.use_contrastive else None
        if task is not None:
            inst = task.make_instance(v1, rng)
            v1, label = inst.clips[0], inst.label
            if v2 is not None and cfg.pretext_views == "independent":
                inst2 = task.make_instance(v2, rng)
                v2, label2 = inst2.clips[0], inst2.label
            elif v2 is not None and cfg.pretext_views == "shared":
                v2, label2 = task.apply(v2, label), label
        views = [v1.data] + ([v2.data] if v2 is not None else [])
    return np.stack(views), label, label2


def make_batch(cfg, task, dataset, records, seeds, pool=None):
    fn = lambda rs: make_item(cfg, task, dataset.frames(rs[0]), rs[1])
    items = list(pool.map(fn, zip(records, seeds)) if pool else map(fn, zip(records, seeds)))
    views = torch.from_numpy(np.stack([it[0] for it in items]))
    labels = torch.tensor([it[1] for it in items], dtype=torch.long)
    labels2 = torch.tensor([it[2] for it in items], dtype=torch.long)
    return views, labels, labels2


def forward_losses(model: PCLModel, cfg: TrainConfig, views, labels, labels2=None,
                   negatives=None, reduction="mean"):
    """Component losses for a prepared batch.

    ``views``: ``[B, V, 3, T, H, W]``. ``negatives`` is a pair of ``[B, k, 128]``
    tensors for the two directions, or None for in-batch negatives. Returns
    ``(pretext_loss, contrast_loss, z1, z2)`` with disabled parts as None.
    """
    b, v = views.shape[:2]
    feats = model.encode(views.reshape(b * v, *views.shape[2:])).reshape(b, v, -1)
    lp = lc = z1 = z2 = None
    if cfg.use_pretext:
        head = model.pretext_head
        if head.n_clips > 1:
            logits = model.classify_pretext(feats[:, :head.n_clips].reshape(b, -1))
            lp = F.cross_entropy(logits, labels, reduction=reduction)
        else:
            lp = F.cross_entropy(model.classify_pretext(feats[:, 0]), labels, reduction=reduction)
            if labels2 is not None and cfg.pretext_views != "primary" and cfg.use_contrastive:
                lp2 = F.cross_entropy(model.classify_pretext(feats[:, 1]), labels2,
                                      reduction=reduction)
                lp = 0.5 * (lp + lp2)
    if cfg.use_contrastive:
        z = model.project(feats[:, :2].reshape(b * 2, -1)).reshape(b, 2, -1)
        z1, z2 = z[:, 0], z[:, 1]
        if negatives is _NO_LOSS:
            return lp, None, z1, z2
        if negatives is None:
            n1, n2 = C.in_batch_negatives(z1), C.in_batch_negatives(z2)
        else:
            n1, n2 = negatives
        lc = C.nce_loss(z1, z2, n1, n2, cfg.nce.temperature, reduction=reduction)
    return lp, lc, z1, z2


_NO_LOSS = object()


# -------------------------------------------------------------------- state


@dataclass
class TrainState:
    config: TrainConfig
    model: PCLModel
    optimizer: torch.optim.Optimizer
    scheduler: object
    bank: C.EmbeddingBank
    train_ids: list
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = -1
    history: list = field(default_factory=list)

    def state_dict(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "train_config": self.config.to_dict(),
            "encoder_config": asdict(self.config.encoder),
            "head_configs": head_configs(self.model),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "bank": self.bank.state_dict(),
            "train_ids": list(self.train_ids),
            "epoch": self.epoch,
            "best_metric": self.best_metric,
            "best_epoch": self.best_epoch,
            "history": self.history,
            "torch_rng": torch.get_rng_state(),
        }


def build_model(cfg: TrainConfig) -> PCLModel:
    task = build_task(cfg.task, cfg.order_clips, cfg.transform_ops, cfg.order_max_gap)
    n_cls = task.n_classes if task is not None else 0
    n_clips = task.n_clips if task is not None else 1
    return PCLModel(cfg.encoder, n_cls, n_clips, use_projection=True)


def init_state(cfg: TrainConfig, train_ids) -> TrainState:
    torch.manual_seed(derive_seed(cfg.seed, "model") % (2 ** 31))
    model = build_model(cfg).to(cfg.device)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    milestones = sorted({max(1, int(round(m * cfg.epochs))) for m in cfg.lr_milestones})
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones, gamma=cfg.lr_gamma)
    bank = C.init_bank(len(train_ids), model.projector.out_dim,
                       np.random.default_rng(derive_seed(cfg.seed, "bank")), cfg.nce.momentum)
    return TrainState(cfg, model, opt, sched, bank, list(train_ids))


def save_checkpoint(state: TrainState, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state.state_dict(), tmp)
    tmp.replace(path)


def load_checkpoint(path, device=None):
    """Returns the raw checkpoint dict and a rebuilt ``TrainState``.

    ``device`` overrides the device recorded in the checkpoint.
    """
    from .config import train_config_from_dict

    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format_version") != CHECKPOINT_VERSION:
        got = ckpt.get("format_version") if isinstance(ckpt, dict) else None
        raise ConfigError("format_version", f"unsupported checkpoint {got}")
    cfg = train_config_from_dict(ckpt["train_config"])
    if device is not None:
        cfg.device = device
    state = init_state(cfg, ckpt["train_ids"])
    state.model.load_state_dict(ckpt["model"])
    state.optimizer.load_state_dict(ckpt["optimizer"])
    state.scheduler.load_state_dict(ckpt["scheduler"])
    state.bank = C.EmbeddingBank.from_state_dict(ckpt["bank"])
    state.epoch = ckpt["epoch"]
    state.best_metric = ckpt["best_metric"]
    state.best_epoch = ckpt["best_epoch"]
    state.history = list(ckpt["history"])
    torch.set_rng_state(ckpt["torch_rng"])
    return ckpt, state


# --------------------------------------------------------------- validation


@torch.no_grad()
def validation_losses(state: TrainState, records, dataset) -> np.ndarray:
    """Per-video total self-supervised loss on held-out videos (eval mode).

    Each video's clips and bank negatives come from seeds derived from its id,
    so the value of a video does not depend on which other videos are scored.
    """
    cfg, model, bank = state.config, state.model, state.bank
    if not records:
        raise ConfigError("val", "validation split is empty")
    task = build_task(cfg.task, cfg.order_clips, cfg.transform_ops, cfg.order_max_gap)
    was_training = model.training
    model.eval()
    k = min(cfg.nce.n_negatives, bank.size)
    out = []
    try:
        for i in range(0, len(records), cfg.batch_size):
            chunk = records[i:i + cfg.batch_size]
            seeds = [derive_seed(cfg.seed, r.video_id, "val") for r in chunk]
            views, labels, labels2 = make_batch(cfg, task, dataset, chunk, seeds)
            negs = None
            if cfg.use_contrastive:
                idx = np.stack([np.random.default_rng(derive_seed(cfg.seed, r.video_id, "val-neg"))
                                .choice(bank.size, size=k, replace=False) for r in chunk])
                negs = (torch.from_numpy(bank.memory[0, idx]).to(cfg.device),
                        torch.from_numpy(bank.memory[1, idx]).to(cfg.device))
            lp, lc, _, _ = forward_losses(model, cfg, views.to(cfg.device), labels.to(cfg.device),
                                          labels2.to(cfg.device), negs, reduction="none")
            out.append(total_loss(lp, lc, cfg.alpha).double().cpu().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(out)


def validation_metric(state: TrainState, records, dataset) -> float:
    """Negated mean validation loss, so larger is better."""
    return -float(np.mean(validation_losses(state, records, dataset)))


# -------------------------------------------------------------------- train


@torch.no_grad()
def fill_bank(state: TrainState, dataset, records):
    """Overwrite both bank views with embeddings of the current network.

    Uses batch statistics (train mode) so rows match what training produces.
    """
    cfg, model, bank = state.config, state.model, state.bank
    task = build_task(cfg.task, cfg.order_clips, cfg.transform_ops, cfg.order_max_gap)
    index = {vid: i for i, vid in enumerate(state.train_ids)}
    was_training = model.training
    model.train()
    try:
        for i in range(0, len(records), cfg.batch_size):
            chunk = records[i:i + cfg.batch_size]
            seeds = [derive_seed(cfg.seed, r.video_id, "bank-init") for r in chunk]
            views, labels, labels2 = make_batch(cfg, task, dataset, chunk, seeds)
            _, _, z1, z2 = forward_losses(model, cfg, views.to(cfg.device), labels.to(cfg.device),
                                          labels2.to(cfg.device), negatives=_NO_LOSS)
            rows = np.array([index[r.video_id] for r in chunk])
            bank.memory[0, rows] = z1.cpu().numpy()
            bank.memory[1, rows] = z2.cpu().numpy()
    finally:
        model.train(was_training)


class MetricsLog:
    """Append-only JSON lines. Wall-clock timings go to a sibling file so the
    metrics file itself is reproducible byte for byte."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / "metrics.jsonl"
        self.timing_path = Path(run_dir) / "timing.jsonl"

    def append(self, record: dict, wall_time: float):
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        with open(self.timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": record["epoch"], "wall_time": wall_time}) + "\n")


def _mean(xs):
    return float(np.mean(xs)) if xs else None


def train_epoch(state: TrainState, dataset, records, pool=None) -> dict:
    cfg, model, bank = state.config, state.model, state.bank
    task = build_task(cfg.task, cfg.order_clips, cfg.transform_ops, cfg.order_max_gap)
    index = {vid: i for i, vid in enumerate(state.train_ids)}
    epoch = state.epoch
    order = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch)).permutation(len(records))
    k = min(cfg.nce.n_negatives, bank.size - 1)
    model.train()
    parts = {"pretext": [], "contrast": [], "total": []}
    for start in range(0, len(order), cfg.batch_size):
        chunk = [records[j] for j in order[start:start + cfg.batch_size]]
        if len(chunk) < 2:
            continue
        seeds = [derive_seed(cfg.seed, r.video_id, epoch, "train") for r in chunk]
        views, labels, labels2 = make_batch(cfg, task, dataset, chunk, seeds, pool)
        views, labels, labels2 = (t.to(cfg.device) for t in (views, labels, labels2))
        anchors = np.array([index[r.video_id] for r in chunk])
        negs = None
        if cfg.use_contrastive and cfg.nce.mode == "bank":
            idx = C.sample_negative_batch(bank, anchors, k)
            negs = (torch.from_numpy(bank.memory[0, idx]).to(cfg.device),
                    torch.from_numpy(bank.memory[1, idx]).to(cfg.device))
        lp, lc, z1, z2 = forward_losses(model, cfg, views, labels, labels2, negs)
        try:
            loss = total_loss(lp, lc, cfg.alpha)
            if float(loss.detach()) > DIVERGENCE_LIMIT:
                raise DivergenceError(f"loss {float(loss):.4g} exceeds {DIVERGENCE_LIMIT:g}")
        except DivergenceError:
            log.error("divergence at epoch %d on videos %s", epoch, [r.video_id for r in chunk])
            raise
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        if cfg.use_contrastive:
            C.update_bank(bank, anchors, 0, z1.detach().double().cpu().numpy())
            C.update_bank(bank, anchors, 1, z2.detach().double().cpu().numpy())
        if lp is not None:
            parts["pretext"].append(lp.item())
        if lc is not None:
            parts["contrast"].append(lc.item())
        parts["total"].append(loss.item())
    state.scheduler.step()
    return {name: _mean(v) for name, v in parts.items()}


def train(config: TrainConfig, dataset, run_dir=None, resume=None,
          stop_after: Optional[int] = None) -> TrainState:
    """Pretrain on ``dataset``'s train split, selecting on its val split.

    ``resume`` continues from a checkpoint; ``stop_after`` ends the run after
    that many total epochs (for interrupted-run tests). The best checkpoint
    by validation metric is written to ``run_dir/best.pt``.
    """
    train_records = dataset.split("train")
    val_records = dataset.split("val")
    if not train_records:
        raise ConfigError("train", "training split is empty")
    if not val_records:
        raise ConfigError("val", "validation split is empty")
    if config.use_contrastive and config.nce.mode == "bank" and len(train_records) < 2:
        raise ConfigError("nce", "memory bank needs at least two training videos")

    if resume is not None:
        _, state = load_checkpoint(resume)
        config = state.config
    else:
        state = init_state(config, [r.video_id for r in train_records])
    run_dir = Path(run_dir) if run_dir is not None else None
    logbook = MetricsLog(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    if resume is None and config.use_contrastive and config.nce.bank_init == "features":
        fill_bank(state, dataset, train_records)
    end = config.epochs if stop_after is None else min(config.epochs, stop_after)
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        while state.epoch < end:
            t0 = time.time()
            lr = state.optimizer.param_groups[0]["lr"]
            parts = train_epoch(state, dataset, train_records, pool)
            metric = validation_metric(state, val_records, dataset)
            record = {"epoch": state.epoch, "lr": lr, "val_metric": metric,
                      "loss_pretext": parts["pretext"], "loss_contrast": parts["contrast"],
                      "loss_total": parts["total"]}
            state.history.append(record)
            improved = metric > state.best_metric
            if improved:
                state.best_metric, state.best_epoch = metric, state.epoch
            state.epoch += 1
            if run_dir is not None:
                if improved:
                    save_checkpoint(state, run_dir / "best.pt")
                save_checkpoint(state, run_dir / "last.pt")
                logbook.append(record, time.time() - t0)
            log.info("epoch %d  total %.4f  val %.4f%s", record["epoch"], parts["total"] or 0.0,
                     metric, "  *" if improved else "")
    finally:
        if pool is not None:
            pool.shutdown()
    return state
