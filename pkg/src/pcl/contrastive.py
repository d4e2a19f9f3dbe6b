"""NCE objective over projected clip embeddings with a per-video memory bank."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BoundsError, ConfigError, ContractError, DomainError
from .videodata.clip import as_rng

UNIT_TOL = 1e-3


@dataclass
class NCEConfig:
    temperature: float = 0.07
    n_negatives: int = 1024  # clamped to N - 1 at bank construction
    momentum: float = 0.5
    # "bank": k negatives from the memory bank; "batch": the other videos of the batch
    mode: str = "bank"
    # "features": fill the bank from the untrained network before step one;
    # "random": keep the random unit rows from init_bank
    bank_init: str = "features"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.temperature > 0:
            raise ConfigError("temperature", "must be > 0")
        if self.n_negatives < 1:
            raise ConfigError("n_negatives", "must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum", "must be in [0, 1)")
        if self.mode not in ("bank", "batch"):
            raise ConfigError("mode", f"must be 'bank' or 'batch', got {self.mode!r}")
        if self.bank_init not in ("features", "random"):
            raise ConfigError("bank_init", f"must be 'features' or 'random', got {self.bank_init!r}")


def _check_unit(x, name):
    if torch.is_tensor(x):
        x = x.detach().cpu().double().numpy()
    norms = np.linalg.norm(x, axis=-1)
    dev = float(np.abs(norms - 1.0).max()) if norms.size else 0.0
    if dev > UNIT_TOL:
        raise ContractError(f"{name} is not unit-norm (max deviation {dev:.3g})")


def similarity(z_a, z_b, temperature: float) -> float:
    """exp(<z_a, z_b> / temperature) for unit vectors."""
    a = np.asarray(z_a, dtype=np.float64)
    b = np.asarray(z_b, dtype=np.float64)
    _check_unit(a, "z_a")
    _check_unit(b, "z_b")
    return math.exp(float(a @ b) / temperature)


def nce_direction(anchor, positive, negatives, temperature):
    """Per-item -log(D(a,p) / (D(a,p) + sum_j D(a,n_j))), computed in log space.

    ``anchor``/``positive``: ``[B, d]``; ``negatives``: ``[B, k, d]``.
    """
    pos = (anchor * positive).sum(-1, keepdim=True) / temperature
    neg = torch.einsum("bd,bkd->bk", anchor, negatives) / temperature
    logits = torch.cat([pos, neg], dim=1)
    return torch.logsumexp(logits, dim=1) - pos.squeeze(1)


def nce_loss(z1, z2, negatives_1, negatives_2, temperature: float, reduction="mean"):
    """Two-direction NCE loss, summed over directions and averaged over the batch.

    View-1 anchors are contrasted against ``negatives_1`` (drawn from the
    view-1 bank) and view-2 anchors against ``negatives_2``.
    """
    if z1.dim() == 1:
        z1, z2 = z1[None], z2[None]
        negatives_1, negatives_2 = negatives_1[None], negatives_2[None]
    if negatives_1.shape[1] == 0 or negatives_2.shape[1] == 0:
        raise DomainError("NCE needs at least one negative per direction")
    for t, name in ((z1, "z1"), (z2, "z2"), (negatives_1, "negatives_1"),
                    (negatives_2, "negatives_2")):
        _check_unit(t, name)
    per_item = (nce_direction(z1, z2, negatives_1, temperature)
                + nce_direction(z2, z1, negatives_2, temperature))
    if reduction == "none":
        return per_item
    return per_item.mean()


def in_batch_negatives(z: torch.Tensor) -> torch.Tensor:
    """For each row i, the other rows of the same view: ``[B, B-1, d]``."""
    b = z.shape[0]
    if b < 2:
        raise DomainError("in-batch negatives need a batch of at least two")
    idx = torch.tensor([[j for j in range(b) if j != i] for i in range(b)])
    return z[idx]


def in_batch_nce_loss(z1, z2, temperature: float):
    return nce_loss(z1, z2, in_batch_negatives(z1), in_batch_negatives(z2), temperature)


class EmbeddingBank:
    """Two ``[N, dim]`` banks of unit vectors, one per view, row i = video i."""

    def __init__(self, memory: np.ndarray, momentum: float, rng=None):
        if memory.ndim != 3 or memory.shape[0] != 2:
            raise DomainError(f"bank memory must be [2, N, dim], got {memory.shape}")
        self.memory = memory
        self.momentum = momentum
        self.rng = as_rng(rng)

    @property
    def size(self) -> int:
        return self.memory.shape[1]

    @property
    def dim(self) -> int:
        return self.memory.shape[2]

    def state_dict(self):
        return {"memory": self.memory.copy(), "momentum": self.momentum,
                "rng": self.rng.bit_generator.state}

    @classmethod
    def from_state_dict(cls, state):
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        return cls(np.array(state["memory"]), state["momentum"], rng)


def init_bank(n: int, dim: int = 128, rng=None, momentum: float = 0.5) -> EmbeddingBank:
    """Random unit rows, reproducible per seed."""
    rng = as_rng(rng)
    mem = rng.standard_normal((2, n, dim))
    mem /= np.linalg.norm(mem, axis=-1, keepdims=True)
    return EmbeddingBank(mem.astype(np.float32), momentum, rng)


def sample_negative_indices(n: int, anchor: int, k: int, rng) -> np.ndarray:
    if not 0 <= anchor < n:
        raise BoundsError(f"anchor {anchor} outside bank of size {n}")
    if k > n - 1:
        raise BoundsError(f"cannot draw {k} negatives from {n - 1} candidates")
    idx = rng.choice(n - 1, size=k, replace=False)
    return idx + (idx >= anchor)


def sample_negatives(bank: EmbeddingBank, anchor_video_index: int, k: int, view: int = 0,
                     rng=None) -> np.ndarray:
    """``k`` rows of the ``view`` bank, uniform without replacement, excluding the anchor."""
    rng = bank.rng if rng is None else as_rng(rng)
    idx = sample_negative_indices(bank.size, anchor_video_index, k, rng)
    return bank.memory[view, idx]


def sample_negative_batch(bank: EmbeddingBank, anchors, k: int):
    """Index array ``[B, k]`` shared by both views, one draw per anchor."""
    return np.stack([sample_negative_indices(bank.size, int(a), k, bank.rng) for a in anchors])


def update_bank(bank: EmbeddingBank, video_index, view: int, new_embedding, m=None):
    """row <- normalize(m * row + (1 - m) * new)."""
    m = bank.momentum if m is None else m
    idx = np.atleast_1d(np.asarray(video_index))
    new = np.asarray(new_embedding, dtype=np.float64).reshape(len(idx), -1)
    if idx.min() < 0 or idx.max() >= bank.size:
        raise BoundsError(f"bank index out of range [0, {bank.size})")
    _check_unit(new, "new_embedding")
    mixed = m * bank.memory[view, idx].astype(np.float64) + (1.0 - m) * new
    mixed /= np.maximum(np.linalg.norm(mixed, axis=-1, keepdims=True), 1e-12)
    bank.memory[view, idx] = mixed.astype(bank.memory.dtype)
