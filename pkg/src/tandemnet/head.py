"""Classifier on top of the context vector, plus modality dropout of the text."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import MLP, Module
from .tensor import Tensor

NUM_CLASSES = 4


@dataclass
class ModalityPolicy:
    """How the text matrix is treated for one forward pass.

    train: S is zeroed per sample with probability ``drop_rate``.
    eval:  S is scaled by ``1 - drop_rate`` when present, zeroed otherwise.
    """

    drop_rate: float = 0.5
    mode: str = "train"
    text_available: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate", f"must lie in [0, 1), got {self.drop_rate}")
        if self.mode not in ("train", "eval"):
            raise ConfigError("mode", f"expected 'train' or 'eval', got {self.mode!r}")


def drop_mask(batch: int, policy: ModalityPolicy, rng: np.random.Generator | None) -> np.ndarray:
    """Per-sample multiplier for S under ``policy`` (shape (batch,))."""
    if not policy.text_available:
        return np.zeros(batch)
    if policy.mode == "eval":
        return np.full(batch, 1.0 - policy.drop_rate)
    if policy.drop_rate == 0.0:
        return np.ones(batch)
    if rng is None:
        raise ValueError("train-mode modality dropout needs an rng")
    return (rng.random(batch) >= policy.drop_rate).astype(np.float64)


def apply_modality_policy(S: Tensor, policy: ModalityPolicy, rng: np.random.Generator | None = None) -> Tensor:
    """Drop, scale or zero the raw text matrix (D, N) or batch (B, D, N)."""
    single = S.ndim == 2
    batch = 1 if single else S.shape[0]
    mask = drop_mask(batch, policy, rng)
    if np.all(mask == 1.0):
        return S
    if not policy.text_available:
        return Tensor(np.zeros(S.shape, dtype=S.dtype))
    shape = (1, 1) if single else (batch, 1, 1)
    return ops.mul(S, Tensor(mask.reshape(shape).astype(S.dtype)))


@dataclass
class ClassPrediction:
    logits: Tensor
    probabilities: np.ndarray
    predicted_class: np.ndarray | int


class PredictionHead(Module):
    """logits = MLP(c + mean(V_raw)), or MLP(c) with the skip connection disabled."""

    def __init__(self, channels: int, attn_dim: int, rng: np.random.Generator, num_classes: int = NUM_CLASSES,
                 skip_connection: bool = True):
        super().__init__()
        if channels != attn_dim:
            raise ConfigError("M", f"skip connection adds mean(V) (C={channels}) to c (M={attn_dim}); need M == C")
        self.mlp = MLP(attn_dim, attn_dim, num_classes, rng)
        self.skip_connection = skip_connection
        self.num_classes = num_classes

    def __call__(self, c: Tensor, V_raw: Tensor) -> Tensor:
        if c.shape[-1] != V_raw.shape[-2]:
            raise DimensionError(f"predict: context {c.shape} and V {V_raw.shape} disagree on channels")
        x = ops.add(c, ops.global_avg_pool(V_raw)) if self.skip_connection else c
        single = x.ndim == 1
        if single:
            x = ops.reshape(x, (1, x.shape[0]))
        logits = self.mlp(x)
        return ops.reshape(logits, (self.num_classes,)) if single else logits


def to_prediction(logits: Tensor) -> ClassPrediction:
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    cls = p.argmax(axis=-1)
    return ClassPrediction(logits, p, int(cls) if cls.ndim == 0 else cls)


def predict(c: Tensor, V_raw: Tensor, head: PredictionHead) -> ClassPrediction:
    return to_prediction(head(c, V_raw))
