"""Report generation by fine-tuning the report LSTM as a decoder.

The pooled image vector, projected to the word-embedding width, is the LSTM
input at t=0; BOS and the reference tokens follow under teacher forcing. The
image encoder never updates. The LSTM and attention parameters stay frozen
for the first ``freeze_attention_epochs`` epochs and are then fine-tuned at
``finetune_lr``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import ops
from .corpus import SamplePair, extract_levels
from .errors import ConfigError, DivergenceError
from .model import TandemNet
from .nn import Linear, Module
from .optim import Adam
from .tensor import Tensor, fresh_tape, get_default_dtype, no_grad
from .text_encoder import LstmState, Vocabulary

log = logging.getLogger(__name__)


@dataclass
class CaptionConfig:
    """Fine-tuning schedule for report generation.

    Learning rates default to desk-scale values; ``full_scale()`` fine-tunes
    at 5e-5.
    """

    freeze_cnn: bool = True
    freeze_attention_epochs: int = 5
    finetune_lr: float = 3e-3
    head_lr: float = 1e-2
    max_decode_length: int = 80
    decode_strategy: str = "greedy"
    batch_size: int = 16

    def __post_init__(self):
        if not self.freeze_cnn:
            raise ConfigError("freeze_cnn", "the image encoder is always frozen during report generation")
        if self.finetune_lr <= 0 or self.head_lr <= 0:
            raise ConfigError("finetune_lr", "learning rates must be positive")
        if self.freeze_attention_epochs < 0:
            raise ConfigError("freeze_attention_epochs", "must be >= 0")
        if self.decode_strategy != "greedy":
            raise ConfigError("decode_strategy", "only greedy decoding is supported")

    @classmethod
    def full_scale(cls, **overrides) -> "CaptionConfig":
        return cls(**{"finetune_lr": 5e-5, "head_lr": 1e-3, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


class Captioner(Module):
    def __init__(self, model: TandemNet, vocab_size: int, rng: np.random.Generator):
        super().__init__()
        self.model = model
        C = model.cfg.encoder.channels
        self.image_proj = Linear(C, model.cfg.embed_dim, rng)
        self.word_out = Linear(model.cfg.hidden, vocab_size, rng)
        # fixed standardisation of the pooled features; without it the shared
        # offset saturates the LSTM gates and the per-image part is lost
        self.feature_mean = np.zeros(C)
        self.feature_std = np.ones(C)

    def fit_feature_stats(self, images: np.ndarray, batch_size: int = 128) -> None:
        pooled = np.concatenate([self._pooled(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
        self.feature_mean = pooled.mean(axis=0)
        self.feature_std = pooled.std(axis=0) + 1e-6

    def param_groups(self) -> dict[str, list]:
        groups = self.model.param_groups()
        groups["caption"] = self.image_proj.parameters() + self.word_out.parameters()
        return groups

    def _pooled(self, images: np.ndarray) -> np.ndarray:
        enc = self.model.encoder
        was = enc.training
        enc.eval()
        with no_grad():
            V = enc(Tensor(images.astype(get_default_dtype(), copy=False)))
            pooled = ops.global_avg_pool(V)
        enc.train(was)
        return pooled.data

    def image_vector(self, images: np.ndarray) -> Tensor:
        """Standardised pooled encoder features (B, C), computed in eval mode and off the tape."""
        z = (self._pooled(images) - self.feature_mean) / self.feature_std
        return Tensor(z.astype(get_default_dtype(), copy=False))

    def teacher_forced_logits(self, images: np.ndarray, tokens: np.ndarray) -> list[Tensor]:
        """Logits (B, vocab) predicting tokens[:, k] for k = 1 .. T-1."""
        text = self.model.text
        x0 = self.image_proj(self.image_vector(images))
        emb = text.embed(tokens[:, :-1])
        inputs = [x0] + [ops.index(emb, (slice(None), t)) for t in range(tokens.shape[1] - 1)]
        hidden = text.lstm.unroll(inputs)
        return [self.word_out(h) for h in hidden[1:]]

    def generate(self, images: np.ndarray, vocab: Vocabulary, max_length: int = 80) -> list[list[int]]:
        """Greedy decoding; each sequence stops at EOS or after ``max_length`` tokens."""
        text = self.model.text
        B = images.shape[0]
        with no_grad():
            state = LstmState.zeros(B, text.hidden_size)
            state = text.lstm.step(self.image_proj(self.image_vector(images)), state)
            token = np.full(B, vocab.bos)
            out: list[list[int]] = [[] for _ in range(B)]
            done = np.zeros(B, dtype=bool)
            for _ in range(max_length):
                state = text.lstm.step(text.embed(token), state)
                token = self.word_out(state.h).data.argmax(axis=1)
                for i in range(B):
                    if not done[i]:
                        if token[i] == vocab.eos:
                            done[i] = True
                        else:
                            out[i].append(int(token[i]))
                if done.all():
                    break
        return out


def _pad_sequences(seqs: Sequence[np.ndarray], pad: int) -> np.ndarray:
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


class CaptionTrainer:
    def __init__(self, captioner: Captioner, cfg: CaptionConfig, mean: np.ndarray, vocab: Vocabulary,
                 rng: np.random.Generator | None = None):
        self.captioner = captioner
        self.cfg = cfg
        self.mean = np.asarray(mean, dtype=np.float64)
        self.vocab = vocab
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.epoch = 0
        self.stats_fitted = False
        groups = captioner.param_groups()
        self.groups = groups
        self.head_opt = Adam(groups["caption"], lr=cfg.head_lr)
        self.finetune_opt = Adam(groups["attention"], lr=cfg.finetune_lr)

    @property
    def attention_frozen(self) -> bool:
        return self.epoch < self.cfg.freeze_attention_epochs

    def _images(self, samples: Sequence[SamplePair]) -> np.ndarray:
        imgs = np.stack([s.image for s in samples]).astype(np.float64) / 255.0
        return imgs - self.mean[None, :, None, None]

    def _targets(self, samples: Sequence[SamplePair], variants: Sequence[int]) -> np.ndarray:
        seqs = []
        for s, v in zip(samples, variants):
            tokens = s.reports[v].tokens
            if len(tokens) > self.cfg.max_decode_length + 1:
                warnings.warn(f"reference of {len(tokens)} tokens truncated to {self.cfg.max_decode_length}",
                              stacklevel=3)
                tokens = np.concatenate([tokens[:self.cfg.max_decode_length], [self.vocab.eos]])
            seqs.append(tokens)
        return _pad_sequences(seqs, self.vocab.pad)

    def loss(self, samples: Sequence[SamplePair], variants: Sequence[int] | None = None) -> Tensor:
        """Mean per-token cross-entropy of the references under teacher forcing."""
        variants = [0] * len(samples) if variants is None else variants
        tokens = self._targets(samples, variants)
        logits = self.captioner.teacher_forced_logits(self._images(samples), tokens)
        targets = tokens[:, 1:]
        mask = (targets != self.vocab.pad).astype(np.float64)
        flat = ops.reshape(ops.stack(logits, axis=1), (-1, len(self.vocab)))
        return ops.cross_entropy(flat, targets.reshape(-1), mask.reshape(-1))

    def train_step(self, samples: Sequence[SamplePair], variants: Sequence[int] | None = None) -> float:
        frozen = list(self.groups["cnn"])
        if self.attention_frozen:
            frozen += self.groups["attention"]
        for p in frozen:
            p.requires_grad = False
            p.grad = np.zeros_like(p.data)
        try:
            self.head_opt.zero_grad()
            if not self.attention_frozen:
                self.finetune_opt.zero_grad()
            with fresh_tape() as tape:
                loss = self.loss(samples, variants)
                if not np.isfinite(loss.data):
                    raise DivergenceError("non-finite caption loss")
                tape.backward(loss)
            self.head_opt.step()
            if not self.attention_frozen:
                self.finetune_opt.step()
        finally:
            for p in frozen:
                p.requires_grad = True
        return float(loss.data)

    def fit_feature_stats(self, samples: Sequence[SamplePair]) -> None:
        self.captioner.fit_feature_stats(self._images(samples))
        self.stats_fitted = True

    def train_epoch(self, samples: Sequence[SamplePair]) -> float:
        """One pass in random order with a random report variant per sample.

        The first call also fixes the feature standardisation from ``samples``.
        """
        if not self.stats_fitted:
            self.fit_feature_stats(samples)
        order = self.rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), self.cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + self.cfg.batch_size]]
            variants = [int(self.rng.integers(len(s.reports))) for s in chunk]
            total += self.train_step(chunk, variants) * len(chunk)
        self.epoch += 1
        return total / len(samples)

    def generate(self, samples: Sequence[SamplePair]) -> list[list[str]]:
        ids = self.captioner.generate(self._images(samples), self.vocab, self.cfg.max_decode_length)
        return [self.vocab.decode(seq) for seq in ids]


def caption_train_step(trainer: CaptionTrainer, sample: SamplePair, variant: int = 0) -> float:
    return trainer.train_step([sample], [variant])


def generate_report(trainer: CaptionTrainer, sample: SamplePair) -> list[str]:
    return trainer.generate([sample])[0]


def slot_accuracy(generated: Sequence[Sequence[str]], samples: Sequence[SamplePair], level_words=None) -> float:
    """Fraction of (sample, feature) slots whose generated severity word matches the truth."""
    from .corpus import LEVEL_WORDS

    words = level_words or LEVEL_WORDS
    hits = total = 0
    for sentences, s in zip(generated, samples):
        levels = extract_levels(sentences, words)
        for j, true_level in enumerate(s.severity):
            total += 1
            hits += levels[j] == int(true_level)
    return hits / total if total else float("nan")
