"""Training loop, evaluation and the experiments built on them."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .corpus import CLASS_NAMES, Corpus, SamplePair, split_by_patient
from .errors import ConfigError, DivergenceError, InputError, NumericError, TandemError
from .head import ModalityPolicy
from .model import Batch, ModelConfig, build_model
from .nn import Module
from .optim import SGD, Adam, Optimizer, clip_grad_norm, global_grad_norm
from .tensor import fresh_tape, no_grad, set_default_dtype
from .text_encoder import pad_reports

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimisation settings.

    Defaults suit the desk-scale corpus. ``full_scale()`` uses Adam at 1e-4,
    meant for much longer runs; at desk scale the LSTM never picks up the
    text at that rate.
    """

    epochs: int = 30
    batch_size: int = 16
    cnn_lr: float = 1e-2
    cnn_momentum: float = 0.9
    attention_lr: float = 3e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lr_decay: float = 0.9
    clip_norm: float = 0.1
    drop_rate: float = 0.5
    val_fraction: float = 0.2
    select_on: str = "without_text"
    seed: int = 0
    dtype: str = "float64"
    eval_batch_size: int = 64
    augment: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.cnn_lr <= 0 or self.attention_lr <= 0:
            raise ConfigError("lr", "learning rates must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm", "must be positive")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ConfigError("drop_rate", f"must lie in [0, 1), got {self.drop_rate}")
        if self.select_on not in ("without_text", "with_text", "mean", "last"):
            raise ConfigError("select_on", f"unknown selection rule {self.select_on!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size", "batch size must be >= 1 and epochs >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        return cls(**{"attention_lr": 1e-4, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


@dataclass
class EpochStats:
    epoch: int
    loss: float
    accuracy: float
    clip_events: int = 0
    max_attention_norm: float = 0.0


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray          # rows = true class, columns = predicted
    per_class_accuracy: np.ndarray
    loss: float
    count: int


def rgb_mean(samples: Sequence[SamplePair]) -> np.ndarray:
    acc = np.zeros(3)
    for s in samples:
        acc += s.image.reshape(3, -1).mean(axis=1)
    return acc / (255.0 * len(samples))


def dihedral(image: np.ndarray, k: int) -> np.ndarray:
    """One of the 8 square symmetries: ``k % 4`` quarter turns, mirrored when ``k >= 4``."""
    out = np.rot90(image, k % 4, axes=(-2, -1))
    return out[..., ::-1] if k >= 4 else out


def make_batch(samples: Sequence[SamplePair], mean: np.ndarray, rng: np.random.Generator | None = None,
               with_text: bool = True, augment: bool = False) -> Batch:
    """Stack images (scaled to [0, 1], mean-subtracted) and pad one report per sample.

    With an rng the report variant is drawn uniformly; without one variant 0 is used.
    ``augment`` (needs the rng) applies a random mirror/rotation per image.
    """
    raw = [s.image for s in samples]
    if augment and rng is not None:
        raw = [dihedral(im, int(rng.integers(8))) for im in raw]
    images = np.stack(raw).astype(np.float64) / 255.0 - mean[None, :, None, None]
    labels = np.array([s.label for s in samples], dtype=np.int64)
    if not with_text:
        return Batch(images, labels)
    reports = [s.reports[rng.integers(len(s.reports))] if rng is not None else s.reports[0] for s in samples]
    tokens, ends = pad_reports(reports)
    return Batch(images, labels, tokens, ends)


class Trainer:
    """Owns a model, its two optimizer groups and the training rng."""

    def __init__(self, model: Module, cfg: TrainConfig, mean: np.ndarray, rng: np.random.Generator | None = None,
                 kind: str = "tandem"):
        self.model = model
        self.cfg = cfg
        self.mean = np.asarray(mean, dtype=np.float64)
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.kind = kind
        self.epoch = 0
        groups = model.param_groups()
        self.optimizers: dict[str, Optimizer] = {
            "cnn": SGD(groups["cnn"], lr=cfg.cnn_lr, momentum=cfg.cnn_momentum, decay=cfg.lr_decay),
            "attention": Adam(groups["attention"], lr=cfg.attention_lr, betas=cfg.adam_betas, eps=cfg.adam_eps,
                              decay=cfg.lr_decay),
        }
        self.history: list[dict] = []

    @classmethod
    def create(cls, model_cfg: ModelConfig, cfg: TrainConfig, train: Corpus, kind: str = "tandem") -> "Trainer":
        set_default_dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        model = build_model(kind, model_cfg, rng)
        return cls(model, cfg, rgb_mean(train.samples), rng, kind)

    @property
    def policy_train(self) -> ModalityPolicy:
        return ModalityPolicy(self.cfg.drop_rate, "train", True)

    def train_step(self, batch: Batch) -> tuple[float, np.ndarray, float]:
        for opt in self.optimizers.values():
            opt.zero_grad()
        with fresh_tape() as tape:
            try:
                out = self.model.forward(batch, self.policy_train, self.rng)
                loss = ops.cross_entropy(out.logits, batch.labels)
            except NumericError as exc:
                raise DivergenceError(f"training diverged at epoch {self.epoch}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite training loss at epoch {self.epoch}")
            tape.backward(loss)
        pre = clip_grad_norm(self.optimizers["attention"].params, self.cfg.clip_norm)
        for opt in self.optimizers.values():
            opt.step()
        return float(loss.data), out.logits.data.argmax(axis=1), pre

    def train_epoch(self, samples: Sequence[SamplePair]) -> EpochStats:
        if not samples:
            raise InputError("training corpus is empty")
        self.model.train()
        order = self.rng.permutation(len(samples))
        total_loss = 0.0
        correct = 0
        clips = 0
        max_norm = 0.0
        for start in range(0, len(order), self.cfg.batch_size):
            chunk = [samples[i] for i in order[start:start + self.cfg.batch_size]]
            batch = make_batch(chunk, self.mean, self.rng, with_text=self.kind == "tandem", augment=self.cfg.augment)
            loss, pred, pre = self.train_step(batch)
            total_loss += loss * len(chunk)
            correct += int((pred == batch.labels).sum())
            clips += pre > self.cfg.clip_norm
            max_norm = max(max_norm, global_grad_norm(self.optimizers["attention"].params))
        for opt in self.optimizers.values():
            opt.end_epoch()
        self.epoch += 1
        return EpochStats(self.epoch, total_loss / len(samples), correct / len(samples), int(clips), max_norm)

    def evaluate(self, samples: Sequence[SamplePair], text_available: bool) -> EvalReport:
        return evaluate(self.model, samples, text_available, self.cfg.drop_rate, self.mean,
                        self.cfg.eval_batch_size, self.kind)

    def fit(self, train: Sequence[SamplePair], val: Sequence[SamplePair] | None = None,
            epochs: int | None = None, callback: Callable[[dict], None] | None = None) -> list[dict]:
        """Train for ``epochs``; keep the weights with the best validation score."""
        epochs = self.cfg.epochs if epochs is None else epochs
        best_score, best_state = -np.inf, None
        for _ in range(epochs):
            stats = self.train_epoch(train)
            row = {"epoch": stats.epoch, "split": "train", "loss": stats.loss,
                   "acc_with_text": stats.accuracy, "acc_without_text": float("nan")}
            self._log(row, callback)
            if val:
                with_text = self.evaluate(val, True)
                without = self.evaluate(val, False)
                row = {"epoch": stats.epoch, "split": "val", "loss": with_text.loss,
                       "acc_with_text": with_text.accuracy, "acc_without_text": without.accuracy}
                self._log(row, callback)
                score = {"without_text": without.accuracy, "with_text": with_text.accuracy,
                         "mean": 0.5 * (without.accuracy + with_text.accuracy),
                         "last": float(stats.epoch)}[self.cfg.select_on]
                if score > best_score:
                    best_score, best_state = score, self.model.state_dict()
        if best_state is not None:
            self.model.load_state_dict(best_state)
        return self.history

    def _log(self, row: dict, callback) -> None:
        self.history.append(row)
        log.info("epoch %(epoch)d %(split)s loss=%(loss).4f acc_text=%(acc_with_text).3f "
                 "acc_notext=%(acc_without_text).3f", row)
        if callback:
            callback(row)


def evaluate(model: Module, samples: Sequence[SamplePair], text_available: bool, drop_rate: float,
             mean: np.ndarray, batch_size: int = 64, kind: str = "tandem") -> EvalReport:
    """Accuracy and confusion matrix in eval mode, report variant 0."""
    if not samples:
        raise InputError("evaluation corpus is empty")
    was_training = model.training
    model.eval()
    policy = ModalityPolicy(drop_rate, "eval", text_available)
    k = len(CLASS_NAMES)
    confusion = np.zeros((k, k), dtype=np.int64)
    total_loss = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = make_batch(chunk, mean, None, with_text=text_available and kind == "tandem")
            out = model.forward(batch, policy)
            total_loss += float(ops.cross_entropy(out.logits, batch.labels).data) * len(chunk)
            pred = out.logits.data.argmax(axis=1)
            np.add.at(confusion, (batch.labels, pred), 1)
    model.train(was_training)
    counts = confusion.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(confusion) / np.maximum(counts, 1), np.nan)
    return EvalReport(float(np.trace(confusion) / len(samples)), confusion, per_class,
                      total_loss / len(samples), len(samples))


def text_attention_stats(model: Module, samples: Sequence[SamplePair], drop_rate: float, mean: np.ndarray,
                         batch_size: int = 64) -> np.ndarray:
    """Mean text attention per (true class, feature type), plus an overall column.

    Row ``y`` column ``j < N`` is the mean of alpha[G + j] over samples of class
    ``y``; column N is the mean over the N feature columns. Empty classes give
    NaN rows.
    """
    if not samples:
        raise InputError("corpus is empty")
    N = model.cfg.num_sentences
    k = len(CLASS_NAMES)
    sums = np.zeros((k, N))
    counts = np.zeros(k)
    was_training = model.training
    model.eval()
    policy = ModalityPolicy(drop_rate, "eval", True)
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            batch = make_batch(chunk, mean)
            att = model.forward(batch, policy).attention
            np.add.at(sums, batch.labels, att.text_weights())
            np.add.at(counts, batch.labels, 1)
    model.train(was_training)
    table = np.full((k, N + 1), np.nan)
    for y in range(k):
        if counts[y] == 0:
            warnings.warn(f"no samples of class {CLASS_NAMES[y]!r}; its attention row is NaN", stacklevel=2)
            continue
        table[y, :N] = sums[y] / counts[y]
        table[y, N] = table[y, :N].mean()
    return table


# ---------------------------------------------------------------------------
# experiments


@dataclass
class RunResult:
    seed: int
    drop_rate: float
    acc_with_text: float
    acc_without_text: float
    trainer: Trainer | None = None
    error: str | None = None


def train_and_test(model_cfg: ModelConfig, cfg: TrainConfig, train: Corpus, test: Corpus,
                   kind: str = "tandem", keep_trainer: bool = False) -> RunResult:
    """Patient-level validation split of ``train``, fit, then score ``test`` with and without text."""
    if cfg.val_fraction > 0:
        fit_part, val_part = split_by_patient(train, cfg.val_fraction, seed=cfg.seed)
    else:
        fit_part, val_part = train, None
    trainer = Trainer.create(model_cfg, cfg, fit_part, kind)
    trainer.fit(fit_part.samples, val_part.samples if val_part else None)
    without = trainer.evaluate(test.samples, False).accuracy
    with_text = trainer.evaluate(test.samples, True).accuracy if kind == "tandem" else without
    return RunResult(cfg.seed, cfg.drop_rate, with_text, without, trainer if keep_trainer else None)


@dataclass
class SweepReport:
    rates: list[float]
    seeds: list[int]
    results: list[RunResult] = field(default_factory=list)

    def table(self) -> np.ndarray:
        """(len(rates), 2) mean accuracy [with text, without text] per rate."""
        out = np.full((len(self.rates), 2), np.nan)
        for i, r in enumerate(self.rates):
            rows = [x for x in self.results if x.drop_rate == r and x.error is None]
            if rows:
                out[i] = [np.mean([x.acc_with_text for x in rows]), np.mean([x.acc_without_text for x in rows])]
        return out

    def write_csv(self, path) -> None:
        table = self.table()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["drop_rate", "acc_with_text", "acc_without_text", "seeds", "errors"])
            for i, r in enumerate(self.rates):
                errs = [x.error for x in self.results if x.drop_rate == r and x.error]
                w.writerow([r, f"{table[i, 0]:.6f}", f"{table[i, 1]:.6f}",
                            " ".join(str(s) for s in self.seeds), "; ".join(errs)])


def drop_rate_sweep(model_cfg: ModelConfig, base_cfg: TrainConfig, train: Corpus, test: Corpus,
                    rates: Sequence[float], seeds: Sequence[int] = (0,)) -> SweepReport:
    """One model per (rate, seed); failures are recorded and the sweep continues."""
    for r in rates:
        if not 0.0 <= r < 1.0:
            raise ConfigError("rates", f"drop rate {r} outside [0, 1)")
    report = SweepReport(list(rates), list(seeds))
    for r in rates:
        for seed in seeds:
            cfg = TrainConfig(**{**base_cfg.to_dict(), "drop_rate": r, "seed": seed})
            try:
                report.results.append(train_and_test(model_cfg, cfg, train, test))
            except TandemError as exc:
                log.warning("sweep cell rate=%s seed=%s failed: %s", r, seed, exc)
                report.results.append(RunResult(seed, r, float("nan"), float("nan"), error=str(exc)))
    return report


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "acc_with_text", "acc_without_text"])
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
