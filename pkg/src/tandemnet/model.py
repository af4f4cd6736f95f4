"""The full image + report classifier and an image-only baseline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .attention import AttentionResult, DualAttention
from .errors import ConfigError
from .head import NUM_CLASSES, ModalityPolicy, PredictionHead, apply_modality_policy
from .image_encoder import EncoderConfig, ImageEncoder
from .nn import MLP, Module
from .tensor import Tensor, get_default_dtype
from .text_encoder import TextEncoder


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    vocab_size: int = 128
    embed_dim: int = 32          # K
    hidden: int = 64             # D
    attn_dim: int = 64           # M
    num_sentences: int = 5       # N
    num_classes: int = NUM_CLASSES
    skip_connection: bool = True

    def validate(self) -> "ModelConfig":
        C = self.encoder.channels
        if self.attn_dim != C:
            raise ConfigError("attn_dim", f"M must equal the encoder's C={C}, got {self.attn_dim}")
        if self.hidden != C:
            raise ConfigError("hidden", f"D must equal C={C} so [V; S] columns share one space, got {self.hidden}")
        if self.num_sentences < 1:
            raise ConfigError("num_sentences", "N must be at least 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = EncoderConfig(**d["encoder"])
        return cls(**d)

    @classmethod
    def full_scale(cls, vocab_size: int) -> "ModelConfig":
        return cls(encoder=EncoderConfig.full_scale(), vocab_size=vocab_size, embed_dim=128, hidden=256, attn_dim=256)


@dataclass
class Batch:
    images: np.ndarray            # (B, 3, H, W), mean-subtracted
    labels: np.ndarray            # (B,)
    tokens: np.ndarray | None = None   # (B, T)
    ends: np.ndarray | None = None     # (B, N)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class ForwardOutput:
    logits: Tensor
    V_raw: Tensor
    attention: AttentionResult | None = None
    S_raw: Tensor | None = None


class TandemNet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg.encoder, rng)
        self.text = TextEncoder(cfg.vocab_size, cfg.embed_dim, cfg.hidden, cfg.num_sentences, rng)
        self.attention = DualAttention(cfg.encoder.channels, cfg.hidden, cfg.attn_dim, rng)
        self.head = PredictionHead(cfg.encoder.channels, cfg.attn_dim, rng, cfg.num_classes, cfg.skip_connection)

    def param_groups(self) -> dict[str, list]:
        return {
            "cnn": self.encoder.parameters(),
            "attention": self.text.parameters() + self.attention.parameters() + self.head.parameters(),
        }

    def encode_text(self, batch: Batch, policy: ModalityPolicy) -> Tensor:
        B, N, D = len(batch), self.cfg.num_sentences, self.cfg.hidden
        if not policy.text_available or batch.tokens is None:
            return Tensor(np.zeros((B, D, N), dtype=get_default_dtype()))
        return self.text(batch.tokens, batch.ends)

    def forward(self, batch: Batch, policy: ModalityPolicy, rng: np.random.Generator | None = None,
                detach_context: bool = False) -> ForwardOutput:
        images = Tensor(batch.images.astype(get_default_dtype(), copy=False))
        V_raw = self.encoder(images, rng)
        S_raw = apply_modality_policy(self.encode_text(batch, policy), policy, rng)
        att = self.attention(V_raw, S_raw)
        c = ops.detach(att.context) if detach_context else att.context
        return ForwardOutput(self.head(c, V_raw), V_raw, att, S_raw)


class ImageOnlyNet(Module):
    """Same encoder, MLP on the pooled features; text is ignored."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg.encoder, rng)
        C = cfg.encoder.channels
        self.mlp = MLP(C, C, cfg.num_classes, rng)

    def param_groups(self) -> dict[str, list]:
        return {"cnn": self.encoder.parameters(), "attention": self.mlp.parameters()}

    def forward(self, batch: Batch, policy: ModalityPolicy | None = None, rng: np.random.Generator | None = None,
                detach_context: bool = False) -> ForwardOutput:
        images = Tensor(batch.images.astype(get_default_dtype(), copy=False))
        V_raw = self.encoder(images, rng)
        return ForwardOutput(self.mlp(ops.global_avg_pool(V_raw)), V_raw)


def build_model(kind: str, cfg: ModelConfig, rng: np.random.Generator) -> Module:
    if kind == "tandem":
        return TandemNet(cfg, rng)
    if kind == "image-only":
        return ImageOnlyNet(cfg, rng)
    raise ConfigError("model", f"unknown model kind {kind!r}")
