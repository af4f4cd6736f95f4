"""Joint attention over image regions and report sentences.

Visual scores are conditioned on the pooled text vector and text scores on
the pooled image vector; a single softmax then spreads one unit of mass over
all G + N feature columns, and the context vector is the weighted sum of
those columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError, NumericError
from .nn import Module, Parameter
from .tensor import Tensor, get_default_dtype


@dataclass
class AttentionResult:
    alpha: Tensor    # (B, G + N)
    context: Tensor  # (B, M)
    z_sv: Tensor     # (B, M, G)
    z_vs: Tensor     # (B, M, N)

    @property
    def num_regions(self) -> int:
        return self.z_sv.shape[-1]

    def image_weights(self) -> np.ndarray:
        return self.alpha.data[..., :self.num_regions]

    def text_weights(self) -> np.ndarray:
        return self.alpha.data[..., self.num_regions:]


def _finite(t: Tensor, stage: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"dual attention: non-finite values at stage '{stage}'")
    return t


class DualAttention(Module):
    """Parameters: embeddings for V and S, W_v, W_v' (M x C), W_s, W_s' (M x D), w (M), scalar b.

    The text embedding has no bias so an all-zero (absent) report stays zero
    after embedding.
    """

    def __init__(self, channels: int, hidden: int, attn_dim: int, rng: np.random.Generator):
        super().__init__()
        if attn_dim != channels or hidden != channels:
            raise ConfigError("M", f"context vector needs M == C == D, got M={attn_dim}, C={channels}, D={hidden}")
        C, D, M = channels, hidden, attn_dim
        bound = 1.0 / np.sqrt(M)
        u = lambda *shape: rng.uniform(-bound, bound, shape)  # noqa: E731
        self.embed_v = Parameter(u(C, C))
        self.embed_v_bias = Parameter(np.zeros((C, 1)))
        self.embed_s = Parameter(u(D, D))
        self.W_v = Parameter(u(M, C))
        self.W_v2 = Parameter(u(M, C))
        self.W_s = Parameter(u(M, D))
        self.W_s2 = Parameter(u(M, D))
        self.w = Parameter(u(1, M))
        self.b = Parameter(np.zeros(1))
        self.channels, self.hidden, self.attn_dim = C, D, M

    def embed_inputs(self, V_raw: Tensor, S_raw: Tensor) -> tuple[Tensor, Tensor]:
        """V = tanh(1x1 conv of V_raw), S = tanh(linear map of S_raw); sizes unchanged."""
        if V_raw.shape[-2] != self.channels or S_raw.shape[-2] != self.hidden:
            raise DimensionError(
                f"embed_inputs: expected V ({self.channels} x G) and S ({self.hidden} x N), "
                f"got {V_raw.shape} and {S_raw.shape}")
        V = ops.tanh(ops.add(ops.matmul(self.embed_v, V_raw), self.embed_v_bias))
        S = ops.tanh(ops.matmul(self.embed_s, S_raw))
        return V, S

    def attend(self, V: Tensor, S: Tensor) -> AttentionResult:
        """Attention over embedded features V (B, C, G) and S (B, D, N).

        Unbatched (C, G) / (D, N) inputs are accepted and give unbatched results.
        """
        single = V.ndim == 2
        if single:
            V = ops.reshape(V, (1,) + V.shape)
            S = ops.reshape(S, (1,) + S.shape)
        if V.ndim != 3 or S.ndim != 3 or V.shape[0] != S.shape[0]:
            raise DimensionError(f"attend: incompatible V {V.shape} and S {S.shape}")
        if V.shape[1] != self.channels or S.shape[1] != self.hidden:
            raise DimensionError(f"attend: V {V.shape} / S {S.shape} do not match C={self.channels}, D={self.hidden}")
        B, _, G = V.shape
        N = S.shape[2]
        M = self.attn_dim

        # Conditioning terms (W_s' mean(S)) and (W_v' mean(V)) as (B, M, 1) columns.
        text_ctx = ops.reshape(ops.matmul(ops.global_avg_pool(S), ops.transpose(self.W_s2)), (B, M, 1))
        img_ctx = ops.reshape(ops.matmul(ops.global_avg_pool(V), ops.transpose(self.W_v2)), (B, M, 1))
        z_sv = _finite(ops.tanh(ops.add(ops.matmul(self.W_v, V), text_ctx)), "z_s->v")
        z_vs = _finite(ops.tanh(ops.add(ops.matmul(self.W_s, S), img_ctx)), "z_v->s")

        e = ops.reshape(ops.matmul(self.w, ops.concat_cols(z_sv, z_vs)), (B, G + N))
        e = _finite(ops.add(e, self.b), "scores")
        alpha = ops.softmax(e)

        O = ops.concat_cols(V, S)
        context = ops.reshape(ops.matmul(O, ops.reshape(alpha, (B, G + N, 1))), (B, self.channels))
        _finite(context, "context")
        if single:
            return AttentionResult(ops.reshape(alpha, (G + N,)), ops.reshape(context, (self.channels,)),
                                   ops.reshape(z_sv, (M, G)), ops.reshape(z_vs, (M, N)))
        return AttentionResult(alpha, context, z_sv, z_vs)

    def attend_image_only(self, V: Tensor, num_sentences: int) -> AttentionResult:
        """``attend`` with the text matrix replaced by zeros."""
        shape = (self.hidden, num_sentences) if V.ndim == 2 else (V.shape[0], self.hidden, num_sentences)
        return self.attend(V, Tensor(np.zeros(shape, dtype=V.dtype)))

    def __call__(self, V_raw: Tensor, S_raw: Tensor) -> AttentionResult:
        return self.attend(*self.embed_inputs(V_raw, S_raw))


def attend(V: Tensor, S: Tensor, params: DualAttention) -> AttentionResult:
    return params.attend(V, S)


def attend_image_only(V: Tensor, params: DualAttention, num_sentences: int) -> AttentionResult:
    return params.attend_image_only(V, num_sentences)


def zeros_like_text(batch: int, hidden: int, num_sentences: int) -> Tensor:
    return Tensor(np.zeros((batch, hidden, num_sentences), dtype=get_default_dtype()))
