"""Word embedding + LSTM report encoder.

The report is read token by token; the hidden state at each sentence-end
marker becomes one column of S (D x N).
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import ops
from .errors import FormatError
from .nn import Module, Parameter
from .tensor import Tensor, get_default_dtype

PAD, UNK, SEP, BOS, EOS = "<pad>", "<unk>", "<sep>", "<bos>", "<eos>"
RESERVED = (PAD, UNK, SEP, BOS, EOS)

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    pad = property(lambda self: self.stoi[PAD])
    unk = property(lambda self: self.stoi[UNK])
    sep = property(lambda self: self.stoi[SEP])
    bos = property(lambda self: self.stoi[BOS])
    eos = property(lambda self: self.stoi[EOS])

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, sentences: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        counts = Counter(tok for s in sentences for tok in tokenize(s))
        # sorted for a corpus-order-independent index assignment
        return cls(sorted(t for t, c in counts.items() if c >= min_freq))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def encode(self, sentences: Sequence[str]) -> "TokenizedReport":
        """BOS, each sentence's words followed by SEP, then EOS."""
        ids = [self.bos]
        ends = []
        for s in sentences:
            ids.extend(self.index(t) for t in tokenize(s))
            ids.append(self.sep)
            ends.append(len(ids) - 1)
        ids.append(self.eos)
        return TokenizedReport(np.array(ids, dtype=np.int32), np.array(ends, dtype=np.int32))

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Token ids back to sentences; stops at EOS and drops BOS/PAD."""
        sentences, words = [], []
        for i in ids:
            tok = self.itos[int(i)]
            if tok == EOS:
                break
            if tok in (BOS, PAD):
                continue
            if tok == SEP:
                sentences.append(" ".join(words))
                words = []
            else:
                words.append(tok)
        if words:
            sentences.append(" ".join(words))
        return sentences

    def to_text(self) -> str:
        return "".join(f"{tok}\t{i}\n" for i, tok in enumerate(self.itos))

    @classmethod
    def from_text(cls, text: str) -> "Vocabulary":
        pairs = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
                pairs.append((int(idx), tok))
            except ValueError:
                raise FormatError(f"vocabulary line {lineno} is not 'token<TAB>index': {line!r}") from None
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise FormatError("vocabulary indices are not dense from 0")
        if tuple(t for _, t in pairs[:len(RESERVED)]) != RESERVED:
            raise FormatError("vocabulary does not start with the reserved tokens")
        vocab = cls()
        for _, tok in pairs[len(RESERVED):]:
            vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


@dataclass
class TokenizedReport:
    tokens: np.ndarray
    sentence_ends: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int32)
        self.sentence_ends = np.asarray(self.sentence_ends, dtype=np.int32)
        if self.sentence_ends.size and (np.any(np.diff(self.sentence_ends) <= 0)
                                        or self.sentence_ends[-1] >= len(self.tokens)
                                        or self.sentence_ends[0] < 0):
            raise FormatError("sentence-end positions must be strictly increasing and inside the sequence")

    @property
    def num_sentences(self) -> int:
        return len(self.sentence_ends)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenizedReport) and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.sentence_ends, other.sentence_ends))


@dataclass
class LstmState:
    h: Tensor
    m: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LstmState":
        dtype = get_default_dtype()
        return cls(Tensor(np.zeros((batch, hidden), dtype=dtype)), Tensor(np.zeros((batch, hidden), dtype=dtype)))


class LSTM(Module):
    """Single-layer LSTM; weights uniform(-0.08, 0.08), forget-gate bias 1."""

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator, init_range: float = 0.08):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.w_x = Parameter(rng.uniform(-init_range, init_range, (input_size, 4 * hidden_size)))
        self.w_h = Parameter(rng.uniform(-init_range, init_range, (hidden_size, 4 * hidden_size)))
        bias = np.zeros(4 * hidden_size)
        bias[hidden_size:2 * hidden_size] = 1.0
        self.b = Parameter(bias)

    def step(self, x_t: Tensor, state: LstmState) -> LstmState:
        h, m = ops.lstm_cell(x_t, state.h, state.m, self.w_x, self.w_h, self.b)
        return LstmState(h, m)

    def unroll(self, inputs: Sequence[Tensor], state: LstmState | None = None) -> list[Tensor]:
        """Run over per-step inputs (each (B, K)); returns the hidden state after every step."""
        if state is None:
            state = LstmState.zeros(inputs[0].shape[0], self.hidden_size)
        hidden = []
        for x_t in inputs:
            state = self.step(x_t, state)
            hidden.append(state.h)
        return hidden


def lstm_step(x_t: Tensor, state: LstmState, lstm: LSTM) -> LstmState:
    return lstm.step(x_t, state)


def pad_reports(reports: Sequence[TokenizedReport], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token arrays into (B, T); sentence ends stacked into (B, N)."""
    counts = {r.num_sentences for r in reports}
    if len(counts) != 1:
        raise FormatError(f"reports in one batch have differing sentence counts {sorted(counts)}")
    T = max(len(r) for r in reports)
    tokens = np.full((len(reports), T), pad_id, dtype=np.int64)
    for i, r in enumerate(reports):
        tokens[i, :len(r)] = r.tokens
    ends = np.stack([r.sentence_ends for r in reports]).astype(np.int64)
    return tokens, ends


class TextEncoder(Module):
    def __init__(self, vocab_size: int, embed_dim: int, hidden_size: int, num_sentences: int,
                 rng: np.random.Generator, init_range: float = 0.08, embed_std: float = 1.0):
        super().__init__()
        # unit-variance word vectors; the tiny LSTM range made the text path crawl
        self.embedding = Parameter(rng.normal(0.0, embed_std, (vocab_size, embed_dim)))
        self.lstm = LSTM(embed_dim, hidden_size, rng, init_range)
        self.num_sentences = num_sentences

    @property
    def hidden_size(self) -> int:
        return self.lstm.hidden_size

    def embed(self, ids) -> Tensor:
        return ops.embedding(self.embedding, ids)

    def __call__(self, tokens: np.ndarray, ends: np.ndarray) -> Tensor:
        """Batched encoding: tokens (B, T), ends (B, N) -> S of shape (B, D, N).

        Right padding never influences the gathered states because every
        sentence end precedes the padding.
        """
        tokens = np.asarray(tokens)
        ends = np.asarray(ends)
        if ends.ndim != 2 or ends.shape[1] != self.num_sentences:
            raise FormatError(f"expected {self.num_sentences} sentence-end markers per report, got shape {ends.shape}")
        B, _ = tokens.shape
        last = int(ends.max()) + 1
        x = self.embed(tokens[:, :last])                      # (B, T, K)
        inputs = [ops.index(x, (slice(None), t)) for t in range(last)]
        hidden = ops.stack(self.lstm.unroll(inputs), axis=1)  # (B, T, D)
        rows = np.arange(B)[:, None]
        S = ops.index(hidden, (rows, ends))                   # (B, N, D)
        return ops.transpose(S, (0, 2, 1))


def encode_report(report: TokenizedReport, encoder: TextEncoder) -> Tensor:
    """Single report -> S of shape (D, N)."""
    if report.num_sentences != encoder.num_sentences:
        raise FormatError(
            f"report has {report.num_sentences} sentence-end markers, expected N={encoder.num_sentences}")
    S = encoder(report.tokens[None, :], report.sentence_ends[None, :])
    return ops.reshape(S, S.shape[1:])

