"""Synthetic image/report corpus with four diagnostic classes.

Each sample has a severity level for five cell-appearance features. The
label is a fixed function of the severity vector. Reports state every
severity in words, so text alone determines the label. Images draw each
feature as coloured blobs inside that feature's own zone, with the blob
count set by the level. Each rendered level is swapped for a random other
level with probability ``level_noise``, so images are a noisy view.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError
from .text_encoder import TokenizedReport, Vocabulary, tokenize

FEATURE_TYPES = ("nuclear pleomorphism", "cell crowding", "cell polarity", "mitosis", "prominence of nucleoli")
CLASS_NAMES = ("normal", "low-grade", "high-grade", "insufficient")
NORMAL, LOW_GRADE, HIGH_GRADE, INSUFFICIENT = range(4)

LEVEL_WORDS: tuple[tuple[str, ...], ...] = (
    ("mild", "moderate", "severe"),
    ("minimal", "increased", "marked"),
    ("intact", "disturbed", "lost"),
    ("rare", "occasional", "frequent"),
    ("inconspicuous", "visible", "prominent"),
)

TEMPLATES: tuple[tuple[str, ...], ...] = (
    ("nuclear pleomorphism is {} in the examined urothelium",
     "the nuclei show {} pleomorphism in size and shape",
     "there is {} nuclear pleomorphism across the tissue",
     "{} variation in nuclear size and shape is present",
     "pleomorphism of the nuclei appears {} overall"),
    ("cell crowding is {} throughout the section",
     "the urothelial cells show {} crowding in most areas",
     "there is {} crowding of the tumor cells",
     "{} cell crowding is noted on this slide",
     "crowding of cells appears {} in the sampled region"),
    ("cell polarity is {} in the urothelial layer",
     "the polarity of the cells appears {}",
     "nuclear polarity toward the surface is {}",
     "we see {} polarity of the cells overall",
     "orientation and polarity of cells are {} here"),
    ("mitotic figures are {} in this image",
     "{} mitoses are seen in the upper layers",
     "mitosis is {} throughout the sampled tissue",
     "the sample shows {} mitotic activity",
     "there are {} mitotic figures in the field"),
    ("nucleoli are {} in most of the cells",
     "the nuclei contain {} nucleoli in many cells",
     "prominence of nucleoli is {} on this slide",
     "{} nucleoli are observed within the nuclei",
     "we note {} nucleoli across the examined region"),
)

# (row0, row1, col0, col1) as fractions of the image side; one zone per feature.
ZONES = ((0.0, 0.5, 0.0, 0.5), (0.0, 0.5, 0.5, 1.0), (0.5, 1.0, 0.0, 0.5),
         (0.5, 0.75, 0.5, 1.0), (0.75, 1.0, 0.5, 1.0))
# RGB absorbance of each feature's blobs.
COLORS = np.array([(0.35, 0.75, 0.20), (0.75, 0.55, 0.10), (0.10, 0.60, 0.70),
                   (0.70, 0.15, 0.65), (0.15, 0.20, 0.75)])
BACKGROUND = np.array([0.94, 0.82, 0.88])


def classify_severity(severity: Sequence[int], num_levels: Sequence[int] = (3, 3, 3, 3, 3)) -> int:
    """Deterministic class rule.

    high-grade iff crowding is at its top level; otherwise low-grade when the
    pleomorphism + polarity + mitosis levels reach two thirds of their range;
    otherwise insufficient when nucleoli are at their top level; else normal.
    """
    s = [int(v) for v in severity]
    top = [n - 1 for n in num_levels]
    if s[1] == top[1]:
        return HIGH_GRADE
    if 3 * (s[0] + s[2] + s[3]) >= 2 * (top[0] + top[2] + top[3]):
        return LOW_GRADE
    if s[4] == top[4]:
        return INSUFFICIENT
    return NORMAL


@dataclass
class GeneratorSpec:
    num_patients: int = 50
    samples_per_patient: int = 20
    image_size: int = 32
    num_levels: tuple[int, ...] = (3, 3, 3, 3, 3)
    reports_per_sample: int = 5
    level_noise: float = 0.15
    pixel_noise: float = 0.06
    patient_shift: float = 0.04
    seed: int = 0
    level_words: tuple[tuple[str, ...], ...] = field(default=LEVEL_WORDS)

    def __post_init__(self):
        self.num_levels = tuple(int(n) for n in self.num_levels)
        self.level_words = tuple(tuple(w) for w in self.level_words)
        self.validate()

    def validate(self) -> None:
        if len(self.num_levels) != len(FEATURE_TYPES):
            raise ConfigError("num_levels", f"need one entry per feature type ({len(FEATURE_TYPES)})")
        for j, n in enumerate(self.num_levels):
            if n < 2:
                raise ConfigError("num_levels", f"feature {j} needs at least 2 severity levels, got {n}")
            if j >= len(self.level_words) or len(self.level_words[j]) < n:
                raise ConfigError("level_words", f"template bank has no wording for every level of feature {j}")
        if not 1 <= self.reports_per_sample <= len(TEMPLATES[0]):
            raise ConfigError("reports_per_sample", f"must lie in [1, {len(TEMPLATES[0])}]")
        if not 0.0 <= self.level_noise <= 1.0:
            raise ConfigError("level_noise", "must lie in [0, 1]")
        if self.num_patients < 1 or self.samples_per_patient < 1:
            raise ConfigError("num_patients", "corpus must contain at least one sample")
        if self.image_size < 8:
            raise ConfigError("image_size", "must be at least 8 pixels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["num_levels"] = list(self.num_levels)
        d["level_words"] = [list(w) for w in self.level_words]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


@dataclass
class SamplePair:
    image: np.ndarray                 # (3, H, W) uint8
    reports: list[TokenizedReport]
    label: int
    severity: np.ndarray              # (5,) int
    patient_id: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, SamplePair) and np.array_equal(self.image, other.image)
                and self.reports == other.reports and self.label == other.label
                and np.array_equal(self.severity, other.severity) and self.patient_id == other.patient_id)


@dataclass
class Corpus:
    spec: GeneratorSpec
    vocab: Vocabulary
    samples: list[SamplePair]

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def subset(self, samples: list[SamplePair]) -> "Corpus":
        return Corpus(self.spec, self.vocab, samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def patient_ids(self) -> set[int]:
        return {s.patient_id for s in self.samples}


def report_sentences(severity: Sequence[int], variant: int, offsets: Sequence[int],
                     level_words=LEVEL_WORDS) -> list[str]:
    ntpl = len(TEMPLATES[0])
    return [TEMPLATES[j][(variant + offsets[j]) % ntpl].format(level_words[j][int(level)])
            for j, level in enumerate(severity)]


def all_template_sentences(level_words=LEVEL_WORDS) -> list[str]:
    return [t.format(w) for j, bank in enumerate(TEMPLATES) for t in bank for w in level_words[j]]


def render_image(levels: Sequence[int], rng: np.random.Generator, size: int, pixel_noise: float,
                 tint: np.ndarray) -> np.ndarray:
    """Blob image for the given (possibly corrupted) per-feature levels; uint8 (3, size, size)."""
    img = np.empty((size, size, 3))
    img[:] = BACKGROUND + tint
    yy, xx = np.mgrid[0:size, 0:size]
    sigma = max(size / 16.0, 0.8)
    for j, level in enumerate(levels):
        r0, r1, c0, c1 = (int(round(f * size)) for f in ZONES[j])
        count = 1 + 2 * int(level)
        ys = rng.uniform(r0 + 1, r1 - 1, count)
        xs = rng.uniform(c0 + 1, c1 - 1, count)
        density = np.zeros((size, size))
        for y, x in zip(ys, xs):
            density += np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2 * sigma ** 2))
        img -= np.minimum(density, 1.2)[..., None] * COLORS[j] * 0.7
    img += rng.normal(0.0, pixel_noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8).transpose(2, 0, 1).copy()


def _corrupt(severity: np.ndarray, num_levels, noise: float, rng: np.random.Generator) -> np.ndarray:
    shown = severity.copy()
    for j, n in enumerate(num_levels):
        if rng.random() < noise:
            others = [v for v in range(n) if v != severity[j]]
            shown[j] = others[rng.integers(len(others))]
    return shown


def generate_corpus(spec: GeneratorSpec) -> Corpus:
    spec.validate()
    raw = []
    for pid in range(spec.num_patients):
        rng = np.random.default_rng([spec.seed, pid])
        tint = rng.normal(0.0, spec.patient_shift, 3)
        for _ in range(spec.samples_per_patient):
            severity = np.array([rng.integers(n) for n in spec.num_levels], dtype=np.int64)
            shown = _corrupt(severity, spec.num_levels, spec.level_noise, rng)
            image = render_image(shown, rng, spec.image_size, spec.pixel_noise, tint)
            offsets = rng.integers(len(TEMPLATES[0]), size=len(FEATURE_TYPES))
            texts = [report_sentences(severity, k, offsets, spec.level_words)
                     for k in range(spec.reports_per_sample)]
            raw.append((image, texts, classify_severity(severity, spec.num_levels), severity, pid))
    vocab = Vocabulary.build(s for _, texts, *_ in raw for sents in texts for s in sents)
    samples = [SamplePair(image, [vocab.encode(s) for s in texts], label, severity, pid)
               for image, texts, label, severity, pid in raw]
    return Corpus(spec, vocab, samples)


def split_by_patient(corpus: Corpus, fraction: float, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Partition into (rest, held_out) with roughly ``fraction`` of patients held out."""
    patients = sorted(corpus.patient_ids)
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)
    n_out = max(1, int(round(fraction * len(patients)))) if len(patients) > 1 else 0
    held = set(patients[:n_out])
    rest = [s for s in corpus.samples if s.patient_id not in held]
    out = [s for s in corpus.samples if s.patient_id in held]
    return corpus.subset(rest), corpus.subset(out)


def report_word_count(report: TokenizedReport, vocab: Vocabulary) -> int:
    return sum(len(s.split()) for s in vocab.decode(report.tokens))


def extract_levels(sentences: Sequence[str], level_words=LEVEL_WORDS) -> list[int | None]:
    """Read the severity level back out of each feature sentence (None if absent/ambiguous)."""
    levels: list[int | None] = []
    for j in range(len(level_words)):
        if j >= len(sentences):
            levels.append(None)
            continue
        words = set(tokenize(sentences[j]))
        hits = [k for k, w in enumerate(level_words[j]) if w in words]
        levels.append(hits[0] if len(hits) == 1 else None)
    return levels


def image_bayes_accuracy_bound(spec: GeneratorSpec) -> float:
    """Accuracy of the Bayes classifier that reads the rendered levels perfectly.

    Pixel noise and blob overlap only lose information, so this bounds the
    image-only Bayes accuracy from above.
    """
    levels = [range(n) for n in spec.num_levels]
    states = list(itertools.product(*levels))

    def channel(true_level: int, shown: int, n: int) -> float:
        q = spec.level_noise
        return 1.0 - q if shown == true_level else q / (n - 1)

    best_total = 0.0
    prior = 1.0 / len(states)
    for shown in states:
        mass = np.zeros(len(CLASS_NAMES))
        for true in states:
            p = prior
            for t, s, n in zip(true, shown, spec.num_levels):
                p *= channel(t, s, n)
            mass[classify_severity(true, spec.num_levels)] += p
        best_total += mass.max()
    return float(best_total)


# ---------------------------------------------------------------------------
# file format

MAGIC = b"TNDMCORP"
VERSION = 1


def corpus_to_bytes(corpus: Corpus) -> bytes:
    header = json.dumps({"spec": corpus.spec.to_dict(), "vocab": corpus.vocab.itos,
                         "num_samples": len(corpus)}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    for s in corpus.samples:
        C, H, W = s.image.shape
        parts.append(struct.pack("<BB", s.label, len(s.severity)))
        parts.append(np.asarray(s.severity, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<IHHH", s.patient_id, C, H, W))
        parts.append(np.ascontiguousarray(s.image, dtype=np.uint8).tobytes())
        parts.append(struct.pack("<B", len(s.reports)))
        for r in s.reports:
            parts.append(struct.pack("<H", len(r.tokens)))
            parts.append(r.tokens.astype("<u2").tobytes())
            parts.append(struct.pack("<B", len(r.sentence_ends)))
            parts.append(r.sentence_ends.astype("<u2").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"truncated corpus file: wanted {n} bytes, {len(self.data) - self.offset} left",
                              self.offset)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def corpus_from_bytes(data: bytes) -> Corpus:
    rd = _Reader(data)
    if rd.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a corpus file (bad magic)", 0)
    version, header_len = rd.unpack("<II")
    if version != VERSION:
        raise FormatError(f"unsupported corpus version {version} (expected {VERSION})", len(MAGIC))
    at = rd.offset
    try:
        header = json.loads(rd.take(header_len).decode("utf-8"))
        spec = GeneratorSpec.from_dict(header["spec"])
        vocab = Vocabulary()
        for tok in header["vocab"][len(vocab):]:
            vocab.add(tok)
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt corpus header: {exc}", at) from None
    samples = []
    for _ in range(header["num_samples"]):
        start = rd.offset
        label, nsev = rd.unpack("<BB")
        severity = rd.array("u1", nsev).astype(np.int64)
        pid, C, H, W = rd.unpack("<IHHH")
        image = rd.array("u1", C * H * W).reshape(C, H, W)
        reports = []
        for _ in range(rd.unpack("<B")[0]):
            tokens = rd.array("<u2", rd.unpack("<H")[0]).astype(np.int32)
            ends = rd.array("<u2", rd.unpack("<B")[0]).astype(np.int32)
            if tokens.size and tokens.max() >= len(vocab):
                raise FormatError("token index outside the vocabulary", start)
            reports.append(TokenizedReport(tokens, ends))
        samples.append(SamplePair(image, reports, int(label), severity, int(pid)))
    if rd.offset != len(data):
        raise FormatError(f"{len(data) - rd.offset} trailing bytes after last sample", rd.offset)
    return Corpus(spec, vocab, samples)


def write_corpus(corpus: Corpus, path) -> None:
    Path(path).write_bytes(corpus_to_bytes(corpus))


def read_corpus(path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())


def dump_png(corpus: Corpus, directory, limit: int = 16) -> list[Path]:
    """Write the first ``limit`` images as PNG files for inspection (needs Pillow)."""
    from PIL import Image

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(corpus.samples[:limit]):
        p = out / f"sample_{i:04d}_{CLASS_NAMES[s.label]}.png"
        Image.fromarray(s.image.transpose(1, 2, 0)).save(p)
        paths.append(p)
    return paths
