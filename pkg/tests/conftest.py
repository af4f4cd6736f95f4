import time

import numpy as np
import pytest

from tandemnet.corpus import GeneratorSpec, generate_corpus, split_by_patient
from tandemnet.image_encoder import EncoderConfig
from tandemnet.model import ModelConfig
from tandemnet.tensor import set_default_dtype
from tandemnet.trainer import TrainConfig, text_attention_stats, train_and_test

SEEDS = (0, 1, 2)
DESK_EPOCHS = 30


@pytest.fixture(autouse=True)
def _float64():
    set_default_dtype("float64")
    yield
    set_default_dtype("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config(vocab_size: int = 12, num_sentences: int = 2) -> ModelConfig:
    """C=4, g=2: one stage with one residual block on 4x4 inputs."""
    enc = EncoderConfig(input_size=4, blocks_per_stage=1, widen_factor=1, base_width=4, num_stages=1,
                        stage_strides=(2,), dropout=0.0)
    return ModelConfig(encoder=enc, vocab_size=vocab_size, embed_dim=3, hidden=4, attn_dim=4,
                       num_sentences=num_sentences)


def small_model_config(vocab_size: int) -> ModelConfig:
    """Cheap desk-shaped model for 16x16 images: C=8, g=4."""
    enc = EncoderConfig(input_size=16, blocks_per_stage=1, widen_factor=1, base_width=4, num_stages=2,
                        stage_strides=(2, 2), dropout=0.0)
    return ModelConfig(encoder=enc, vocab_size=vocab_size, embed_dim=8, hidden=8, attn_dim=8)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GeneratorSpec(num_patients=6, samples_per_patient=8, image_size=16, seed=3))


@pytest.fixture(scope="session")
def desk_runs():
    """Three seeds each of tandem r=0.5, image-only and tandem r=0.05 on the
    1000-sample corpus (float32). Keys are (kind, rate, seed) ->
    (acc_with_text, acc_without_text, text-attention table or None); the
    r=0.5 tandem trainers are kept under ("trainer", seed).
    """
    corpus = generate_corpus(GeneratorSpec(seed=0))
    train, test = split_by_patient(corpus, 0.2, seed=0)
    mc = ModelConfig(vocab_size=len(corpus.vocab))
    runs = {"corpus": corpus, "train": train, "test": test, "seconds": {}}
    for seed in SEEDS:
        for kind, rate in (("tandem", 0.5), ("image-only", 0.5), ("tandem", 0.05)):
            t0 = time.perf_counter()
            cfg = TrainConfig(epochs=DESK_EPOCHS, dtype="float32", seed=seed, drop_rate=rate)
            res = train_and_test(mc, cfg, train, test, kind=kind, keep_trainer=True)
            table = None
            if kind == "tandem" and rate == 0.5:
                table = text_attention_stats(res.trainer.model, test.samples, rate, res.trainer.mean)
                runs[("trainer", seed)] = res.trainer
            runs[(kind, rate, seed)] = (res.acc_with_text, res.acc_without_text, table)
            runs["seconds"][(kind, rate, seed)] = time.perf_counter() - t0
            print(f"  desk run {kind} r={rate} seed={seed}: with text {res.acc_with_text:.3f}, "
                  f"without {res.acc_without_text:.3f} ({runs['seconds'][(kind, rate, seed)]:.0f}s)")
    return runs


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
