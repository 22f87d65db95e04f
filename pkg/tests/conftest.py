import numpy as np
import pytest

from simtlab.data import SynthConfig, generate_synthetic, make_batches
from simtlab.model import ModelConfig, Transformer


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(SynthConfig(vocab_size=12, min_len=3, max_len=6, seed=5),
                              {"train": 40, "valid": 8})


def tiny_config(corpus, **kw):
    base = dict(d_model=8, heads=2, enc_layers=2, dec_layers=2, ffn=16, dropout=0.0, max_positions=32)
    base.update(kw)
    return ModelConfig(len(corpus.src_vocab), len(corpus.tgt_vocab), **base)


@pytest.fixture
def tiny_model(tiny_corpus):
    return Transformer(tiny_config(tiny_corpus["train"]), seed=3)


@pytest.fixture
def tiny_batch(tiny_corpus):
    return make_batches(tiny_corpus["train"].subset(range(6)), 10_000, seed=0)[0]


def randomize_head(model, rng, scale=0.3):
    """Give the zero-initialised confidence head non-trivial weights."""
    model.params["conf.w"].data[...] = rng.normal(0, scale, model.params["conf.w"].shape)
    model.params["conf.b"].data[...] = rng.normal(0, scale, model.params["conf.b"].shape)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line for an acceptance criterion and return the verdict."""
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
