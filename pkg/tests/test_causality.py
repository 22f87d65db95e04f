"""Nothing beyond the received prefix may influence prefix-time outputs."""

import numpy as np
import pytest

from simtlab.data import PAD, SynthConfig, generate_synthetic
from simtlab.inference import Policy, run_session, run_sessions
from simtlab.model import Transformer, shift_right

from conftest import randomize_head, tiny_config


@pytest.fixture(scope="module")
def sentences():
    return generate_synthetic(SynthConfig(vocab_size=20, min_len=3, max_len=8, seed=11), {"s": 100})["s"]


def _perturb(src, j, rng, vocab):
    out = src.copy()
    out[j:] = rng.integers(4, vocab, size=len(src) - j)
    return out


def _prefix_part(trace, j):
    """Emissions made while at most j tokens were read."""
    n = sum(1 for g in trace.g if g <= j)
    return trace.tokens[:n], trace.g[:n], trace.confidences[:n]


@pytest.mark.parametrize("encoder", ["bidirectional", "unidirectional"])
def test_dual_forward_ignores_unread_suffix(sentences, encoder):
    model = Transformer(tiny_config(sentences, encoder_mode=encoder), seed=2)
    randomize_head(model, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    V = len(sentences.src_vocab)
    for e in sentences:
        for j in range(1, e.M + 1):
            a = model.dual_forward(e, j)
            other = type(e)(_perturb(e.source, j, rng, V), e.target, e.alignment)
            b = model.dual_forward(other, j)
            np.testing.assert_array_equal(a.p_simt.data, b.p_simt.data)
            np.testing.assert_array_equal(a.conf.data, b.conf.data)


@pytest.mark.parametrize("encoder", ["bidirectional", "unidirectional"])
def test_batched_pass_ignores_unread_suffix(sentences, encoder):
    model = Transformer(tiny_config(sentences, encoder_mode=encoder), seed=2)
    randomize_head(model, np.random.default_rng(0))
    rng = np.random.default_rng(2)
    V = len(sentences.src_vocab)
    ex = sentences.examples[:40]
    S = max(e.M for e in ex)
    Tn = max(e.N for e in ex)
    src = np.full((len(ex), S), PAD)
    tgt = np.full((len(ex), Tn), PAD)
    for r, e in enumerate(ex):
        src[r, :e.M] = e.source
        tgt[r, :e.N] = e.target
    M = np.array([e.M for e in ex])
    j = np.array([rng.integers(1, m + 1) for m in M])
    noisy = src.copy()
    for r in range(len(ex)):
        noisy[r, j[r]:] = rng.integers(4, V, size=S - j[r])
    a = model.dual_forward_batch(src, M, shift_right(tgt), j)
    b = model.dual_forward_batch(noisy, M, shift_right(tgt), j)
    np.testing.assert_array_equal(a.p_simt.data, b.p_simt.data)
    np.testing.assert_array_equal(a.conf.data, b.conf.data)


@pytest.mark.parametrize("encoder", ["bidirectional", "unidirectional"])
def test_streamed_outputs_ignore_unread_suffix(sentences, encoder):
    model = Transformer(tiny_config(sentences, encoder_mode=encoder), seed=2)
    randomize_head(model, np.random.default_rng(3), scale=1.0)
    rng = np.random.default_rng(4)
    V = len(sentences.src_vocab)
    policy = Policy.confidence(0.5)
    sources = [e.source for e in sentences]
    base = run_sessions(model, sources, policy)
    for j in range(1, 9):
        noisy = [_perturb(s, min(j, len(s)), rng, V) for s in sources]
        other = run_sessions(model, noisy, policy)
        for s, t0, t1 in zip(sources, base, other):
            jj = min(j, len(s))
            assert _prefix_part(t0, jj) == _prefix_part(t1, jj)
    # the one-at-a-time streaming path agrees with the batched engine
    for s, t in list(zip(sources, base))[:10]:
        single = run_session(s, model, policy)
        assert single.tokens == t.tokens and single.g == t.g
        np.testing.assert_allclose(single.confidences, t.confidences, rtol=1e-5)
