import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simtlab.errors import ContractViolation, NumericError
from simtlab.inference import Policy, SessionTrace, SweepResult
from simtlab.metrics import (CurvePoint, average_lagging, build_curve, corpus_bleu, correlations, pearson,
                             read_curve_csv, satisfied_alignments, write_curve_csv)
from simtlab.training import waitk_read_counts


class TestAverageLagging:
    @pytest.mark.parametrize("M", [5, 10, 20])
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_waitk_equals_k(self, M, k):
        assert average_lagging(waitk_read_counts(k, M, M), M) == k

    @pytest.mark.parametrize("M,N", [(1, 1), (7, 3), (10, 10), (4, 9)])
    def test_read_everything_equals_M(self, M, N):
        assert average_lagging([M] * N, M) == M

    def test_diagonal(self):
        assert average_lagging(list(range(1, 11)), 10) == 1.0

    def test_unequal_lengths_by_hand(self):
        # M=6, N=3, r=0.5: g=(2,4,6), tau=3 -> (2 + (4-2) + (6-4)) / 3 = 2
        assert average_lagging([2, 4, 6], 6) == pytest.approx(2.0)

    def test_errors(self):
        with pytest.raises(ContractViolation):
            average_lagging([], 3)
        with pytest.raises(ContractViolation):
            average_lagging([3, 2], 3)
        with pytest.raises(ContractViolation):
            average_lagging([1, 4], 3)
        with pytest.raises(ContractViolation):
            average_lagging([1, 2], 3, N=3)


def brute_sa(a, g):
    hits = 0
    for ai, gi in zip(a, g):
        if ai == 0 or ai <= gi:
            hits += 1
    return hits / len(a)


class TestSatisfiedAlignments:
    def test_examples(self):
        assert satisfied_alignments([1, 3, 2], [1, 1, 3]) == pytest.approx(2 / 3)
        assert satisfied_alignments([4, 2, 1], [4, 4, 4]) == 1.0

    def test_random_instances_match_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            M, N = rng.integers(1, 15), rng.integers(1, 15)
            a = rng.integers(0, M + 1, N)          # 0 = unaligned
            g = np.sort(rng.integers(1, M + 1, N))
            assert satisfied_alignments(a, g) == brute_sa(a.tolist(), g.tolist())

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(1, 9), min_size=1, max_size=12), st.data())
    def test_bounded_and_monotone_in_g(self, a, data):
        g = sorted(data.draw(st.lists(st.integers(1, 9), min_size=len(a), max_size=len(a))))
        bump = data.draw(st.integers(0, 3))
        sa = satisfied_alignments(a, g)
        assert 0.0 <= sa <= 1.0
        assert satisfied_alignments(a, [x + bump for x in g]) >= sa

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            satisfied_alignments([1, 2], [1])


class TestBleu:
    def test_identity(self):
        assert corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d"]]) == pytest.approx(100.0)

    def test_no_overlap(self):
        assert corpus_bleu([["x", "y"]], [["a", "b"]]) == 0.0

    def test_brevity_penalty_case(self):
        got = corpus_bleu([list("abcd")], [list("abcde")])
        # n>=2 add-one smoothing: (3+1)/(3+1), (2+1)/(2+1), (1+1)/(1+1) -> all 1
        assert got == pytest.approx(100 * math.exp(1 - 5 / 4), abs=1e-4)
        assert got == pytest.approx(77.88, abs=1e-2)

    def test_hand_computed_partial_match(self):
        hyp, ref = ["a", "b", "x", "d"], ["a", "b", "c", "d"]
        p1, p2, p3, p4 = 3 / 4, (1 + 1) / (3 + 1), (0 + 1) / (2 + 1), (0 + 1) / (1 + 1)
        want = 100 * math.exp((math.log(p1) + math.log(p2) + math.log(p3) + math.log(p4)) / 4)
        assert corpus_bleu([hyp], [ref]) == pytest.approx(want, abs=1e-4)

    def test_clipped_counts_and_corpus_pooling(self):
        hyps = [["a", "a", "a"], ["b", "c"]]
        refs = [["a", "b", "c"], ["b", "c"]]
        # unigram: clipped 1 + 2 = 3 of 5; bigram: 0+1 of 2+1 -> (1+1)/(3+1); trigram (0+1)/(1+1); 4-gram (0+1)/(0+1)
        lp = math.log(3 / 5) + math.log(2 / 4) + math.log(1 / 2) + math.log(1.0)
        assert corpus_bleu(hyps, refs) == pytest.approx(100 * math.exp(lp / 4), abs=1e-4)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        hyps = [list(rng.integers(0, 5, rng.integers(1, 8))) for _ in range(20)]
        refs = [list(rng.integers(0, 5, rng.integers(1, 8))) for _ in range(20)]
        order = rng.permutation(20)
        assert corpus_bleu(hyps, refs) == pytest.approx(corpus_bleu([hyps[i] for i in order],
                                                                    [refs[i] for i in order]), abs=1e-9)

    def test_errors(self):
        with pytest.raises(ContractViolation):
            corpus_bleu([], [])
        with pytest.raises(ContractViolation):
            corpus_bleu([["a"]], [])


class TestCorrelations:
    def test_identity_and_negation(self):
        x = [0.3, 1.0, 2.5, -4.0, 7.0]
        assert correlations(x, x) == pytest.approx({"pearson": 1, "spearman": 1, "kendall_tau": 1})
        neg = [-v for v in x]
        assert correlations(x, neg) == pytest.approx({"pearson": -1, "spearman": -1, "kendall_tau": -1})

    def test_small_example(self):
        r = correlations([1, 2, 3, 4], [1, 3, 2, 4])
        assert r["spearman"] == pytest.approx(0.8)
        assert r["kendall_tau"] == pytest.approx(2 / 3)

    def test_kendall_against_pair_count(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=30), rng.normal(size=30)
        conc = sum(np.sign(x[i] - x[j]) * np.sign(y[i] - y[j]) for i in range(30) for j in range(i + 1, 30))
        assert correlations(x, y)["kendall_tau"] == pytest.approx(conc / (30 * 29 / 2))

    def test_invariances(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=40), rng.normal(size=40)
        base = correlations(x, y)
        assert pearson(3 * x + 2, y) == pytest.approx(base["pearson"])
        moved = correlations(np.exp(x), y ** 3)
        assert moved["spearman"] == pytest.approx(base["spearman"])
        assert moved["kendall_tau"] == pytest.approx(base["kendall_tau"])

    def test_errors(self):
        with pytest.raises(NumericError):
            correlations([1, 1, 1], [1, 2, 3])
        with pytest.raises(ContractViolation):
            correlations([1, 2], [1, 2])


def _trace(g, tokens):
    return SessionTrace(tokens=list(tokens), g=list(g))


class TestCurves:
    def test_waitk_grid_on_diagonal_corpus(self):
        M = 8
        refs = [list(range(M - 1))]
        results = []
        for k in (1, 3, 5):
            g = waitk_read_counts(k, M, M).tolist()
            t = _trace(g, list(range(M - 1)) + [3])
            results.append(SweepResult(Policy.waitk(k), [t], None))
        pts = build_curve(results, refs, [M])
        assert [p.AL for p in pts] == [1.0, 3.0, 5.0]
        assert all(p.BLEU == pytest.approx(100.0) for p in pts)

    def test_sorting_and_ties(self):
        t = _trace([2, 2], [5, 3])
        results = [SweepResult(Policy.confidence(g), [t], [t]) for g in (0.7, 0.3, 0.5)]
        pts = build_curve(results, [[5]], [2], [np.array([1, 2])])
        assert [p.param for p in pts] == [0.3, 0.5, 0.7]
        assert pts[0].SA == 1.0 and pts[0].n_sent == 1

    def test_csv_round_trip(self, tmp_path):
        pts = [CurvePoint(0.5, 2.123456, 88.5, 0.9, 10), CurvePoint(3, 4.0, 90.0, None, 10)]
        write_curve_csv(pts, tmp_path / "c.csv")
        text = (tmp_path / "c.csv").read_text().splitlines()
        assert text[0] == "param,AL,BLEU,SA,n_sent"
        assert text[1] == "0.5000,2.1235,88.5000,0.9000,10"
        back = read_curve_csv(tmp_path / "c.csv")
        assert back[1].SA is None and back[0].AL == 2.1235
