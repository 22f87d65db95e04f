"""Latency, alignment satisfaction, BLEU and correlation statistics."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from simtlab.errors import ContractViolation, NumericError


@dataclass
class CurvePoint:
    param: float
    AL: float
    BLEU: float
    SA: float | None
    n_sent: int
    policy: str = ""


def average_lagging(g: Sequence[int], M: int, N: int | None = None) -> float:
    """AL = 1/tau * sum_{i<=tau} (g_i - (i-1)/r), r = N/M.

    tau is the first position whose read count reaches M (or N if none does).
    """
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        raise ContractViolation("average_lagging: empty g")
    N = len(g) if N is None else N
    if N != len(g):
        raise ContractViolation(f"average_lagging: N={N} but |g|={len(g)}")
    if M < 1 or g.max() > M or np.any(np.diff(g) < 0):
        raise ContractViolation("average_lagging: g must be non-decreasing and <= M")
    full = np.flatnonzero(g >= M)
    tau = int(full[0]) + 1 if full.size else N
    r = N / M
    i = np.arange(tau)
    return float(np.mean(g[:tau] - i / r))


def satisfied_alignments(a: Sequence[int], g: Sequence[int]) -> float:
    """Fraction of target positions with a_i <= g_i (a_i = 0 means unaligned, counted satisfied)."""
    a = np.asarray(a)
    g = np.asarray(g)
    if a.shape != g.shape:
        raise ContractViolation(f"satisfied_alignments: |a|={a.size} != |g|={g.size}")
    if a.size == 0:
        raise ContractViolation("satisfied_alignments: empty input")
    return float(np.mean(a <= g))


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU-4 in percent with add-one smoothing for n >= 2."""
    if len(hypotheses) != len(references):
        raise ContractViolation(f"corpus_bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ContractViolation("corpus_bleu: empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if matches[0] == 0 or hyp_len == 0:
        return 0.0
    log_p = math.log(matches[0] / totals[0])
    for n in range(1, max_n):
        log_p += math.log((matches[n] + 1) / (totals[n] + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_n)


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if denom == 0.0:
        raise NumericError("pearson: undefined for a constant vector")
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def correlations(xs, ys) -> dict[str, float]:
    """Pearson, Spearman (Pearson on average ranks) and Kendall tau-b."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ContractViolation("correlations: need two equal-length vectors of at least 3 values")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise NumericError("correlations: undefined for a constant vector")
    tau = stats.kendalltau(x, y, variant="b").statistic
    return {
        "pearson": pearson(x, y),
        "spearman": pearson(stats.rankdata(x), stats.rankdata(y)),
        "kendall_tau": float(tau),
    }


def build_curve(results, references: Sequence[Sequence], sources_len: Sequence[int],
                alignments: Sequence | None = None) -> list[CurvePoint]:
    """One point per policy: mean sentence AL, corpus BLEU, mean sentence SA.

    ``results`` holds ``(policy, traces, forced_traces)`` triples (see
    :func:`simtlab.inference.sweep`). SA is scored on the forced reference
    pass, where |g| equals the reference length.
    """
    points = []
    for policy, traces, forced in results:
        if len(traces) != len(references):
            raise ContractViolation("build_curve: trace set does not cover the corpus")
        als = [average_lagging(t.g, M) for t, M in zip(traces, sources_len)]
        bleu = corpus_bleu([t.hypothesis for t in traces], references)
        sa = None
        if alignments is not None and forced is not None:
            vals = [satisfied_alignments(a, t.g) for a, t in zip(alignments, forced) if a is not None]
            sa = float(np.mean(vals)) if vals else None
        points.append(CurvePoint(float(policy.value), float(np.mean(als)), bleu, sa, len(traces), policy.label))
    return sorted(points, key=lambda p: (p.AL, p.param))


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "AL", "BLEU", "SA", "n_sent"])
        for p in points:
            w.writerow([f"{p.param:.4f}", f"{p.AL:.4f}", f"{p.BLEU:.4f}",
                        "" if p.SA is None else f"{p.SA:.4f}", p.n_sent])


def read_curve_csv(path) -> list[CurvePoint]:
    with open(path) as fh:
        return [CurvePoint(float(r["param"]), float(r["AL"]), float(r["BLEU"]),
                           float(r["SA"]) if r["SA"] else None, int(r["n_sent"]))
                for r in csv.DictReader(fh)]
