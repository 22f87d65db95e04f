"""Teacher-forced confidence analysis.

For every example and every received-prefix length j, decode the gold
target with the prefix encoding and record the predicted confidence next to
the probability the prefix model assigns to the gold token.
"""

from __future__ import annotations

import csv
from typing import NamedTuple

import numpy as np

from simtlab.data import PAD, Corpus
from simtlab.metrics import correlations
from simtlab.model import Transformer, shift_right
from simtlab.tensor import softmax


class ScatterRow(NamedTuple):
    sentence: int
    M: int
    i: int          # 1-based target position
    j: int          # source tokens received
    conf: float
    prob: float     # p_simt of the gold token


def confidence_scatter(model: Transformer, corpus: Corpus, batch_rows: int = 512) -> list[ScatterRow]:
    states = [(n, j) for n, e in enumerate(corpus) for j in range(1, e.M + 1)]
    examples = corpus.examples
    rows: list[ScatterRow] = []
    for start in range(0, len(states), batch_rows):
        chunk = states[start:start + batch_rows]
        S = max(examples[n].M for n, _ in chunk)
        Tn = max(examples[n].N for n, _ in chunk)
        src = np.full((len(chunk), S), PAD, dtype=np.int64)
        tgt = np.full((len(chunk), Tn), PAD, dtype=np.int64)
        for r, (n, _) in enumerate(chunk):
            e = examples[n]
            src[r, :e.M] = e.source
            tgt[r, :e.N] = e.target
        js = np.array([j for _, j in chunk])
        enc = model.encode(src, js)
        hidden, logits = model.decode(enc, shift_right(tgt), js)
        probs = softmax(logits).data
        conf = model.confidence_head(hidden).data
        for r, (n, j) in enumerate(chunk):
            e = examples[n]
            gold = probs[r, np.arange(e.N), e.target]
            for i in range(e.N):
                rows.append(ScatterRow(n, e.M, i + 1, j, float(conf[r, i]), float(gold[i])))
    return rows


def scatter_report(rows: list[ScatterRow]) -> dict:
    conf = np.array([r.conf for r in rows])
    prob = np.array([r.prob for r in rows])
    first = [r.conf for r in rows if r.j == 1]
    full = [r.conf for r in rows if r.j == r.M]
    report = correlations(conf, prob)
    report.update(states=len(rows), mean_conf_first=float(np.mean(first)), mean_conf_full=float(np.mean(full)))
    return report


def write_scatter_csv(rows: list[ScatterRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ScatterRow._fields)
        for r in rows:
            w.writerow([r.sentence, r.M, r.i, r.j, f"{r.conf:.6f}", f"{r.prob:.6f}"])
