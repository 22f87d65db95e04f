"""Streaming simultaneous decoding.

A session starts with the first source token received (j = 1) and an empty
target. At every state the model computes the prefix-conditioned prediction
and its confidence; the policy then either WRITEs the greedy token or READs
the next source token. Once the source is exhausted every decision is a
forced WRITE.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from simtlab.data import BOS, EOS, PAD, Corpus
from simtlab.errors import ConfigError, ContractViolation
from simtlab.model import IncrementalEncoder, Transformer
from simtlab.tensor import Tensor

READ, WRITE = "R", "W"


@dataclass(frozen=True)
class Policy:
    kind: str      # "confidence" or "waitk"
    value: float   # threshold gamma, or k

    def __post_init__(self):
        if self.kind == "confidence":
            if not 0.0 < self.value < 1.0:
                raise ConfigError(f"confidence threshold must lie in (0, 1), got {self.value}")
        elif self.kind == "waitk":
            if self.value < 1 or int(self.value) != self.value:
                raise ConfigError(f"wait-k needs an integer k >= 1, got {self.value}")
        else:
            raise ConfigError(f"unknown policy kind {self.kind!r}")

    @classmethod
    def confidence(cls, gamma: float) -> "Policy":
        return cls("confidence", float(gamma))

    @classmethod
    def waitk(cls, k: int) -> "Policy":
        return cls("waitk", int(k))

    @property
    def label(self) -> str:
        return f"conf:{self.value:g}" if self.kind == "confidence" else f"waitk:{int(self.value)}"

    def wants_write(self, c: float, i: int, j: int) -> bool:
        """Decision at state (i, j): i is the 1-based index of the next target token."""
        if self.kind == "confidence":
            return decide(c, self.value) == WRITE
        return j >= self.value + i - 1


def decide(c: float, gamma: float) -> str:
    """WRITE iff c >= gamma (a tie writes)."""
    return WRITE if c >= gamma else READ


def parse_policy_grid(spec: str) -> list[Policy]:
    """``conf:0.3,0.5`` or ``waitk:1,3,5`` -> policies."""
    try:
        kind, values = spec.split(":", 1)
        items = [v for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"policy grid must look like conf:<g,...> or waitk:<k,...>, got {spec!r}") from None
    if not items:
        raise ConfigError(f"empty policy grid {spec!r}")
    try:
        if kind == "conf":
            return [Policy.confidence(float(v)) for v in items]
        if kind == "waitk":
            return [Policy.waitk(int(v)) for v in items]
    except ValueError:
        raise ConfigError(f"bad value in policy grid {spec!r}") from None
    raise ConfigError(f"unknown policy kind {kind!r} in {spec!r}")


@dataclass
class SessionTrace:
    tokens: list[int] = field(default_factory=list)       # emitted ids (EOS last unless truncated)
    g: list[int] = field(default_factory=list)            # source tokens read before each emission
    decisions: str = ""                                    # READ/WRITE after the initial token
    confidences: list[float] = field(default_factory=list)  # one per WRITE
    source_read: int = 1
    truncated: bool = False

    @property
    def hypothesis(self) -> list[int]:
        return self.tokens[:-1] if self.tokens and self.tokens[-1] == EOS else list(self.tokens)

    def replay(self) -> tuple[list[int], int]:
        """Recompute g and the read count from the decision string alone."""
        j, g = 1, []
        for d in self.decisions:
            if d == READ:
                j += 1
            elif d == WRITE:
                g.append(j)
            else:
                raise ContractViolation(f"unknown decision {d!r}")
        return g, j

    def validate(self, M: int | None = None) -> None:
        g, j = self.replay()
        problems = []
        if g != self.g:
            problems.append("decisions do not replay to g")
        if j != self.source_read:
            problems.append("READ count disagrees with source_read")
        if len(self.tokens) != self.decisions.count(WRITE) or len(self.confidences) != len(self.tokens):
            problems.append("WRITE count disagrees with output length")
        if any(b < a for a, b in zip(self.g, self.g[1:])):
            problems.append("g is not monotone")
        if M is not None and (j > M or any(x > M for x in self.g)):
            problems.append("read beyond the source")
        if problems:
            raise ContractViolation("invalid trace: " + "; ".join(problems))


def default_cap(M: int, model: Transformer) -> int:
    return min(2 * M + 10, model.config.max_positions - 1)


def _conf_and_token(model: Transformer, enc: Tensor, y: Sequence[int], j: int):
    tgt_in = np.array([[BOS, *y]], dtype=np.int64)
    hidden, logits = model.decode(enc, tgt_in, np.array([j]))
    h = Tensor(hidden.data[:, -1])
    c = float(model.confidence_head(h).data[0])
    return c, int(np.argmax(logits.data[0, -1]))


def run_session(source_stream: Iterable[int], model: Transformer, policy: Policy,
                max_target_len: int | None = None, forced_target: Sequence[int] | None = None) -> SessionTrace:
    """Decode one sentence while the source arrives token by token.

    With ``forced_target`` every WRITE emits the next gold token instead of
    the argmax (used to measure alignment satisfaction on references).
    """
    if max_target_len is None:
        if not hasattr(source_stream, "__len__"):
            max_target_len = model.config.max_positions - 1
        else:
            max_target_len = default_cap(len(source_stream), model)
    it = iter(source_stream)
    try:
        read = [int(next(it))]
    except StopIteration:
        raise ContractViolation("run_session: empty source") from None
    uni = model.config.encoder_mode == "unidirectional"
    inc = IncrementalEncoder(model) if uni else None

    def encoding():
        if inc is not None:
            while len(inc) < len(read):
                inc.extend(read[len(inc)])
            return Tensor(inc.array()[None])
        return Tensor(model.encode(np.array(read)[None]).data)

    enc = encoding()
    trace = SessionTrace()
    exhausted = False
    forced = list(forced_target) if forced_target is not None else None
    while True:
        if trace.tokens and trace.tokens[-1] == EOS:
            break
        if forced is not None and len(trace.tokens) == len(forced):
            break
        if len(trace.tokens) >= max_target_len:
            trace.truncated = True
            break
        c, tok = _conf_and_token(model, enc, trace.tokens, len(read))
        if not exhausted and not policy.wants_write(c, len(trace.tokens) + 1, len(read)):
            try:
                read.append(int(next(it)))
            except StopIteration:
                exhausted = True
            else:
                trace.decisions += READ
                enc = encoding()
                continue
        if forced is not None:
            tok = int(forced[len(trace.tokens)])
        trace.tokens.append(tok)
        trace.g.append(len(read))
        trace.confidences.append(c)
        trace.decisions += WRITE
    trace.source_read = len(read)
    return trace


def run_sessions(model: Transformer, sources: Sequence[np.ndarray], policy: Policy,
                 forced_targets: Sequence[np.ndarray] | None = None, batch_size: int = 256,
                 threads: int | None = None) -> list[SessionTrace]:
    """Batched equivalent of :func:`run_session` over many complete sources.

    Sentences advance in lockstep; each row only ever sees its own received
    prefix through the attention masks. Results keep input order.
    """
    order = sorted(range(len(sources)), key=lambda i: len(sources[i]))
    chunks = [order[s:s + batch_size] for s in range(0, len(order), batch_size)]
    threads = threads or int(os.environ.get("SM2_THREADS", "1"))

    def work(idx):
        forced = [forced_targets[i] for i in idx] if forced_targets is not None else None
        return _run_chunk(model, [sources[i] for i in idx], policy, forced)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(c) for c in chunks]
    out: list[SessionTrace | None] = [None] * len(sources)
    for idx, traces in zip(chunks, results):
        for i, t in zip(idx, traces):
            out[i] = t
    return out


def _run_chunk(model, sources, policy, forced):
    B = len(sources)
    M = np.array([len(s) for s in sources])
    if M.min() < 1:
        raise ContractViolation("run_sessions: empty source")
    S = int(M.max())
    src = np.full((B, S), PAD, dtype=np.int64)
    for b, s in enumerate(sources):
        src[b, :len(s)] = s
    caps = np.array([default_cap(int(m), model) for m in M])
    j = np.ones(B, dtype=np.int64)
    traces = [SessionTrace() for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    enc = model.encode(src, j).data
    stale = False
    while not done.all():
        if stale:
            enc = model.encode(src, j).data
            stale = False
        act = np.flatnonzero(~done)
        lens = np.array([len(traces[b].tokens) for b in act])
        L = int(lens.max()) + 1
        tgt_in = np.full((len(act), L), PAD, dtype=np.int64)
        tgt_in[:, 0] = BOS
        for r, b in enumerate(act):
            tgt_in[r, 1:lens[r] + 1] = traces[b].tokens
        hidden, logits = model.decode(Tensor(enc[act]), tgt_in, j[act])
        rows = np.arange(len(act))
        h = hidden.data[rows, lens]
        conf = model.confidence_head(Tensor(h)).data
        toks = np.argmax(logits.data[rows, lens], axis=-1)
        for r, b in enumerate(act):
            t = traces[b]
            c = float(conf[r])
            if j[b] < M[b] and not policy.wants_write(c, len(t.tokens) + 1, int(j[b])):
                j[b] += 1
                t.decisions += READ
                stale = True
                continue
            tok = int(forced[b][len(t.tokens)]) if forced is not None else int(toks[r])
            t.tokens.append(tok)
            t.g.append(int(j[b]))
            t.confidences.append(c)
            t.decisions += WRITE
            if tok == EOS and forced is None:
                done[b] = True
            elif forced is not None and len(t.tokens) == len(forced[b]):
                done[b] = True
            elif len(t.tokens) >= caps[b]:
                t.truncated = True
                done[b] = True
    for b, t in enumerate(traces):
        t.source_read = int(j[b])
    return traces


class SweepResult(NamedTuple):
    policy: Policy
    traces: list[SessionTrace]
    forced: list[SessionTrace] | None


def sweep(corpus: Corpus, model: Transformer, grid: Sequence[Policy], with_forced: bool | None = None,
          batch_size: int = 256, threads: int | None = None) -> list[SweepResult]:
    """One decoding pass per policy. Forced (reference) passes are added
    when alignments are present, for alignment-satisfaction scoring."""
    if not grid:
        raise ContractViolation("sweep: empty policy grid")
    sources = [e.source for e in corpus]
    if with_forced is None:
        with_forced = any(e.alignment is not None for e in corpus)
    refs = [e.target for e in corpus] if with_forced else None
    results = []
    for policy in grid:
        traces = run_sessions(model, sources, policy, batch_size=batch_size, threads=threads)
        forced = (run_sessions(model, sources, policy, refs, batch_size=batch_size, threads=threads)
                  if with_forced else None)
        results.append(SweepResult(policy, traces, forced))
    return results


def trace_record(source_tokens: Sequence[str], hyp_tokens: Sequence[str], trace: SessionTrace) -> dict:
    """One line of the trace dump."""
    return {
        "source": " ".join(source_tokens),
        "hypothesis": " ".join(hyp_tokens),
        "g": trace.g,
        "decisions": trace.decisions,
        "confidences": [round(c, 6) for c in trace.confidences],
        "truncated": trace.truncated,
    }
