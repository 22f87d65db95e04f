"""Synthetic bounded-reorder translation task, corpus files, and batching.

The synthetic task: a source sentence is cut into consecutive blocks of
width 1..w, each block is closed by a separator token, and the target is the
lexicon image of every block in reverse order. Gold alignments are exact.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from simtlab.errors import ConfigError, ContractViolation, IngestionError

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<s>", "</s>")
SEPARATOR = "|"


class Vocab:
    """Token <-> id map; ids 0..3 are PAD/UNK/BOS/EOS."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, UNK) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[int(i)] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text().splitlines()
        if tuple(lines[:4]) != SPECIALS:
            raise IngestionError(f"{path}: first four entries must be {SPECIALS}")
        return cls(lines[4:])


@dataclass
class ParallelExample:
    source: np.ndarray                   # (M,) ids
    target: np.ndarray                   # (N,) ids, EOS last
    alignment: np.ndarray | None = None  # (N,) 1-based source positions, 0 = unaligned

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=np.int64)
        if len(self.source) < 1 or len(self.target) < 2:
            raise ContractViolation("example needs M >= 1 and N >= 2 (content + EOS)")
        if self.alignment is not None:
            self.alignment = np.asarray(self.alignment, dtype=np.int64)
            if self.alignment.shape != self.target.shape:
                raise ContractViolation("alignment length must equal target length")
            if self.alignment.min() < 0 or self.alignment.max() > len(self.source):
                raise ContractViolation("alignment position outside [1, M]")

    @property
    def M(self) -> int:
        return len(self.source)

    @property
    def N(self) -> int:
        return len(self.target)


@dataclass
class Corpus:
    examples: list[ParallelExample]
    src_vocab: Vocab
    tgt_vocab: Vocab

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def subset(self, keep: Iterable[int]) -> "Corpus":
        return Corpus([self.examples[i] for i in keep], self.src_vocab, self.tgt_vocab)

    def filter_length(self, min_len: int | None = None, max_len: int | None = None) -> "Corpus":
        """Keep examples whose source length lies in [min_len, max_len]."""
        lo = min_len if min_len is not None else 0
        hi = max_len if max_len is not None else 10 ** 9
        return Corpus([e for e in self.examples if lo <= e.M <= hi], self.src_vocab, self.tgt_vocab)


# ---------------------------------------------------------------------------
# synthetic task
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    vocab_size: int = 50
    min_len: int = 6
    max_len: int = 12
    block_width: int = 3
    corpus_size: int = 20000
    seed: int = 1

    def __post_init__(self):
        if self.block_width < 1 or self.vocab_size < self.block_width:
            raise ConfigError(f"need vocab_size >= block_width >= 1, got {self.vocab_size}, {self.block_width}")
        if self.min_len < 1 or self.max_len < self.min_len:
            raise ConfigError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.corpus_size < 0:
            raise ConfigError("corpus_size must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticTask:
    """Vocabularies and the fixed source->target lexicon of one task instance."""

    config: SynthConfig
    src_vocab: Vocab = field(init=False)
    tgt_vocab: Vocab = field(init=False)
    lexicon: np.ndarray = field(init=False)  # source id -> target id

    def __post_init__(self):
        V = self.config.vocab_size
        self.src_vocab = Vocab([f"s{k}" for k in range(V)] + [SEPARATOR])
        self.tgt_vocab = Vocab([f"t{k}" for k in range(V)])
        perm = np.random.default_rng([self.config.seed, 0]).permutation(V)
        self.lexicon = np.zeros(len(self.src_vocab), dtype=np.int64)
        self.lexicon[4:4 + V] = 4 + perm

    @property
    def separator(self) -> int:
        return self.src_vocab.stoi[SEPARATOR]

    def make_example(self, content: np.ndarray, blocks: Sequence[int]) -> ParallelExample:
        """Build one example from content ids and the block widths covering it."""
        source, positions = [], []
        start = 0
        for width in blocks:
            block = content[start:start + width]
            positions.append(np.arange(len(source) + 1, len(source) + 1 + width))
            source.extend(block.tolist())
            source.append(self.separator)
            start += width
        if start != len(content):
            raise ContractViolation("blocks do not cover the content")
        order = np.concatenate([p[::-1] for p in positions])    # 1-based source positions
        src = np.array(source, dtype=np.int64)
        target = np.append(self.lexicon[src[order - 1]], EOS)
        alignment = np.append(order, len(src))
        return ParallelExample(src, target, alignment)

    def generate(self, size: int, rng: np.random.Generator) -> list[ParallelExample]:
        cfg = self.config
        out = []
        for _ in range(size):
            L = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            content = 4 + rng.integers(0, cfg.vocab_size, L)
            blocks, total = [], 0
            while total < L:
                width = min(int(rng.integers(1, cfg.block_width + 1)), L - total)
                blocks.append(width)
                total += width
            out.append(self.make_example(content, blocks))
        return out


def generate_synthetic(config: SynthConfig, splits: dict[str, int] | None = None) -> dict[str, Corpus]:
    """Generate corpora; ``splits`` maps split name -> size.

    Without ``splits`` a single ``"train"`` split of ``config.corpus_size``
    examples is produced. Same config -> identical output.
    """
    task = SyntheticTask(config)
    splits = splits or {"train": config.corpus_size}
    out = {}
    for idx, (name, size) in enumerate(splits.items()):
        rng = np.random.default_rng([config.seed, idx + 1])
        out[name] = Corpus(task.generate(size, rng), task.src_vocab, task.tgt_vocab)
    return out


def recover_permutation(source: np.ndarray, separator: int) -> np.ndarray:
    """Re-derive gold alignments of content tokens from separator positions."""
    order, block = [], []
    for pos, tok in enumerate(np.asarray(source).tolist(), start=1):
        if tok == separator:
            order.extend(reversed(block))
            block = []
        else:
            block.append(pos)
    order.extend(reversed(block))
    return np.array(order, dtype=np.int64)


def oracle_read_counts(alignment: np.ndarray) -> np.ndarray:
    """Minimal read counts satisfying every alignment: running max of a,
    floored at 1 since a session starts with one token received."""
    return np.maximum(np.maximum.accumulate(np.asarray(alignment)), 1)


def frontier_point(corpus: Corpus) -> dict:
    """Corpus AL of the minimal alignment-satisfying policy; its BLEU is 100 by construction."""
    from simtlab.metrics import average_lagging

    als = [average_lagging(oracle_read_counts(e.alignment), e.M) for e in corpus if e.alignment is not None]
    if not als:
        raise ContractViolation("frontier_point: corpus has no alignments")
    return {"AL": float(np.mean(als)), "BLEU": 100.0, "SA": 1.0, "n_sent": len(als)}


def default_splits(train: int = 20000, valid: int = 1000, test: int = 1000) -> dict[str, int]:
    return {"train": train, "valid": valid, "test": test}


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def format_alignment(alignment: np.ndarray | None) -> str:
    """Pharaoh ``src-tgt`` pairs, 0-based, content positions only (no EOS)."""
    if alignment is None:
        return ""
    return " ".join(f"{a - 1}-{t}" for t, a in enumerate(alignment[:-1].tolist()) if a > 0)


def parse_alignment(line: str, M: int, N: int, lineno: int = 0) -> np.ndarray | None:
    """Parse a Pharaoh line into 1-based a_i over N content tokens (0 = unaligned).

    Multi-aligned target tokens take the largest source position.
    """
    line = line.strip()
    if not line:
        return None
    a = np.zeros(N, dtype=np.int64)
    for item in line.split():
        parts = item.split("-")
        try:
            s, t = int(parts[0]), int(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise IngestionError(f"line {lineno}: malformed alignment token {item!r}") from None
        if not (0 <= s < M and 0 <= t < N):
            raise IngestionError(f"line {lineno}: alignment {item!r} outside {M}x{N} sentence pair")
        a[t] = max(a[t], s + 1)
    return a


def write_corpus(corpus: Corpus, prefix, with_alignment: bool = True) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    sv, tv = corpus.src_vocab, corpus.tgt_vocab
    with open(f"{prefix}.src", "w") as fs, open(f"{prefix}.tgt", "w") as ft:
        for e in corpus:
            fs.write(" ".join(sv.decode(e.source)) + "\n")
            ft.write(" ".join(tv.decode(e.target[:-1])) + "\n")
    if with_alignment:
        with open(f"{prefix}.align", "w") as fa:
            for e in corpus:
                fa.write(format_alignment(e.alignment) + "\n")


def _read_lines(path) -> list[str]:
    try:
        return Path(path).read_text().splitlines()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from None


def load_parallel(src_path, tgt_path, align_path=None, src_vocab: Vocab | None = None,
                  tgt_vocab: Vocab | None = None) -> Corpus:
    """Read whitespace-tokenised parallel files (plus optional Pharaoh alignments).

    Vocabularies are built from the data when not given; otherwise unknown
    tokens map to UNK. EOS is appended to every target and aligned to M.
    """
    src_lines, tgt_lines = _read_lines(src_path), _read_lines(tgt_path)
    if len(src_lines) != len(tgt_lines):
        raise IngestionError(f"line count mismatch: {src_path} has {len(src_lines)} lines, "
                             f"{tgt_path} has {len(tgt_lines)}")
    align_lines = None
    if align_path is not None:
        align_lines = _read_lines(align_path)
        if len(align_lines) != len(src_lines):
            raise IngestionError(f"line count mismatch: {align_path} has {len(align_lines)} lines, "
                                 f"expected {len(src_lines)}")
    build = src_vocab is None
    src_vocab = src_vocab or Vocab()
    tgt_vocab = tgt_vocab or Vocab()
    examples = []
    for n, (sl, tl) in enumerate(zip(src_lines, tgt_lines), start=1):
        s_toks, t_toks = sl.split(), tl.split()
        if not s_toks or not t_toks:
            raise IngestionError(f"line {n}: empty source or target sentence")
        if build:
            for t in s_toks:
                src_vocab.add(t)
            for t in t_toks:
                tgt_vocab.add(t)
        src = src_vocab.encode(s_toks)
        tgt = np.append(tgt_vocab.encode(t_toks), EOS)
        align = None
        if align_lines is not None:
            a = parse_alignment(align_lines[n - 1], len(s_toks), len(t_toks), n)
            if a is not None:
                align = np.append(a, len(s_toks))
        examples.append(ParallelExample(src, tgt, align))
    return Corpus(examples, src_vocab, tgt_vocab)


def load_split(data_dir, split: str) -> Corpus:
    """Load ``<split>.{src,tgt[,align]}`` with the directory's vocab files."""
    d = Path(data_dir)
    align = d / f"{split}.align"
    return load_parallel(d / f"{split}.src", d / f"{split}.tgt", align if align.exists() else None,
                         Vocab.load(d / "src.vocab"), Vocab.load(d / "tgt.vocab"))


def write_dataset(corpora: dict[str, Corpus], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    first = next(iter(corpora.values()))
    first.src_vocab.save(out / "src.vocab")
    first.tgt_vocab.save(out / "tgt.vocab")
    frontier = {}
    for name, corpus in corpora.items():
        write_corpus(corpus, out / name)
        if any(e.alignment is not None for e in corpus):
            frontier[name] = frontier_point(corpus)
    (out / "frontier.json").write_text(json.dumps(frontier, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray       # (B, S) padded with PAD
    src_len: np.ndarray   # (B,)
    tgt: np.ndarray       # (B, T) targets incl. EOS, padded
    tgt_len: np.ndarray   # (B,)
    index: np.ndarray     # (B,) positions in the source corpus

    @property
    def size(self) -> int:
        return len(self.src_len)

    @property
    def src_mask(self) -> np.ndarray:
        return np.arange(self.src.shape[1])[None] < self.src_len[:, None]

    @property
    def tgt_mask(self) -> np.ndarray:
        return np.arange(self.tgt.shape[1])[None] < self.tgt_len[:, None]

    @property
    def padded_tokens(self) -> int:
        return self.size * max(self.src.shape[1], self.tgt.shape[1])


def collate(examples: Sequence[ParallelExample], index: Sequence[int]) -> Batch:
    B = len(examples)
    S = max(e.M for e in examples)
    Tn = max(e.N for e in examples)
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt = np.full((B, Tn), PAD, dtype=np.int64)
    for b, e in enumerate(examples):
        src[b, :e.M] = e.source
        tgt[b, :e.N] = e.target
    return Batch(src, np.array([e.M for e in examples]), tgt, np.array([e.N for e in examples]),
                 np.asarray(index, dtype=np.int64))


def make_batches(corpus: Corpus, max_tokens: int, seed: int, max_positions: int | None = None) -> list[Batch]:
    """Length-bucketed, seed-shuffled batches of at most ``max_tokens`` padded tokens.

    A batch's padded size is ``B * max(S, T)``. Examples longer than
    ``max_positions`` are dropped with a warning count.
    """
    examples = corpus.examples
    if not examples:
        return []
    longest = max(max(e.M, e.N) for e in examples)
    if max_tokens < longest:
        raise ContractViolation(f"max_tokens {max_tokens} smaller than longest sentence ({longest})")
    rng = np.random.default_rng(seed)
    keep = [i for i, e in enumerate(examples)
            if max_positions is None or max(e.M, e.N) <= max_positions]
    skipped = len(examples) - len(keep)
    if skipped:
        log.warning("make_batches: skipped %d examples longer than %d positions", skipped, max_positions)
    noise = rng.random(len(keep))
    lengths = np.array([max(examples[i].M, examples[i].N) for i in keep])
    order = [keep[i] for i in np.lexsort((noise, lengths))]
    batches, current, width = [], [], 0
    for i in order:
        e = examples[i]
        w = max(width, e.M, e.N)
        if current and w * (len(current) + 1) > max_tokens:
            batches.append(collate([examples[k] for k in current], current))
            current, w = [], max(e.M, e.N)
        current.append(i)
        width = w
    if current:
        batches.append(collate([examples[k] for k in current], current))
    perm = rng.permutation(len(batches))
    return [batches[k] for k in perm]
