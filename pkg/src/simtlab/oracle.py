"""Independent checks: finite differences, the closed-form confidence
gradient, exhaustive decision-path enumeration, and training-log audits.

Nothing here reuses the loss or autodiff code it is meant to check.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from simtlab.errors import ContractViolation, OracleError

MAX_PATH_SIZE = 22


def finite_diff(fn: Callable[[], float], params: Sequence[np.ndarray], eps: float = 1e-4,
                coords: dict[int, Sequence[int]] | None = None) -> list[np.ndarray]:
    """Central-difference gradient of a scalar ``fn()`` w.r.t. arrays mutated in place.

    ``coords`` optionally restricts which flat indices of parameter k are
    probed (the rest stay 0 in the estimate).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ContractViolation(f"finite_diff: eps {eps} outside [1e-6, 1e-3]")
    grads = []
    for k, p in enumerate(params):
        if p.dtype != np.float64:
            raise ContractViolation("finite_diff: parameters must be float64")
        est = np.zeros_like(p)
        flat = p.reshape(-1)
        est_flat = est.reshape(-1)
        idx = range(flat.size) if coords is None or k not in coords else coords[k]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = fn()
            flat[i] = orig - eps
            down = fn()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise OracleError(f"finite_diff: non-finite evaluation at param {k}, index {i}")
            est_flat[i] = (up - down) / (2 * eps)
        grads.append(est)
    return grads


def naive_sm2_loss(c: Sequence[float], p_simt: Sequence[float], p_omt: Sequence[float], lam: float) -> float:
    """Scalar loop version of the modified-probability loss (no L_omt term)."""
    total = 0.0
    for ci, ps, po in zip(c, p_simt, p_omt):
        total -= math.log(ci * ps + (1.0 - ci) * po)
        total -= lam * math.log(ci)
    return total


def closed_form_dldc(c: float, p_simt_correct: float, p_omt_correct: float, lam: float) -> float:
    """-(p_ij - p_i) / (c p_ij + (1 - c) p_i) - lam / c."""
    if not 0.0 < c < 1.0:
        raise ContractViolation(f"closed_form_dldc: c={c} outside (0, 1)")
    if not (0.0 < p_simt_correct <= 1.0 and 0.0 < p_omt_correct <= 1.0):
        raise ContractViolation("closed_form_dldc: probabilities must lie in (0, 1]")
    mixed = c * p_simt_correct + (1.0 - c) * p_omt_correct
    return -(p_simt_correct - p_omt_correct) / mixed - lam / c


@dataclass
class PathLattice:
    M: int
    N: int
    paths: list[str] = field(default_factory=list)   # strings over {R, W}, M R's and N W's

    @staticmethod
    def read_counts(path: str) -> list[int]:
        """g-sequence of a full path that starts with nothing read."""
        j, g = 0, []
        for d in path:
            if d == "R":
                j += 1
            else:
                g.append(j)
        return g

    def evaluate(self, metric: Callable[[list[int]], float]) -> list[float]:
        return [metric(self.read_counts(p)) for p in self.paths]


def enumerate_paths(M: int, N: int) -> PathLattice:
    """All C(M+N, N) interleavings of M READs and N WRITEs."""
    if M < 0 or N < 0:
        raise ContractViolation("enumerate_paths: negative size")
    if M + N > MAX_PATH_SIZE:
        raise ContractViolation(f"enumerate_paths: M+N={M + N} exceeds {MAX_PATH_SIZE} "
                                f"(would enumerate {math.comb(M + N, N)} paths)")
    paths = []
    for writes in combinations(range(M + N), N):
        s = ["R"] * (M + N)
        for w in writes:
            s[w] = "W"
        paths.append("".join(s))
    return PathLattice(M, N, paths)


def oracle_frontier(alignment: Sequence[int], M: int):
    """Exhaustive search for the minimum-AL path that satisfies every alignment.

    Paths that write before reading anything are skipped (a simultaneous
    session always holds x_1). Returns ``(g, AL)``.
    """
    from simtlab.metrics import average_lagging, satisfied_alignments

    N = len(alignment)
    best = None
    for path in enumerate_paths(M, N).paths:
        g = PathLattice.read_counts(path)
        if g[0] < 1 or satisfied_alignments(alignment, g) < 1.0:
            continue
        al = average_lagging(g, M)
        if best is None or al < best[1]:
            best = (g, al)
    if best is None:
        raise OracleError("no path satisfies the alignment")
    return best


# ---------------------------------------------------------------------------
# training-log audit
# ---------------------------------------------------------------------------

@dataclass
class AuditReport:
    steps: int
    sentences: int
    histogram: dict[int, dict[int, int]]      # M -> j -> count
    chi2: float
    dof: int
    p_value: float
    missing_groups: list[tuple[int, int]]      # (M, j) never visited
    violations: list[dict]
    band: tuple[int, int] | None
    sparse_lengths: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "sentences": self.sentences,
            "chi2": self.chi2,
            "dof": self.dof,
            "p_value": self.p_value,
            "missing_groups": [list(x) for x in self.missing_groups],
            "violations": self.violations[:100],
            "violation_count": len(self.violations),
            "band": list(self.band) if self.band else None,
            "sparse_lengths": self.sparse_lengths,
            "histogram": {str(m): {str(j): c for j, c in sorted(h.items())} for m, h in sorted(self.histogram.items())},
        }


def _in_band(i: int, j: int, M: int, band) -> bool:
    k1, k2 = band
    # wait-k1 path reads min(k1+i-1, M) tokens before writing y_i; wait-k2 reads min(k2+i-1, M)
    return min(k1 + i - 1, M) <= j <= min(k2 + i - 1, M)


def coverage_audit(log_path, band: tuple[int, int] | None = None, min_expected: float = 5.0) -> AuditReport:
    """Histogram of sampled prefix groups plus out-of-band trained states.

    Reads line-delimited step records carrying per-sentence ``j``, ``M``,
    ``N`` and, under a prohibition band, the trained position spans. The
    uniformity test and the empty-group check cover source lengths whose
    expected count per group is at least ``min_expected``; rarer lengths are
    listed in ``sparse_lengths``.
    """
    hist: dict[int, dict[int, int]] = {}
    violations: list[dict] = []
    steps = sentences = 0
    lines = Path(log_path).read_text().splitlines()
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise OracleError(f"{log_path}:{n}: unparsable record ({exc.msg})") from None
        if "valid_loss" in rec or "config" in rec:
            continue
        try:
            js, Ms, Ns = rec["j"], rec["M"], rec["N"]
        except KeyError as exc:
            raise OracleError(f"{log_path}:{n}: record lacks field {exc}") from None
        if not (len(js) == len(Ms) == len(Ns)):
            raise OracleError(f"{log_path}:{n}: j/M/N lists differ in length")
        rec_band = tuple(rec["prohibition"]) if rec.get("prohibition") else band
        trained = rec.get("trained")
        steps += 1
        for b, (j, M, N) in enumerate(zip(js, Ms, Ns)):
            sentences += 1
            if not 1 <= j <= M:
                violations.append({"line": n, "sentence": b, "j": j, "M": M, "reason": "j outside [1, M]"})
            hist.setdefault(M, {}).setdefault(j, 0)
            hist[M][j] += 1
            if rec_band is None:
                continue
            spans = trained[b] if trained is not None else [[1, N]]
            for lo, hi in spans:
                for i in range(lo, hi + 1):
                    if not _in_band(i, j, M, rec_band):
                        violations.append({"line": n, "sentence": b, "i": i, "j": j, "M": M,
                                           "reason": "trained state outside band"})
    chi2, dof = 0.0, 0
    missing, sparse = [], []
    for M, counts in sorted(hist.items()):
        total = sum(counts.values())
        expected = total / M
        if expected < min_expected:
            sparse.append(M)
            continue
        for j in range(1, M + 1):
            obs = counts.get(j, 0)
            if obs == 0:
                missing.append((M, j))
            chi2 += (obs - expected) ** 2 / expected
        dof += M - 1
    p_value = float(stats.chi2.sf(chi2, dof)) if dof > 0 else 1.0
    return AuditReport(steps, sentences, hist, chi2, dof, p_value, sorted(missing), violations, band, sparse)
