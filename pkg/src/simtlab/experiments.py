"""End-to-end runs on the synthetic task and the comparisons built on them.

Every (seed, run) pair writes ``<cache>/seed<s>/<run>/result.json`` next to
its checkpoint, so the pipeline can be interrupted and resumed; a finished
run is never recomputed. Run it with::

    python3 -m simtlab.experiments --cache .acceptance_cache --seeds 1 2 3
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from simtlab.analysis import confidence_scatter, scatter_report
from simtlab.data import SynthConfig, default_splits, frontier_point, generate_synthetic
from simtlab.inference import Policy, sweep
from simtlab.metrics import CurvePoint, build_curve, correlations
from simtlab.model import ModelConfig, Transformer
from simtlab.oracle import coverage_audit
from simtlab.persistence import load, save
from simtlab.training import TrainConfig, Trainer

log = logging.getLogger(__name__)

SEEDS = (1, 2, 3)
STEPS = 3000
FT_STEPS = 1500
GAMMAS = (0.1, 0.125, 0.15, 0.175, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
MONO_GAMMAS = (0.1, 0.2, 0.3, 0.5, 0.7, 0.8, 0.9)
WAIT_KS = (1, 3, 5, 7)
MATCH_AL = 0.5
BIDIR_POINTS = (2.0, 3.0, 4.0)
OFFLINE = Policy.waitk(1000)
DATA = {"w3": SynthConfig(block_width=3), "w6": SynthConfig(block_width=6)}


@dataclass(frozen=True)
class RunSpec:
    name: str
    mode: str
    data: str = "w3"
    encoder: str = "bidirectional"
    k: int | None = None
    prohibition: tuple[int, int] | None = None
    disable_omt_loss: bool = False
    init: str | None = None
    steps: int = STEPS
    curve: bool = True
    analyze: bool = False
    audit: bool = False


RUNS = (
    RunSpec("omt_bi", "omt_only", curve=False),
    RunSpec("sm2_bi", "sm2", analyze=True, audit=True),
    RunSpec("sm2_uni", "sm2", encoder="unidirectional"),
    *(RunSpec(f"waitk_{k}", "waitk", encoder="unidirectional", k=k) for k in WAIT_KS),
    RunSpec("sm2_w6", "sm2", data="w6", audit=True),
    RunSpec("sm2_w6_band", "sm2", data="w6", prohibition=(1, 10), audit=True),
    RunSpec("sm2_no_omt", "sm2", disable_omt_loss=True, curve=False),
    RunSpec("sm2_ft", "sm2", init="omt_bi", steps=FT_STEPS),
)
RUN_BY_NAME = {r.name: r for r in RUNS}

_corpora: dict[str, dict] = {}


def corpora(name: str) -> dict:
    if name not in _corpora:
        _corpora[name] = generate_synthetic(DATA[name], default_splits())
    return _corpora[name]


def _points(results, corpus) -> list[dict]:
    refs = [e.target[:-1].tolist() for e in corpus]
    pts = build_curve(results, refs, [e.M for e in corpus], [e.alignment for e in corpus])
    return [asdict(p) for p in pts]


def run_one(spec: RunSpec, seed: int, cache: Path) -> dict:
    out = cache / f"seed{seed}" / spec.name
    result_path = out / "result.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    out.mkdir(parents=True, exist_ok=True)
    data = corpora(spec.data)
    train, valid, test = data["train"], data["valid"], data["test"]
    tcfg = TrainConfig(mode=spec.mode, k=spec.k, prohibition=spec.prohibition,
                       disable_omt_loss=spec.disable_omt_loss, max_steps=spec.steps, seed=seed)
    if spec.init:
        run_one(RUN_BY_NAME[spec.init], seed, cache)
        model, _, _ = load(cache / f"seed{seed}" / spec.init / "ckpt", mode=spec.mode)
    else:
        mcfg = ModelConfig(len(train.src_vocab), len(train.tgt_vocab), encoder_mode=spec.encoder)
        model = Transformer(mcfg, seed=seed)
    log_path = out / "train.log.jsonl" if spec.audit else None
    if log_path is not None and log_path.exists():
        log_path.unlink()
    log.info("seed %d run %s: training %d steps", seed, spec.name, spec.steps)
    t_cpu, t_wall = time.process_time(), time.perf_counter()
    trainer = Trainer(model, tcfg, log_path)
    summary = trainer.fit(train, valid)
    train_cpu, train_wall = time.process_time() - t_cpu, time.perf_counter() - t_wall
    save(model, trainer.opt, out / "ckpt", mode=spec.mode, seed=seed,
         vocab_digests={"src": train.src_vocab.digest(), "tgt": train.tgt_vocab.digest()})

    result = {"name": spec.name, "seed": seed, "spec": asdict(spec), "train": summary,
              "train_cpu_s": train_cpu, "train_wall_s": train_wall}
    t_eval = time.perf_counter()
    offline = sweep(test, model, [OFFLINE], with_forced=False)
    result["offline"] = _points(offline, test)[0]
    if spec.mode == "waitk":
        result["curve"] = _points(sweep(test, model, [Policy.waitk(spec.k)]), test)
    elif spec.curve:
        result["curve"] = _points(sweep(test, model, [Policy.confidence(g) for g in GAMMAS]), test)
    if spec.analyze:
        result["analysis"] = scatter_report(confidence_scatter(model, valid))
    if spec.audit:
        result["audit"] = {k: v for k, v in coverage_audit(log_path, spec.prohibition).to_dict().items()
                           if k != "histogram"}
    result["eval_wall_s"] = time.perf_counter() - t_eval
    result_path.write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    log.info("seed %d run %s done: train %.0fs cpu, offline BLEU %.2f", seed, spec.name, train_cpu,
             result["offline"]["BLEU"])
    return result


def run_all(cache, seeds=SEEDS, names=None) -> dict[int, dict[str, dict]]:
    cache = Path(cache)
    out: dict[int, dict[str, dict]] = {}
    for seed in seeds:
        for spec in RUNS:
            if names is None or spec.name in names:
                out.setdefault(seed, {})[spec.name] = run_one(spec, seed, cache)
    return out


# ---------------------------------------------------------------------------
# curve comparisons
# ---------------------------------------------------------------------------

def curve(result: dict) -> list[CurvePoint]:
    return [CurvePoint(**p) for p in result["curve"]]


def nearest(points: list[CurvePoint], al: float, tol: float = MATCH_AL) -> CurvePoint | None:
    """Closest point in AL, if within ``tol``."""
    best = min(points, key=lambda p: (abs(p.AL - al), p.param))
    return best if abs(best.AL - al) <= tol else None


def bleu_at(points: list[CurvePoint], al: float) -> float | None:
    """Linear interpolation of BLEU at ``al`` along the AL-sorted curve (None outside its range)."""
    xs = np.array([p.AL for p in points])
    ys = np.array([p.BLEU for p in points])
    if not xs.min() <= al <= xs.max():
        return None
    order = np.argsort(xs, kind="stable")
    return float(np.interp(al, xs[order], ys[order]))


def matched_margins(ours: list[CurvePoint], theirs: list[CurvePoint], field: str = "BLEU") -> list[tuple]:
    """For every point of ``theirs`` with a point of ``ours`` within the AL tolerance:
    (their AL, our value - their value)."""
    out = []
    for p in theirs:
        q = nearest(ours, p.AL)
        if q is not None:
            out.append((p.AL, getattr(q, field) - getattr(p, field)))
    return out


def median(values):
    return statistics.median(values)


def frontier(data: str = "w3") -> dict:
    return frontier_point(corpora(data)["test"])


def gamma_spearman(result: dict, grid=MONO_GAMMAS) -> float:
    pts = {p.param: p.AL for p in curve(result)}
    gs = [g for g in grid if g in pts]
    return correlations(gs, [pts[g] for g in gs])["spearman"]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description="run the synthetic-task experiment grid")
    ap.add_argument("--cache", default=".acceptance_cache")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    ap.add_argument("--runs", nargs="+", choices=sorted(RUN_BY_NAME))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    run_all(args.cache, args.seeds, args.runs)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
