"""Command-line entry point: ``simtlab gen-data | train | eval | analyze | audit``.

Settings come from an optional JSON config file with one section per
concern (``data``, ``model``, ``train``, ``eval``, ``analyze``) plus a
top-level ``seed``; command-line flags override the file. Exit status is 0
on success, 1 for configuration errors and 2 for runtime or numeric
failures, and a one-line JSON error record goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from simtlab.errors import CheckpointError, ConfigError, SimtError

log = logging.getLogger("simtlab")

SECTIONS = ("seed", "data", "model", "train", "eval", "analyze")


@dataclass
class DataSection:
    vocab_size: int = 50
    min_len: int = 6
    max_len: int = 12
    block_width: int = 3
    train_size: int = 20000
    valid_size: int = 1000
    test_size: int = 1000


@dataclass
class EvalSection:
    split: str = "test"
    policy: str = "conf:0.05,0.1,0.2,0.3,0.5,0.7,0.9"
    min_len: int | None = None
    max_len: int | None = None
    batch_size: int = 256


@dataclass
class AnalyzeSection:
    split: str = "valid"
    max_sentences: int | None = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"config section {name!r}: {exc}") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(cfg) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    for name in SECTIONS[1:]:
        if not isinstance(cfg.get(name, {}), dict):
            raise ConfigError(f"config section {name!r} must be an object")
    return cfg


def parse_band(text: str | None):
    if text is None:
        return None
    try:
        k1, k2 = (int(v) for v in text.split(":"))
    except ValueError:
        raise ConfigError(f"--prohibition expects k1:k2, got {text!r}") from None
    return (k1, k2)


def _log_resolved(command: str, resolved: dict) -> None:
    log.info("resolved config %s", json.dumps({"command": command, **resolved}, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg: dict) -> int:
    from simtlab.data import SynthConfig, generate_synthetic, write_dataset

    seed = args.seed if args.seed is not None else cfg.get("seed", 1)
    section = _section(DataSection, cfg.get("data", {}), "data")
    synth = SynthConfig(vocab_size=section.vocab_size, min_len=section.min_len, max_len=section.max_len,
                        block_width=section.block_width, corpus_size=section.train_size, seed=seed)
    splits = {"train": section.train_size, "valid": section.valid_size, "test": section.test_size}
    _log_resolved("gen-data", {"seed": seed, "data": asdict(section)})
    write_dataset(generate_synthetic(synth, splits), args.out)
    (Path(args.out) / "data_config.json").write_text(
        json.dumps({"seed": seed, "data": asdict(section)}, indent=2, sort_keys=True) + "\n")
    return 0


def _train_config(args, cfg: dict):
    from simtlab.training import TrainConfig

    values = dict(cfg.get("train", {}))
    values["seed"] = args.seed if args.seed is not None else cfg.get("seed", values.get("seed", 1))
    if args.mode is not None:
        values["mode"] = args.mode
    if args.lam is not None:
        values["lam"] = args.lam
    if args.prohibition is not None:
        values["prohibition"] = parse_band(args.prohibition)
    if args.k is not None:
        values["k"] = args.k
    if args.steps is not None:
        values["max_steps"] = args.steps
    return _section(TrainConfig, values, "train")


def cmd_train(args, cfg: dict) -> int:
    from simtlab.data import load_split
    from simtlab.model import ModelConfig, Transformer
    from simtlab.persistence import load, save
    from simtlab.training import Trainer

    tcfg = _train_config(args, cfg)
    train_corpus = load_split(args.data, "train")
    valid_corpus = load_split(args.data, "valid") if (Path(args.data) / "valid.src").exists() else None
    model_values = dict(cfg.get("model", {}))
    if args.encoder is not None:
        model_values["encoder_mode"] = args.encoder
    if tcfg.mode in ("waitk", "multipath_waitk"):
        model_values.setdefault("encoder_mode", "unidirectional")
    mcfg = _section(ModelConfig, {"src_vocab": len(train_corpus.src_vocab),
                                  "tgt_vocab": len(train_corpus.tgt_vocab), **model_values}, "model")
    digests = {"src": train_corpus.src_vocab.digest(), "tgt": train_corpus.tgt_vocab.digest()}

    init_info = None
    if args.init:
        model, _, manifest = load(args.init, expected_config=mcfg if cfg.get("model") else None,
                                  mode=tcfg.mode)
        if manifest["vocab_digests"] and manifest["vocab_digests"] != digests:
            raise CheckpointError(f"{args.init}: vocabularies differ from {args.data}")
        mcfg = model.config
        init_info = {"path": str(args.init), **manifest["loaded_with"]}
    else:
        model = Transformer(mcfg, seed=tcfg.seed)

    resolved = {"seed": tcfg.seed, "model": mcfg.to_dict(), "train": tcfg.to_dict(), "init": init_info,
                "data": str(args.data)}
    _log_resolved("train", resolved)
    log_path = Path(args.log) if args.log else Path(f"{args.out}.log.jsonl")
    if log_path.exists():
        log_path.unlink()
    trainer = Trainer(model, tcfg, log_path)
    trainer._emit({"config": resolved})

    def checkpoint(tr):
        save(tr.model, tr.opt, args.out, mode=tcfg.mode, seed=tcfg.seed, vocab_digests=digests,
             extra={"train": tcfg.to_dict(), "init": init_info})

    try:
        summary = trainer.fit(train_corpus, valid_corpus, on_best=checkpoint)
    finally:
        trainer.close()
    checkpoint(trainer)
    log.info("training finished %s", json.dumps(summary))
    return 0


def _load_checked(checkpoint, data_dir):
    from simtlab.data import Vocab
    from simtlab.persistence import load

    model, _, manifest = load(checkpoint)
    digests = manifest.get("vocab_digests") or {}
    d = Path(data_dir)
    actual = {"src": Vocab.load(d / "src.vocab").digest(), "tgt": Vocab.load(d / "tgt.vocab").digest()}
    if digests and digests != actual:
        raise CheckpointError(f"{checkpoint}: vocabularies differ from {data_dir}")
    return model


def cmd_eval(args, cfg: dict) -> int:
    from simtlab.data import load_split
    from simtlab.inference import parse_policy_grid, sweep, trace_record
    from simtlab.metrics import build_curve, write_curve_csv

    values = dict(cfg.get("eval", {}))
    for flag, key in (("policy", "policy"), ("min_len", "min_len"), ("max_len", "max_len"), ("split", "split")):
        if getattr(args, flag) is not None:
            values[key] = getattr(args, flag)
    section = _section(EvalSection, values, "eval")
    grid = parse_policy_grid(section.policy)
    _log_resolved("eval", {"checkpoint": str(args.checkpoint), "data": str(args.data), "eval": asdict(section)})
    model = _load_checked(args.checkpoint, args.data)
    corpus = load_split(args.data, section.split).filter_length(section.min_len, section.max_len)
    if len(corpus) == 0:
        raise ConfigError("length filter left no sentences to evaluate")
    results = sweep(corpus, model, grid, batch_size=section.batch_size)
    refs = [e.target[:-1].tolist() for e in corpus]
    aligns = [e.alignment for e in corpus]
    has_align = any(a is not None for a in aligns)
    points = build_curve(results, refs, [e.M for e in corpus], aligns if has_align else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(points, out)
    traces = Path(args.traces) if args.traces else out.with_suffix(".traces.jsonl")
    sv, tv = corpus.src_vocab, corpus.tgt_vocab
    with open(traces, "w") as fh:
        for res in results:
            for n, (e, t) in enumerate(zip(corpus, res.traces)):
                rec = {"policy": res.policy.label, "sentence": n}
                rec.update(trace_record(sv.decode(e.source), tv.decode(t.hypothesis), t))
                fh.write(json.dumps(rec) + "\n")
    for p in points:
        log.info("%s AL=%.3f BLEU=%.2f SA=%s", p.policy, p.AL, p.BLEU, "-" if p.SA is None else f"{p.SA:.3f}")
    return 0


def cmd_analyze(args, cfg: dict) -> int:
    from simtlab.analysis import confidence_scatter, scatter_report, write_scatter_csv
    from simtlab.data import load_split

    values = dict(cfg.get("analyze", {}))
    if args.split is not None:
        values["split"] = args.split
    section = _section(AnalyzeSection, values, "analyze")
    _log_resolved("analyze", {"checkpoint": str(args.checkpoint), "data": str(args.data),
                              "analyze": asdict(section)})
    model = _load_checked(args.checkpoint, args.data)
    corpus = load_split(args.data, section.split)
    if section.max_sentences is not None:
        corpus = corpus.subset(range(min(section.max_sentences, len(corpus))))
    rows = confidence_scatter(model, corpus)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scatter_csv(rows, out)
    report = scatter_report(rows)
    out.with_suffix(".json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_audit(args, cfg: dict) -> int:
    from simtlab.oracle import coverage_audit

    report = coverage_audit(args.log, parse_band(args.prohibition))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    summary = {k: v for k, v in report.to_dict().items() if k not in ("histogram", "violations")}
    print(json.dumps(summary, sort_keys=True))
    if not report.ok:
        raise _AuditFailed(f"{len(report.violations)} out-of-band trained states")
    return 0


class _AuditFailed(SimtError):
    pass


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="simtlab", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        return p

    p = common(sub.add_parser("gen-data", help="write the synthetic corpus"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--mode", choices=("sm2", "waitk", "multipath_waitk", "omt_only"))
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--prohibition", metavar="K1:K2")
    p.add_argument("--init", metavar="CKPT", help="start from an existing checkpoint")
    p.add_argument("--k", type=int, help="wait-k lag (waitk mode)")
    p.add_argument("--steps", type=int, help="override train.max_steps")
    p.add_argument("--encoder", choices=("bidirectional", "unidirectional"))
    p.add_argument("--log", help="step log path (default <out>.log.jsonl)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="decode under a policy grid"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--policy", metavar="conf:<g,...>|waitk:<k,...>")
    p.add_argument("--min-len", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True, help="curve CSV")
    p.add_argument("--traces", help="trace dump path (default <out>.traces.jsonl)")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("analyze", help="teacher-forced confidence correlation"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True, help="scatter CSV")
    p.set_defaults(func=cmd_analyze)

    p = common(sub.add_parser("audit", help="prefix coverage and prohibition audit of a training log"))
    p.add_argument("--log", required=True)
    p.add_argument("--prohibition", metavar="K1:K2")
    p.add_argument("--out", help="full JSON report")
    p.set_defaults(func=cmd_audit)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    record = {"error": type(exc).__name__, "exit": code, "message": str(exc)}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except ConfigError as exc:
        return _fail(exc, 1)
    except (SimtError, OSError) as exc:
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
