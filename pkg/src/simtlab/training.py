"""Training objectives and loop.

Modes:

* ``sm2``: sample a source prefix length per sentence, mix the prefix and
  full-source probabilities of each gold token by the predicted confidence,
  and optimise ``L_omt + L_Sj + lambda * L_Cj``.
* ``waitk`` / ``multipath_waitk``: cross-entropy under the fixed wait-k
  prefix schedule (k fixed, or resampled per sentence).
* ``omt_only``: plain full-source cross-entropy.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from simtlab import tensor as T
from simtlab.data import Batch, Corpus, make_batches
from simtlab.errors import ConfigError, ContractViolation, NumericError
from simtlab.model import Transformer, shift_right
from simtlab.tensor import Tensor

MODES = ("sm2", "waitk", "multipath_waitk", "omt_only")
LOG_FLOOR = 1e-9

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "sm2"
    lam: float = 0.1
    k: int | None = None                      # waitk mode only
    lr: float = 3e-3
    warmup_steps: int = 200
    warmup_init_lr: float = 1e-7
    betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 0.0                    # 0 disables clipping
    max_tokens: int = 2048
    max_steps: int = 3000
    seed: int = 1
    disable_omt_loss: bool = False
    one_hot_modification: bool = False
    prohibition: tuple[int, int] | None = None
    label_smoothing: float = 0.0
    shared_j: bool = False
    valid_every: int = 500

    def __post_init__(self):
        if isinstance(self.prohibition, list):
            self.prohibition = tuple(self.prohibition)
        if isinstance(self.betas, list):
            self.betas = tuple(self.betas)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "sm2" and not self.lam > 0:
            raise ConfigError(f"lambda must be positive in sm2 mode, got {self.lam}")
        if self.mode == "waitk" and (self.k is None or self.k < 1):
            raise ConfigError("waitk mode needs k >= 1")
        if self.prohibition is not None:
            k1, k2 = self.prohibition
            if not 1 <= k1 < k2:
                raise ConfigError(f"prohibition band needs 1 <= k1 < k2, got {self.prohibition}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.max_steps < 0 or self.lr <= 0 or self.max_tokens < 1:
            raise ConfigError("max_steps, lr and max_tokens must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# prefix sampling and state masks
# ---------------------------------------------------------------------------

def sample_prefix(M: int, rng: np.random.Generator, prohibition=None, N: int | None = None) -> int:
    """Draw the received-prefix length j ~ U{1..M}.

    The prohibition band does not bias the draw: it is enforced per target
    position by :func:`band_mask`, so the arguments are accepted only to keep
    one call signature for both regimes.
    """
    if M < 1:
        raise ContractViolation(f"sample_prefix: M must be >= 1, got {M}")
    return int(rng.integers(1, M + 1))


def band_mask(j: int, M: int, N: int, band) -> np.ndarray:
    """Positions i (1-based, as a length-N bool array) trainable at prefix j.

    i is allowed iff min(k1+i-1, M) <= j <= min(k2+i-1, M).
    """
    i = np.arange(1, N + 1)
    if band is None:
        return np.ones(N, dtype=bool)
    k1, k2 = band
    lo = np.minimum(k1 + i - 1, M)
    hi = np.minimum(k2 + i - 1, M)
    return (lo <= j) & (j <= hi)


def waitk_read_counts(k: int, M: int, N: int) -> np.ndarray:
    """g_i = min(k + i - 1, M) for i = 1..N."""
    return np.minimum(k + np.arange(N), M)


def mask_spans(mask: np.ndarray) -> list[list[int]]:
    """Compress a bool position mask into 1-based inclusive [lo, hi] runs."""
    spans, start = [], None
    for i, on in enumerate(mask.tolist(), start=1):
        if on and start is None:
            start = i
        if not on and start is not None:
            spans.append([start, i - 1])
            start = None
    if start is not None:
        spans.append([start, len(mask)])
    return spans


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

class SM2Losses(NamedTuple):
    L_omt: Tensor
    L_Sj: Tensor
    L_Cj: Tensor
    L_total: Tensor
    p_mod: Tensor


def _masked_sum(x: Tensor, mask: np.ndarray | None, n_rows: int) -> Tensor:
    if mask is not None:
        x = T.apply("mul", [x, Tensor(mask.astype(x.dtype))])
    total = T.tsum(x)
    return total if n_rows == 1 else T.apply("scale", [total], factor=1.0 / n_rows)


def modify(conf: Tensor, p_prefix: Tensor, hint: Tensor) -> Tensor:
    """c * p_prefix + (1 - c) * hint, written so c = 1 and c = 0 reproduce an input exactly."""
    one_minus_c = T.apply("add_scalar", [T.apply("scale", [conf], factor=-1.0)], value=1.0)
    return T.apply("add", [T.apply("mul", [conf, p_prefix]), T.apply("mul", [one_minus_c, hint])])


def sm2_losses(p_simt: Tensor, p_omt: Tensor, conf: Tensor, targets, lam: float,
               pad_mask=None, disable_omt_loss: bool = False, one_hot_modification: bool = False,
               state_mask=None, label_smoothing: float = 0.0) -> SM2Losses:
    """Self-modifying losses for distributions ``(..., N, V)`` and gold ``targets (..., N)``.

    ``pad_mask`` marks real positions; ``state_mask`` further restricts which
    positions enter ``L_Sj``/``L_Cj`` (prohibition band). Sums run over
    positions; with a leading batch axis they are averaged over sentences.
    """
    targets = np.asarray(targets)
    if p_simt.shape != p_omt.shape or p_simt.shape[:-1] != conf.shape or conf.shape != targets.shape:
        raise ContractViolation(f"sm2_losses: shapes p_simt {p_simt.shape}, p_omt {p_omt.shape}, "
                                f"conf {conf.shape}, targets {targets.shape} disagree")
    c = conf.data
    live = np.ones(c.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if np.any((c[live] <= 0) | (c[live] >= 1)):
        raise ContractViolation("sm2_losses: confidence outside the open interval (0, 1)")
    n_rows = 1 if targets.ndim == 1 else int(np.prod(targets.shape[:-1]))

    ps = T.take_last(p_simt, targets)
    po = T.take_last(p_omt, targets)
    hint = Tensor(np.ones(ps.shape, dtype=ps.dtype)) if one_hot_modification else po
    p_mod = modify(conf, ps, hint)
    if np.any(p_mod.data[live] <= 0):
        raise NumericError("sm2_losses: modified probability is not positive")

    state = live if state_mask is None else live & np.asarray(state_mask, dtype=bool)
    L_S = _masked_sum(T.apply("scale", [T.log(p_mod, floor=LOG_FLOOR)], factor=-1.0), state, n_rows)
    L_C = _masked_sum(T.apply("scale", [T.log(conf, floor=LOG_FLOOR)], factor=-1.0), state, n_rows)
    L_omt = _masked_sum(_nll(p_omt, po, label_smoothing), live, n_rows)
    total = T.apply("add", [L_S, T.apply("scale", [L_C], factor=lam)])
    if not disable_omt_loss:
        total = T.apply("add", [L_omt, total])
    return SM2Losses(L_omt, L_S, L_C, total, p_mod)


def _nll(dists: Tensor, p_gold: Tensor, label_smoothing: float) -> Tensor:
    nll = T.apply("scale", [T.log(p_gold, floor=LOG_FLOOR)], factor=-1.0)
    if not label_smoothing:
        return nll
    smooth = T.apply("scale", [T.mean(T.log(dists, floor=LOG_FLOOR), axis=-1)], factor=-1.0)
    return T.apply("add", [T.apply("scale", [nll], factor=1.0 - label_smoothing),
                           T.apply("scale", [smooth], factor=label_smoothing)])


def cross_entropy(dists: Tensor, targets, pad_mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Summed NLL of gold tokens, averaged over leading rows like sm2_losses."""
    targets = np.asarray(targets)
    n_rows = 1 if targets.ndim == 1 else int(np.prod(targets.shape[:-1]))
    return _masked_sum(_nll(dists, T.take_last(dists, targets), label_smoothing), pad_mask, n_rows)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------

def inverse_sqrt_lr(step: int, cfg: TrainConfig) -> float:
    if step < cfg.warmup_steps:
        return cfg.warmup_init_lr + (cfg.lr - cfg.warmup_init_lr) * step / cfg.warmup_steps
    return cfg.lr * math.sqrt(cfg.warmup_steps / max(step, 1))


@dataclass
class StepMetrics:
    step: int
    mode: str
    j: list[int]
    M: list[int]
    N: list[int]
    L_omt: float
    L_Sj: float
    L_Cj: float
    L_total: float
    grad_norm: float
    wall_ms: float
    lr: float
    k: list[int] | None = None
    trained: list[list[list[int]]] | None = None
    prohibition: list[int] | None = None

    def record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


class Trainer:
    """Owns a model, its Adam state and the step counter."""

    def __init__(self, model: Transformer, config: TrainConfig, log_path=None, opt_state=None):
        self.model = model
        self.config = config
        if config.mode in ("waitk", "multipath_waitk") and model.config.encoder_mode != "unidirectional":
            raise ConfigError("wait-k objectives need a unidirectional encoder")
        self.params = model.parameters()
        self.opt = opt_state or T.AdamState(self.params)
        self.log_path = Path(log_path) if log_path else None
        self._log_file = None
        self.history: list[dict] = []

    @property
    def step(self) -> int:
        return self.opt.step

    # -- loss for one batch ------------------------------------------------
    def batch_loss(self, batch: Batch, rng: np.random.Generator, training: bool = True):
        cfg = self.config
        model = self.model
        M, N = batch.src_len, batch.tgt_len
        tgt_in = shift_right(batch.tgt)
        pad = batch.tgt_mask
        info: dict = {"j": [], "k": None, "trained": None}
        zero = Tensor(np.zeros((), dtype=model.dtype))

        if cfg.mode == "omt_only":
            enc = model.encode(batch.src, M, training=training, rng=rng)
            _, logits = model.decode(enc, tgt_in, M, training=training, rng=rng)
            L_omt = cross_entropy(T.softmax(logits), batch.tgt, pad, cfg.label_smoothing)
            info["j"] = M.tolist()
            return L_omt, (L_omt, zero, zero), info

        if cfg.mode in ("waitk", "multipath_waitk"):
            if cfg.mode == "waitk":
                ks = np.full(batch.size, cfg.k)
            else:
                ks = np.array([rng.integers(1, m + 1) for m in M])
            S, Tn = batch.src.shape[1], batch.tgt.shape[1]
            g = np.minimum(ks[:, None] + np.arange(Tn)[None], M[:, None])     # (B, T)
            cross = np.arange(S)[None, None, :] < g[:, :, None]
            enc = model.encode(batch.src, M, training=training, rng=rng)
            _, logits = model.decode(enc, tgt_in, cross_mask=cross, training=training, rng=rng)
            L = cross_entropy(T.softmax(logits), batch.tgt, pad, cfg.label_smoothing)
            info["k"] = ks.tolist()
            return L, (zero, L, zero), info

        if cfg.shared_j:
            j0 = sample_prefix(int(M.min()), rng)
            js = np.full(batch.size, j0)
        else:
            js = np.array([sample_prefix(int(m), rng) for m in M])
        state = None
        if cfg.prohibition is not None:
            state = np.zeros_like(pad)
            spans = []
            for b in range(batch.size):
                allowed = band_mask(int(js[b]), int(M[b]), int(N[b]), cfg.prohibition)
                state[b, :N[b]] = allowed
                spans.append(mask_spans(allowed))
            info["trained"] = spans
        out = model.dual_forward_batch(batch.src, M, tgt_in, js, training=training, rng=rng)
        losses = sm2_losses(out.p_simt, out.p_omt, out.conf, batch.tgt, cfg.lam, pad,
                            cfg.disable_omt_loss, cfg.one_hot_modification, state, cfg.label_smoothing)
        info["j"] = js.tolist()
        return losses.L_total, (losses.L_omt, losses.L_Sj, losses.L_Cj), info

    def train_step(self, batch: Batch, rng: np.random.Generator) -> StepMetrics:
        t0 = time.perf_counter()
        cfg = self.config
        for p in self.params:
            p.grad = None
        try:
            loss, parts, info = self.batch_loss(batch, rng, training=True)
        except NumericError as exc:
            raise NumericError(f"step {self.step + 1}: {exc}") from exc
        if not np.isfinite(loss.data):
            raise NumericError(f"step {self.step + 1}: non-finite loss {loss.item()}")
        T.backward(loss, self.params)
        grads = [p.grad for p in self.params]
        norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        if not math.isfinite(norm):
            raise NumericError(f"step {self.step + 1}: non-finite gradient norm")
        if cfg.clip_norm and norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
            grads = [g * g.dtype.type(scale) for g in grads]
        lr = inverse_sqrt_lr(self.step + 1, cfg)
        T.adam_update(self.params, grads, self.opt, lr, cfg.betas[0], cfg.betas[1], cfg.adam_eps,
                      cfg.weight_decay)
        metrics = StepMetrics(
            step=self.step, mode=cfg.mode, j=info["j"], M=batch.src_len.tolist(),
            N=batch.tgt_len.tolist(), L_omt=parts[0].item(), L_Sj=parts[1].item(),
            L_Cj=parts[2].item(), L_total=loss.item(), grad_norm=norm,
            wall_ms=(time.perf_counter() - t0) * 1000.0, lr=lr, k=info["k"], trained=info["trained"],
            prohibition=list(cfg.prohibition) if cfg.prohibition else None)
        self._emit(metrics.record())
        return metrics

    def validation_loss(self, batches: list[Batch], seed: int = 12345) -> float:
        """Mean total loss with dropout off and a fixed prefix-sampling seed."""
        rng = np.random.default_rng(seed)
        total, count = 0.0, 0
        for b in batches:
            loss, _, _ = self.batch_loss(b, rng, training=False)
            total += loss.item() * b.size
            count += b.size
        return total / max(count, 1)

    def fit(self, train: Corpus, valid: Corpus | None = None, on_best=None) -> dict:
        """Train to ``max_steps``; keeps (and returns) the best-validation weights."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 7])
        max_pos = self.model.config.max_positions
        valid_batches = make_batches(valid, cfg.max_tokens, 0, max_pos) if valid is not None else []
        best = {"loss": math.inf, "step": 0, "params": None}
        epoch = 0
        while self.step < cfg.max_steps:
            for batch in make_batches(train, cfg.max_tokens, cfg.seed * 1000 + epoch, max_pos):
                if self.step >= cfg.max_steps:
                    break
                self.train_step(batch, rng)
                if valid_batches and (self.step % cfg.valid_every == 0 or self.step == cfg.max_steps):
                    vl = self.validation_loss(valid_batches)
                    self._emit({"step": self.step, "valid_loss": vl})
                    log.info("step %d valid loss %.4f", self.step, vl)
                    if vl < best["loss"]:
                        best = {"loss": vl, "step": self.step,
                                "params": {k: v.data.copy() for k, v in self.model.params.items()}}
                        if on_best is not None:
                            on_best(self)
            epoch += 1
            if cfg.max_steps == 0:
                break
        if best["params"] is not None:
            for k, v in best["params"].items():
                self.model.params[k].data[...] = v
        self.close()
        return {"best_valid_loss": best["loss"], "best_step": best["step"], "steps": self.step}

    def _emit(self, record: dict) -> None:
        if len(self.history) < 100000:
            self.history.append(record)
        if self.log_path is None:
            return
        if self._log_file is None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self._log_file = open(self.log_path, "a")
        self._log_file.write(json.dumps(record) + "\n")

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


def train(model: Transformer, config: TrainConfig, train_corpus: Corpus, valid_corpus: Corpus | None = None,
          log_path=None) -> tuple[Transformer, Trainer, dict]:
    trainer = Trainer(model, config, log_path)
    summary = trainer.fit(train_corpus, valid_corpus)
    return model, trainer, summary


def finetune_from_omt(checkpoint, config: TrainConfig, train_corpus: Corpus,
                      valid_corpus: Corpus | None = None, log_path=None):
    """Continue an offline checkpoint in sm2 mode with a fresh confidence head."""
    from simtlab.persistence import load

    if config.mode != "sm2":
        config = replace(config, mode="sm2")
    model, _, _ = load(checkpoint)
    model.reset_confidence_head()
    return train(model, config, train_corpus, valid_corpus, log_path)
