"""Small encoder-decoder transformer with prefix-masked attention and a
confidence head.

One parameter set serves both settings: the simultaneous pass sees only the
received source prefix, the offline pass sees the whole source.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from simtlab import tensor as T
from simtlab.errors import ConfigError, ContractViolation
from simtlab.tensor import Tensor

ENCODER_MODES = ("unidirectional", "bidirectional")
NEG_INF = -1e9


@dataclass
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn: int = 128
    dropout: float = 0.1
    encoder_mode: str = "bidirectional"
    max_positions: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        dims = (self.src_vocab, self.tgt_vocab, self.d_model, self.heads, self.enc_layers,
                self.dec_layers, self.ffn, self.max_positions)
        if any(int(v) <= 0 for v in dims):
            raise ConfigError(f"model dimensions must be positive: {asdict(self)}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.encoder_mode not in ENCODER_MODES:
            raise ConfigError(f"encoder_mode must be one of {ENCODER_MODES}, got {self.encoder_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class DualForwardOutput(NamedTuple):
    p_simt: Tensor       # (..., N, V) prefix-conditioned distributions
    p_omt: Tensor        # (..., N, V) full-source distributions
    conf: Tensor         # (..., N) confidences in (0, 1)
    hidden_simt: Tensor  # (..., N, d_model)


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


class Transformer:
    """Pre-norm encoder-decoder. ``params`` is an ordered name -> Tensor map."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d, f = config.d_model, config.ffn
        self._add("src_embed", rng.normal(0, d ** -0.5, (config.src_vocab, d)))
        self._add("tgt_embed", rng.normal(0, d ** -0.5, (config.tgt_vocab, d)))
        for l in range(config.enc_layers):
            self._attention_params(f"enc.{l}.self", rng)
            self._ffn_params(f"enc.{l}", rng)
            self._norm_params(f"enc.{l}.ln_attn")
            self._norm_params(f"enc.{l}.ln_ffn")
        self._norm_params("enc.ln_out")
        for l in range(config.dec_layers):
            self._attention_params(f"dec.{l}.self", rng)
            self._attention_params(f"dec.{l}.cross", rng)
            self._ffn_params(f"dec.{l}", rng)
            self._norm_params(f"dec.{l}.ln_self")
            self._norm_params(f"dec.{l}.ln_cross")
            self._norm_params(f"dec.{l}.ln_ffn")
        self._norm_params("dec.ln_out")
        self._add("out.w", _xavier(rng, d, config.tgt_vocab))
        self._add("out.b", np.zeros(config.tgt_vocab))
        self._add("conf.w", np.zeros((d, 1)))
        self._add("conf.b", np.zeros(1))
        self._pos = sinusoid_table(config.max_positions, d).astype(self.dtype)

    # -- parameter construction -------------------------------------------
    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def _attention_params(self, prefix, rng):
        d = self.config.d_model
        for proj in ("q", "k", "v", "o"):
            self._add(f"{prefix}.w{proj}", _xavier(rng, d, d))
            self._add(f"{prefix}.b{proj}", np.zeros(d))

    def _ffn_params(self, prefix, rng):
        d, f = self.config.d_model, self.config.ffn
        self._add(f"{prefix}.ffn.w1", _xavier(rng, d, f))
        self._add(f"{prefix}.ffn.b1", np.zeros(f))
        self._add(f"{prefix}.ffn.w2", _xavier(rng, f, d))
        self._add(f"{prefix}.ffn.b2", np.zeros(d))

    def _norm_params(self, prefix):
        d = self.config.d_model
        self._add(f"{prefix}.g", np.ones(d))
        self._add(f"{prefix}.b", np.zeros(d))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def reset_confidence_head(self) -> None:
        self.params["conf.w"].data[...] = 0
        self.params["conf.b"].data[...] = 0

    def astype(self, dtype) -> "Transformer":
        """Copy of this model with every parameter cast to ``dtype``."""
        other = Transformer.__new__(Transformer)
        other.config = self.config
        other.dtype = np.dtype(dtype)
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        other._pos = self._pos.astype(dtype)
        return other

    def copy(self) -> "Transformer":
        return self.astype(self.dtype)

    # -- building blocks ---------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _linear(self, x, prefix, w="w", b="b"):
        return T.bias_add(T.matmul(x, self._p(f"{prefix}.{w}")), self._p(f"{prefix}.{b}"))

    def _norm(self, x, prefix):
        return T.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"))

    def _split_heads(self, x, transpose_keys=False):
        B, L, d = x.shape
        H = self.config.heads
        x = T.reshape(x, (B, L, H, d // H))
        return T.transpose(x, (0, 2, 3, 1) if transpose_keys else (0, 2, 1, 3))

    def _attention(self, prefix, xq, xkv, mask, training, rng):
        B, Lq, d = xq.shape
        dh = d // self.config.heads
        q = self._split_heads(self._linear(xq, prefix, "wq", "bq"))
        k = self._split_heads(self._linear(xkv, prefix, "wk", "bk"), transpose_keys=True)
        v = self._split_heads(self._linear(xkv, prefix, "wv", "bv"))
        scores = T.apply("scale", [T.matmul(q, k)], factor=1.0 / math.sqrt(dh))
        scores = T.masked_fill(scores, ~mask, NEG_INF)
        attn = T.dropout(T.softmax(scores), self.config.dropout, training, rng)
        ctx = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        ctx = T.reshape(ctx, (B, Lq, d))
        return self._linear(ctx, prefix, "wo", "bo")

    def _ffn(self, x, prefix, training, rng):
        h = T.relu(self._linear(x, f"{prefix}.ffn", "w1", "b1"))
        h = T.dropout(h, self.config.dropout, training, rng)
        return self._linear(h, f"{prefix}.ffn", "w2", "b2")

    def _embed(self, table, ids, training, rng):
        B, L = ids.shape
        if L > self.config.max_positions:
            raise ContractViolation(f"sequence length {L} exceeds max_positions {self.config.max_positions}")
        x = T.apply("scale", [T.embedding(self._p(table), ids)], factor=math.sqrt(self.config.d_model))
        pos = Tensor(np.broadcast_to(self._pos[:L], (B, L, self.config.d_model)).copy())
        return T.dropout(x + pos, self.config.dropout, training, rng)

    # -- public API --------------------------------------------------------
    def encode(self, src, lengths=None, mode=None, training=False, rng=None) -> Tensor:
        """Encode source ids.

        ``src`` is ``(S,)`` or ``(B, S)``. ``lengths`` (per row) marks how many
        leading tokens are visible; later positions are masked out as keys, so
        what sits there can never influence visible positions. Without
        ``lengths`` the full rows are visible.
        """
        src = np.asarray(src)
        single = src.ndim == 1
        if single:
            src = src[None]
        B, S = src.shape
        if S == 0:
            raise ContractViolation("encode: empty source")
        self._check_ids(src, self.config.src_vocab, "source")
        lengths = np.full(B, S) if lengths is None else np.asarray(lengths)
        if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > S:
            raise ContractViolation(f"encode: prefix lengths {lengths} invalid for source width {S}")
        mode = mode or self.config.encoder_mode
        key_ok = np.arange(S)[None, :] < lengths[:, None]
        mask = key_ok[:, None, None, :]
        if mode == "unidirectional":
            mask = mask & np.tril(np.ones((S, S), dtype=bool))[None, None]
        elif mode != "bidirectional":
            raise ContractViolation(f"encode: unknown mode {mode!r}")
        x = self._embed("src_embed", src, training, rng)
        for l in range(self.config.enc_layers):
            h = self._norm(x, f"enc.{l}.ln_attn")
            x = x + T.dropout(self._attention(f"enc.{l}.self", h, h, mask, training, rng),
                              self.config.dropout, training, rng)
            h = self._norm(x, f"enc.{l}.ln_ffn")
            x = x + T.dropout(self._ffn(h, f"enc.{l}", training, rng), self.config.dropout, training, rng)
        x = self._norm(x, "enc.ln_out")
        return T.reshape(x, x.shape[1:]) if single else x

    def decode(self, enc: Tensor, tgt_in, src_lengths=None, cross_mask=None, training=False, rng=None):
        """Run the decoder over ``tgt_in`` (BOS-shifted ids, ``(B, T)``).

        Cross-attention sees encoder positions ``< src_lengths`` per row, or
        the explicit boolean ``cross_mask`` of shape ``(B, T, S)``.
        Returns ``(hidden, logits)``.
        """
        tgt_in = np.asarray(tgt_in)
        B, L = tgt_in.shape
        if L == 0:
            raise ContractViolation("decode: empty target")
        self._check_ids(tgt_in, self.config.tgt_vocab, "target")
        S = enc.shape[1]
        if cross_mask is None:
            lengths = np.full(B, S) if src_lengths is None else np.asarray(src_lengths)
            cross = (np.arange(S)[None, :] < lengths[:, None])[:, None, None, :]
        else:
            cross = np.asarray(cross_mask)[:, None]
        causal = np.tril(np.ones((L, L), dtype=bool))[None, None]
        x = self._embed("tgt_embed", tgt_in, training, rng)
        drop = self.config.dropout
        for l in range(self.config.dec_layers):
            h = self._norm(x, f"dec.{l}.ln_self")
            x = x + T.dropout(self._attention(f"dec.{l}.self", h, h, causal, training, rng), drop, training, rng)
            h = self._norm(x, f"dec.{l}.ln_cross")
            x = x + T.dropout(self._attention(f"dec.{l}.cross", h, enc, cross, training, rng), drop, training, rng)
            h = self._norm(x, f"dec.{l}.ln_ffn")
            x = x + T.dropout(self._ffn(h, f"dec.{l}", training, rng), drop, training, rng)
        hidden = self._norm(x, "dec.ln_out")
        logits = self._linear(hidden, "out")
        return hidden, logits

    def confidence_head(self, hidden: Tensor) -> Tensor:
        """c = sigmoid(W^T h + b) for every position of ``hidden`` (..., d)."""
        if hidden.shape[-1] != self.config.d_model:
            raise ContractViolation(f"confidence_head: hidden width {hidden.shape[-1]} != {self.config.d_model}")
        z = self._linear(hidden, "conf")
        c = T.sigmoid(T.reshape(z, z.shape[:-1]))
        # a saturated sigmoid rounds to exactly 0 or 1; keep c strictly inside the interval
        info = np.finfo(c.dtype)
        return T.clip(c, info.tiny, 1.0 - info.epsneg)

    def decode_teacher_forced(self, enc_states: Tensor, targets):
        """Single-example teacher forcing: ``targets`` is y_1..y_N (EOS last).

        Returns ``(hidden (N, d), dists (N, V))`` where row i is
        p(. | visible source, y_<i).
        """
        targets = np.asarray(targets)
        if targets.size == 0:
            raise ContractViolation("decode_teacher_forced: empty target")
        tgt_in = shift_right(targets)[None]
        enc = T.reshape(enc_states, (1,) + enc_states.shape)
        hidden, logits = self.decode(enc, tgt_in)
        N = targets.shape[0]
        return T.reshape(hidden, (N, -1)), T.reshape(T.softmax(logits), (N, -1))

    def dual_forward(self, example, j: int) -> DualForwardOutput:
        """Prefix (x_<=j) and full-source predictions for one example."""
        src = np.asarray(example.source)
        M = len(src)
        if not 1 <= j <= M:
            raise ContractViolation(f"dual_forward: j={j} outside [1, {M}]")
        h_simt, p_simt = self.decode_teacher_forced(self.encode(src[:j]), example.target)
        _, p_omt = self.decode_teacher_forced(self.encode(src), example.target)
        return DualForwardOutput(p_simt, p_omt, self.confidence_head(h_simt), h_simt)

    def dual_forward_batch(self, src, src_len, tgt_in, j, training=False, rng=None,
                           cross_mask=None) -> DualForwardOutput:
        """Batched dual forward; both settings share one stacked pass.

        ``j`` gives each row's received prefix length. When ``cross_mask``
        (B, T, S) is passed it replaces the prefix mask of the simultaneous
        pass (used by the wait-k objectives).
        """
        src = np.asarray(src)
        B, S = src.shape
        tgt_in = np.asarray(tgt_in)
        both_src = np.concatenate([src, src])
        both_len = np.concatenate([np.asarray(j), np.asarray(src_len)])
        enc = self.encode(both_src, both_len, training=training, rng=rng)
        both_tgt = np.concatenate([tgt_in, tgt_in])
        if cross_mask is not None:
            full = np.arange(S)[None, None, :] < np.asarray(src_len)[:, None, None]
            full = np.broadcast_to(full, cross_mask.shape)
            hidden, logits = self.decode(enc, both_tgt, cross_mask=np.concatenate([cross_mask, full]),
                                         training=training, rng=rng)
        else:
            hidden, logits = self.decode(enc, both_tgt, both_len, training=training, rng=rng)
        probs = T.softmax(logits)
        h_simt = T.take(hidden, slice(0, B))
        return DualForwardOutput(T.take(probs, slice(0, B)), T.take(probs, slice(B, 2 * B)),
                                 self.confidence_head(h_simt), h_simt)

    @staticmethod
    def _check_ids(ids, vocab, side):
        if ids.dtype.kind not in "iu":
            raise ContractViolation(f"{side} ids must be integers, got {ids.dtype}")
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ContractViolation(f"{side} id out of range for vocabulary of size {vocab}")


def shift_right(targets, bos: int = 2) -> np.ndarray:
    """Decoder inputs BOS, y_1 .. y_{N-1} for targets y_1 .. y_N."""
    targets = np.asarray(targets)
    out = np.empty_like(targets)
    out[..., 0] = bos
    out[..., 1:] = targets[..., :-1]
    return out


class IncrementalEncoder:
    """Causal encoder state that grows one source token at a time.

    Only valid for the unidirectional mode: each layer keeps the key/value
    projections of all positions so far, and a new token only computes its
    own column. Dropout is never applied.
    """

    def __init__(self, model: Transformer):
        self.model = model
        self.keys: list[list[np.ndarray]] = [[] for _ in range(model.config.enc_layers)]
        self.values: list[list[np.ndarray]] = [[] for _ in range(model.config.enc_layers)]
        self.states: list[np.ndarray] = []

    def __len__(self):
        return len(self.states)

    def extend(self, token: int) -> np.ndarray:
        m = self.model
        cfg = m.config
        t = len(self.states)
        if t >= cfg.max_positions:
            raise ContractViolation("incremental encoder exceeded max_positions")
        Transformer._check_ids(np.asarray([token]), cfg.src_vocab, "source")
        P = {k: v.data for k, v in m.params.items()}
        d, H = cfg.d_model, cfg.heads
        dh = d // H

        def ln(x, prefix):
            mu = x.mean(-1, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(-1, keepdims=True)
            return xc * (1.0 / np.sqrt(var + x.dtype.type(1e-5))) * P[f"{prefix}.g"] + P[f"{prefix}.b"]

        x = P["src_embed"][token][None] * m.dtype.type(math.sqrt(d)) + m._pos[t][None]
        for l in range(cfg.enc_layers):
            pre = f"enc.{l}.self"
            h = ln(x, f"enc.{l}.ln_attn")
            q = (h @ P[f"{pre}.wq"] + P[f"{pre}.bq"]).reshape(H, dh)
            self.keys[l].append((h @ P[f"{pre}.wk"] + P[f"{pre}.bk"]).reshape(H, dh))
            self.values[l].append((h @ P[f"{pre}.wv"] + P[f"{pre}.bv"]).reshape(H, dh))
            K = np.stack(self.keys[l], axis=1)    # (H, t+1, dh)
            V = np.stack(self.values[l], axis=1)
            s = np.einsum("hd,htd->ht", q, K) * m.dtype.type(1.0 / math.sqrt(dh))
            s = np.exp(s - s.max(-1, keepdims=True))
            a = s / s.sum(-1, keepdims=True)
            ctx = np.einsum("ht,htd->hd", a, V).reshape(1, d)
            x = x + (ctx @ P[f"{pre}.wo"] + P[f"{pre}.bo"])
            h = ln(x, f"enc.{l}.ln_ffn")
            f = np.maximum(h @ P[f"enc.{l}.ffn.w1"] + P[f"enc.{l}.ffn.b1"], 0)
            x = x + (f @ P[f"enc.{l}.ffn.w2"] + P[f"enc.{l}.ffn.b2"])
        out = ln(x, "enc.ln_out")[0]
        self.states.append(out)
        return out

    def array(self) -> np.ndarray:
        return np.stack(self.states)

