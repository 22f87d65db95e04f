"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable computation in the package goes through :func:`apply`,
which looks up an op kind in :data:`OPS`, runs its forward rule on numpy
arrays and, when any input requires a gradient, records a graph node holding
the matching backward rule.

Op-kind table (shapes use ``...`` for an arbitrary but *identical* prefix):

==============  =========================================  ===========================
kind            inputs                                     attrs
==============  =========================================  ===========================
add, sub, mul   a, b with equal shapes, or either shape ()
scale           x                                          factor
add_scalar      x                                          value
matmul          (..., n, k) x (..., k, m), or              .
                (..., k) x (k, m)  (weight form)
bias_add        (..., d) + (d,)
softmax         x, normalised over the last axis
log_softmax     x, last axis
log             x                                          floor (optional clamp)
exp, sigmoid,   x
relu
clip            x                                          lo, hi
layer_norm      x (..., d), gain (d,), bias (d,)           eps
embedding       table (V, d)                               ids (int array)
take_last       x (..., V)                                 idx (int array, shape ...)
concat          xs                                         axis
masked_fill     x                                          mask (bool, broadcastable), value
sum, mean       x                                          axis (None = all), keepdims
reshape         x                                          shape
slice           x                                          index (basic numpy index)
transpose       x                                          axes
dropout         x                                          p, training, rng
==============  =========================================  ===========================

There is no implicit broadcasting beyond scalar-with-tensor; ``bias_add`` and
the weight form of ``matmul`` are the two explicit exceptions, and the
boolean mask of ``masked_fill`` (a constant, never differentiated) may
broadcast against ``x``.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from simtlab.errors import ContractViolation, NumericError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional float array that can take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return apply("add_scalar", [self], value=other)
        return apply("add", [self, other])

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return apply("add_scalar", [self], value=-other)
        return apply("sub", [self, other])

    def __rsub__(self, other):
        return apply("add_scalar", [apply("scale", [self], factor=-1.0)], value=other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply("scale", [self], factor=other)
        return apply("mul", [self, other])

    __rmul__ = __mul__

    def __neg__(self):
        return apply("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return apply("matmul", [self, other])


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# forward/backward rules; each returns (output array, backward(g) -> grads)
# ---------------------------------------------------------------------------

def _shape_error(kind, *arrays, detail=""):
    shapes = ", ".join(str(a.shape) for a in arrays)
    msg = f"{kind}: incompatible shapes {shapes}"
    return ContractViolation(msg + (f" ({detail})" if detail else ""))


def _binary_check(kind, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise _shape_error(kind, a, b)


def _unbroadcast(g, shape):
    return g.sum().reshape(shape) if shape == () and g.shape != () else g


def _add(a, b):
    _binary_check("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _binary_check("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _binary_check("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scale(x, factor):
    f = x.dtype.type(factor)
    return x * f, lambda g: (g * f,)


def _add_scalar(x, value):
    return x + x.dtype.type(value), lambda g: (g,)


def _matmul(a, b):
    if b.ndim == 2 and (a.ndim != b.ndim or a.ndim == 2):
        if a.shape[-1] != b.shape[0]:
            raise _shape_error("matmul", a, b)
        out = a @ b

        def back(g):
            k, m = b.shape
            ga = g @ b.T
            gb = a.reshape(-1, k).T @ g.reshape(-1, m)
            return ga, gb

        return out, back
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a, b)
    out = a @ b
    return out, lambda g: (g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g)


def _bias_add(x, b):
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise _shape_error("bias_add", x, b)
    return x + b, lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _log_softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return y, lambda g: (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


def _log(x, floor=None):
    if floor is None:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x), lambda g: (g / x,)
    keep = x > floor
    xc = np.where(keep, x, x.dtype.type(floor))
    return np.log(xc), lambda g: (np.where(keep, g / xc, 0).astype(x.dtype),)


def _exp(x):
    with np.errstate(over="ignore"):   # apply() reports the overflow
        y = np.exp(x)
    return y, lambda g: (g * y,)


def _sigmoid(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, lambda g: (g * y * (1 - y),)


def _relu(x):
    keep = x > 0
    return x * keep, lambda g: (g * keep,)


def _clip(x, lo, hi):
    inside = (x >= lo) & (x <= hi)
    return np.clip(x, lo, hi), lambda g: (np.where(inside, g, 0).astype(x.dtype),)


def _layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise _shape_error("layer_norm", x, gain, bias)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain + bias

    def back(g):
        gx_hat = g * gain
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return out, back


def _embedding(table, ids):
    ids = np.asarray(ids)
    if table.ndim != 2 or ids.dtype.kind not in "iu":
        raise _shape_error("embedding", table, ids, detail="table must be (V, d), ids integer")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractViolation(f"embedding: id out of range for table of {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return table[ids], back


def _take_last(x, idx):
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise _shape_error("take_last", x, idx)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise ContractViolation("take_last: index out of range")
    sel = idx[..., None]
    out = np.take_along_axis(x, sel, axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, sel, g[..., None], axis=-1)
        return (gx,)

    return out, back


def _concat(*xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise _shape_error("concat", *xs) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _masked_fill(x, mask, value):
    mask = np.asarray(mask)
    if mask.dtype != bool:
        raise ContractViolation(f"masked_fill: mask must be boolean, got {mask.dtype}")
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise _shape_error("masked_fill", x, mask) from None
    out = np.where(full, x.dtype.type(value), x)
    return out, lambda g: (np.where(full, 0, g).astype(x.dtype),)


def _sum(x, axis=None, keepdims=False):
    out = np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return out, back


def _mean(x, axis=None, keepdims=False):
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    out, back_sum = _sum(x, axis, keepdims)
    f = x.dtype.type(1.0 / count)
    return out * f, lambda g: (back_sum(g)[0] * f,)


def _reshape(x, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x, detail=f"target {shape}") from None
    return out, lambda g: (g.reshape(x.shape),)


def _slice(x, index):
    out = x[index]

    def back(g):
        gx = np.zeros_like(x)
        gx[index] = g
        return (gx,)

    return np.array(out, copy=True), back


def _transpose(x, axes):
    inv = np.argsort(axes)
    return np.transpose(x, axes), lambda g: (np.transpose(g, inv),)


def _dropout(x, p=0.0, training=False, rng=None):
    if not training or p <= 0.0:
        return x, lambda g: (g,)
    if rng is None:
        raise ContractViolation("dropout: training mode requires an rng")
    keep = (rng.random(x.shape, dtype=x.dtype) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * keep, lambda g: (g * keep,)


OPS: dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scale": _scale,
    "add_scalar": _add_scalar,
    "matmul": _matmul,
    "bias_add": _bias_add,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "log": _log,
    "exp": _exp,
    "sigmoid": _sigmoid,
    "relu": _relu,
    "clip": _clip,
    "layer_norm": _layer_norm,
    "embedding": _embedding,
    "take_last": _take_last,
    "concat": _concat,
    "masked_fill": _masked_fill,
    "sum": _sum,
    "mean": _mean,
    "reshape": _reshape,
    "transpose": _transpose,
    "slice": _slice,
    "dropout": _dropout,
}


def apply(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run op ``kind`` on ``inputs`` and record it in the graph if needed."""
    try:
        rule = OPS[kind]
    except KeyError:
        raise ContractViolation(f"unknown op kind {kind!r}") from None
    inputs = tuple(as_tensor(t) for t in inputs)
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ContractViolation(f"{kind}: mixed dtypes {sorted(map(str, dtypes))}")
    data, backward_rule = rule(*(t.data for t in inputs), **attrs)
    if not np.isfinite(data).all():
        raise NumericError(f"{kind}: non-finite output (input shapes {[t.shape for t in inputs]})")
    out = Tensor(data, dtype=inputs[0].dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = kind
        out.inputs = inputs
        out._backward = backward_rule
    return out


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves passed explicitly that the loss does not depend on get a zero
    gradient instead of staying ``None``.
    """
    if loss.shape != ():
        raise ContractViolation(f"backward: loss must be a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    if loss.requires_grad:
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.inputs, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for leaf in leaves or ():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)


# thin functional wrappers used by the model code

def matmul(a, b):
    return apply("matmul", [a, b])


def bias_add(x, b):
    return apply("bias_add", [x, b])


def softmax(x):
    return apply("softmax", [x])


def log_softmax(x):
    return apply("log_softmax", [x])


def log(x, floor=None):
    return apply("log", [x], floor=floor)


def exp(x):
    return apply("exp", [x])


def sigmoid(x):
    return apply("sigmoid", [x])


def relu(x):
    return apply("relu", [x])


def clip(x, lo, hi):
    return apply("clip", [x], lo=lo, hi=hi)


def layer_norm(x, gain, bias, eps=1e-5):
    return apply("layer_norm", [x, gain, bias], eps=eps)


def embedding(table, ids):
    return apply("embedding", [table], ids=ids)


def take_last(x, idx):
    return apply("take_last", [x], idx=idx)


def concat(xs, axis=0):
    return apply("concat", list(xs), axis=axis)


def masked_fill(x, mask, value):
    return apply("masked_fill", [x], mask=mask, value=value)


def tsum(x, axis=None, keepdims=False):
    return apply("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", [x], axis=axis, keepdims=keepdims)


def reshape(x, shape):
    return apply("reshape", [x], shape=tuple(shape))


def take(x, index):
    return apply("slice", [x], index=index)


def transpose(x, axes):
    return apply("transpose", [x], axes=tuple(axes))


def dropout(x, p, training, rng=None):
    if not training or p <= 0.0:
        return x
    return apply("dropout", [x], p=p, training=training, rng=rng)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params: Sequence[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.step = 0


def adam_update(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.98, eps=1e-8,
                weight_decay=0.0) -> None:
    """One bias-corrected Adam step, in place on ``params``.

    ``weight_decay`` is the decoupled (AdamW-style) variant; 0 disables it.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("adam_update: params, grads and state differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise _shape_error("adam_update", p.data, g, m)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data -= p.data.dtype.type(lr * weight_decay) * p.data
        p.data -= p.data.dtype.type(lr) * step.astype(p.data.dtype)
