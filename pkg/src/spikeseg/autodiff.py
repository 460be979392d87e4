"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly: every operation returns a :class:`Tensor` that
remembers its parents and a closure mapping the output gradient onto the
parent gradients. ``backward()`` walks the graph once in reverse topological
order and accumulates gradients over fan-out. All arithmetic is 64-bit so
finite-difference checks at 1e-4 relative tolerance have plenty of headroom.

Shapes are 0-, 1- or 2-dimensional; matrices are row-major ``[rows, cols]``.
"""

from __future__ import annotations

import json
import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, expected a single element")
        return float(self.data.reshape(()))

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        topo = []
        state = {}
        stack = [self]
        while stack:
            node = stack[-1]
            st = state.get(id(node), 0)
            if st == 0:
                state[id(node)] = 1
                for p in node._parents:
                    if state.get(id(p), 0) == 0 and p._backward is not None:
                        stack.append(p)
            elif st == 1:
                state[id(node)] = 2
                topo.append(node)
                stack.pop()
            else:
                stack.pop()
        seed = np.ones_like(self.data)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar. Python scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis=axis)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, rule):
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = rule
        return out
    return Tensor(data)


def _acc(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to `shape`."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _sigmoid_stable(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), rule)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), rule)


def neg(a):
    a = _wrap(a)

    def rule(g):
        _acc(a, -g)

    return _make(-a.data, (a,), rule)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), rule)


def reciprocal(a):
    a = _wrap(a)
    out = 1.0 / a.data

    def rule(g):
        _acc(a, -g * out * out)

    return _make(out, (a,), rule)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def rule(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _make(out, (a, b), rule)


def transpose(a):
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")

    def rule(g):
        _acc(a, g.T)

    return _make(a.data.T.copy(), (a,), rule)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = _wrap(a)
    out = a.data.reshape(shape)

    def rule(g):
        _acc(a, g.reshape(a.data.shape))

    return _make(out.copy(), (a,), rule)


def narrow(a, axis, start, length):
    """Contiguous slice of `length` entries along `axis`."""
    a = _wrap(a)
    if not 0 <= start and start + length <= a.data.shape[axis]:
        raise ShapeError(f"narrow: [{start}:{start + length}) out of range for shape {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def rule(g):
        gx = np.zeros_like(a.data)
        gx[idx] = g
        _acc(a, gx)

    return _make(a.data[idx].copy(), (a,), rule)


def cat(tensors, axis=0):
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def rule(g):
        offset = 0
        for t, s in zip(ts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + s)
            _acc(t, g[tuple(idx)])
            offset += s

    return _make(out, tuple(ts), rule)


def sum_(a, axis=None):
    a = _wrap(a)
    out = a.data.sum(axis=axis)

    def rule(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return _make(np.asarray(out), (a,), rule)


def mean_(a, axis=None):
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def sigmoid(a):
    a = _wrap(a)
    y = _sigmoid_stable(a.data)

    def rule(g):
        _acc(a, g * y * (1.0 - y))

    return _make(y, (a,), rule)


def tanh(a):
    a = _wrap(a)
    y = np.tanh(a.data)

    def rule(g):
        _acc(a, g * (1.0 - y * y))

    return _make(y, (a,), rule)


def relu(a):
    a = _wrap(a)
    mask = a.data > 0

    def rule(g):
        _acc(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), rule)


def clamp(a, lo, hi):
    """Clip to [lo, hi]; the gradient passes only through the interior."""
    a = _wrap(a)
    inside = (a.data > lo) & (a.data < hi)

    def rule(g):
        _acc(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), rule)


def abs_(a):
    """|a| with subgradient 0 at the kink."""
    a = _wrap(a)
    s = np.sign(a.data)

    def rule(g):
        _acc(a, g * s)

    return _make(np.abs(a.data), (a,), rule)


def logaddexp(a, b):
    a, b = _wrap(a), _wrap(b)
    try:
        out = np.logaddexp(a.data, b.data)
    except ValueError:
        raise ShapeError(f"logaddexp: shapes {a.shape} and {b.shape} do not broadcast") from None

    def rule(g):
        wa = _sigmoid_stable(a.data - b.data)
        _acc(a, _unbroadcast(g * wa, a.data.shape))
        _acc(b, _unbroadcast(g * (1.0 - wa), b.data.shape))

    return _make(out, (a, b), rule)


# ---------------------------------------------------------------------------
# row-wise operations (last axis)


def softmax_rows(a):
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _acc(a, (g - dot) * y)

    return _make(y, (a,), rule)


def log_softmax_rows(a):
    a = _wrap(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def rule(g):
        _acc(a, g - np.exp(logp) * g.sum(axis=-1, keepdims=True))

    return _make(logp, (a,), rule)


def layer_norm_rows(a, eps=1e-12):
    """Normalize each row to zero mean and unit variance (no affine part)."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _acc(a, (g - gm - y * gy) * inv)

    return _make(y, (a,), rule)


# ---------------------------------------------------------------------------
# network building blocks


def dropout(a, rate, mask):
    """Inverted dropout: zero where `mask` is False, scale kept values by 1/(1-rate).

    Callers are expected to skip the call entirely in inference mode.
    """
    a = _wrap(a)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate {rate} outside [0, 1)")
    scale = mask / (1.0 - rate)

    def rule(g):
        _acc(a, g * scale)

    return _make(a.data * scale, (a,), rule)


def make_dropout_mask(rng, shape, rate):
    return rng.random(shape) >= rate


def conv1d(x, w, b=None, stride=1, pad=0):
    """1-D convolution along the time axis.

    x: [T, c_in]; w: [k * c_in, c_out] laid out kernel-position-major
    (w.reshape(k, c_in, c_out)); b: [c_out]. Output length is
    (T + 2*pad - k)//stride + 1.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 2 or w.ndim != 2:
        raise ShapeError(f"conv1d: expected matrices, got {x.shape} and {w.shape}")
    T, cin = x.data.shape
    kcin, cout = w.data.shape
    k = kcin // cin
    if k * cin != kcin:
        raise ShapeError(f"conv1d: weight rows {kcin} not a multiple of input channels {cin}")
    t_out = (T + 2 * pad - k) // stride + 1
    if t_out < 1:
        raise ShapeError(f"conv1d: input length {T} too short for kernel {k} with pad {pad}")
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, cin))
    cols = windows[::stride, 0].reshape(t_out, k * cin)
    out = cols @ w.data
    if b is not None:
        b = _wrap(b)
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def rule(g):
        _acc(w, cols.T @ g)
        if b is not None:
            _acc(b, g.sum(axis=0))
        if x.requires_grad:
            dcols = (g @ w.data.T).reshape(t_out, k, cin)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[j : j + stride * t_out : stride] += dcols[:, j, :]
            _acc(x, dxp[pad : pad + T])

    return _make(out, parents, rule)


def glu(a):
    """Gated linear unit over the last axis: first half times sigmoid of second."""
    a = _wrap(a)
    d = a.data.shape[-1]
    if d % 2:
        raise ShapeError(f"glu: last axis must be even, got shape {a.shape}")
    h = d // 2
    lin = a.data[..., :h]
    gate = _sigmoid_stable(a.data[..., h:])

    def rule(g):
        gx = np.empty_like(a.data)
        gx[..., :h] = g * gate
        gx[..., h:] = g * lin * gate * (1.0 - gate)
        _acc(a, gx)

    return _make(lin * gate, (a,), rule)


def embedding(table, ids):
    """Row lookup: table [V, d] indexed by integer ids -> [len(ids), d]."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding: ids must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding: id out of range for table with {table.data.shape[0]} rows")

    def rule(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _acc(table, gt)

    return _make(table.data[ids], (table,), rule)


def take(a, ids):
    """1-D gather: a [n] indexed by ids -> [len(ids)]."""
    a = _wrap(a)
    if a.ndim != 1:
        raise ShapeError(f"take: expected a vector, got shape {a.shape}")
    ids = np.asarray(ids, dtype=np.int64)

    def rule(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, ids, g)
        _acc(a, gx)

    return _make(a.data[ids], (a,), rule)


def gather_rows(a, cols):
    """Pick one column per row: a [n, m], cols [n] -> [n]."""
    a = _wrap(a)
    cols = np.asarray(cols, dtype=np.int64)
    if a.ndim != 2 or cols.shape != (a.data.shape[0],):
        raise ShapeError(f"gather_rows: shapes {a.shape} and {cols.shape} do not agree")
    rows = np.arange(a.data.shape[0])

    def rule(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, (rows, cols), g)
        _acc(a, gx)

    return _make(a.data[rows, cols], (a,), rule)


def cross_entropy_logits(logits, targets, ignore_index=None):
    """Mean negative log-likelihood of integer targets under row softmax.

    Rows whose target equals `ignore_index` contribute neither to the loss
    nor to the gradient.
    """
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.data.shape[0],):
        raise ShapeError(f"cross_entropy_logits: shapes {logits.shape} and {t.shape} do not agree")
    keep = np.ones(t.shape[0], dtype=bool) if ignore_index is None else t != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ShapeError("cross_entropy_logits: every position is masked")
    safe_t = np.where(keep, t, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(t.shape[0])
    loss = -logp[rows[keep], safe_t[keep]].sum() / n

    def rule(g):
        gl = np.exp(logp)
        gl[rows, safe_t] -= 1.0
        gl[~keep] = 0.0
        _acc(logits, gl * (float(g) / n))

    return _make(np.asarray(loss), (logits,), rule)


def spike_fn(v, v_th, surrogate_width=0.5):
    """Heaviside spike with a rectangular surrogate gradient.

    Forward: 1.0 where v > v_th, else 0.0. Backward: the incoming gradient
    passes through unchanged where |v - v_th| <= surrogate_width and is zero
    elsewhere.
    """
    v = _wrap(v)
    window = np.abs(v.data - v_th) <= surrogate_width

    def rule(g):
        _acc(v, g * window)

    return _make((v.data > v_th).astype(np.float64), (v,), rule)


# ---------------------------------------------------------------------------
# initialization, checking, checkpoints


def uniform_init(rng, shape, fan_in, fan_out):
    """Fan-based uniform weights with bound sqrt(6 / (fan_in + fan_out))."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def grad_check(f, xs, h=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    `f` maps the tensors in `xs` to a scalar Tensor; every tensor in `xs`
    must have requires_grad set. The per-coordinate error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    zero_grads(xs)
    f(*xs).backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
    worst = 0.0
    with no_grad():
        for x, a in zip(xs, analytic):
            flat = x.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*xs).item()
                flat[i] = orig - h
                fm = f(*xs).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                err = abs(aflat[i] - num) / max(1.0, abs(aflat[i]), abs(num))
                worst = max(worst, err)
    zero_grads(xs)
    return worst


def save_checkpoint(path, tensors, meta=None):
    """Write named arrays: one JSON header line, then raw little-endian float64.

    The header records, per sorted name, the shape and byte offset of the
    array inside the payload that follows the newline.
    """
    names = sorted(tensors)
    index = {}
    arrays = []
    offset = 0
    for name in names:
        t = tensors[name]
        arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        arrays.append(arr)
        index[name] = {"shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        offset += arr.size * 8
    header = {"format": "float64-le", "meta": meta if meta is not None else {}, "tensors": index}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        for arr in arrays:
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Read arrays written by save_checkpoint; returns (name -> ndarray, meta)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    out = {}
    for name, ent in header["tensors"].items():
        arr = np.frombuffer(payload, dtype="<f8", count=ent["count"], offset=ent["offset"])
        out[name] = arr.reshape(ent["shape"]).copy()
    return out, header.get("meta", {})
