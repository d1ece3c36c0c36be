"""Dense float64 tensors with reverse-mode autodiff, Adam, and checkpoint I/O.

Arrays are plain numpy buffers; every differentiable op records its parents and
a closure mapping the upstream gradient to parent gradients. Recording order is
a global counter, so sorting reachable nodes by it gives a topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_counter = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, op="leaf"):
        arr = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"{op}: non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._id = next(_counter)
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self):
        return self.data

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without grad needs a scalar output")
            grad = np.ones_like(self.data)
        graph = Graph.from_root(self)
        graph.run_backward(self, np.asarray(grad, dtype=DTYPE))

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_over_axis(self, axis, keepdims)


@dataclass
class Graph:
    """Recorded ops reachable from a root, in recording (topological) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(t._parents)
        return cls([seen[k] for k in sorted(seen)])

    def run_backward(self, root: Tensor, grad: np.ndarray):
        grads = {root._id: grad}
        for node in reversed(self.nodes):
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def scale(a, c: float):
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x):
    """Exact (erf) GELU."""
    x = as_tensor(x)
    z = x.data / np.sqrt(2.0)
    cdf = 0.5 * (1.0 + erf(z))
    pdf = np.exp(-0.5 * x.data ** 2) / np.sqrt(2.0 * np.pi)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def relu(x):
    x = as_tensor(x)
    m = x.data > 0
    return _make(x.data * m, (x,), lambda g: (g * m,), "relu")


def grl(x, lambda_grl: float):
    """Identity forward; backward multiplies the upstream gradient by -lambda_grl."""
    x = as_tensor(x)
    lam = float(lambda_grl)
    return _make(x.data.copy(), (x,), lambda g: (-lam * g,), "grl")


def dropout(x, p: float, rng: np.random.Generator | None, train: bool):
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    a = as_tensor(a)

    items = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)

    def back(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), back, "getitem")


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def concat_rows(tensors):
    """Concatenate along the token (second-to-last) axis."""
    return concat(tensors, axis=-2)


def gather_rows(x, index):
    """Select rows of ``x`` (..., S, D) by integer ``index`` (..., k); batch dims must match."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if x.ndim == 2:
        if index.ndim != 1:
            raise ShapeError("gather_rows on (S, D) needs a 1-D index")
        if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
            raise IndexError("gather_rows index out of range")

        def back2(g):
            out = np.zeros_like(x.data)
            np.add.at(out, index, g)
            return (out,)

        return _make(x.data[index], (x,), back2, "gather_rows")
    if x.ndim != 3 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} vs index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError("gather_rows index out of range")
    b = np.arange(x.shape[0])[:, None]

    def back3(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (b, index), g)
        return (out,)

    return _make(x.data[b, index], (x,), back3, "gather_rows")


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean_over_axis(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def weighted_row_sum(weights, rows):
    """sum_i w[..., i] * rows[..., i, :] -> (..., D)."""
    w, x = as_tensor(weights), as_tensor(rows)
    if w.shape != x.shape[:-1]:
        raise ShapeError(f"weighted_row_sum: weights {w.shape} vs rows {x.shape}")
    out = np.einsum("...k,...kd->...d", w.data, x.data)
    return _make(out, (w, x),
                 lambda g: (np.einsum("...d,...kd->...k", g, x.data),
                            w.data[..., None] * g[..., None, :]), "weighted_row_sum")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape}")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), back, "matmul")


def linear(x, weight, bias=None):
    """Affine map x @ W (+ b); W is (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layernorm(x, gamma, beta, eps: float = 1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), back, "layernorm")


def masked_softmax(logits, mask):
    """Softmax over the last axis restricted to ``mask == 1``; masked outputs are exactly 0."""
    z = as_tensor(logits)
    m = np.broadcast_to(np.asarray(mask).astype(bool), z.shape)
    if not m.any(axis=-1).all():
        raise ValueError("masked_softmax: a row has no allowed entries")
    zm = np.where(m, z.data, -np.inf)
    e = np.exp(zm - zm.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (z,), back, "masked_softmax")


def _log_softmax(z):
    zs = z - z.max(axis=-1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- losses

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: logits {z.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ValueError("cross_entropy: label out of range")
    logp = _log_softmax(z.data)
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (g * d / z.shape[0],)

    return _make(np.array(loss), (z,), back, "cross_entropy")


def bce_with_logits(logits, targets):
    """Mean elementwise binary cross-entropy on raw logits (log-sigmoid form)."""
    z = as_tensor(logits)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != z.shape:
        raise ShapeError(f"bce_with_logits: logits {z.shape}, targets {t.shape}")
    if not np.isin(t, (0.0, 1.0)).all():
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    x = z.data
    loss = (np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))).mean()
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(np.array(loss), (z,), lambda g: (g * (sig - t) / x.size,), "bce_with_logits")


def sigmoid_np(x):
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """In-place bias-corrected Adam update of ``params`` (name -> ndarray or Tensor)."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in sorted(params):
        p = params[name]
        arr = p.data if isinstance(p, Tensor) else p
        g = np.asarray(grads[name], dtype=DTYPE)
        if g.shape != arr.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {arr.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        arr -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


class Adam:
    """Adam over a fixed dict of parameter Tensors."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state)


# ---------------------------------------------------------------- rng

def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, keys...); same inputs give the same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"TSHD"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    for name in sorted(tensors):
        arr = tensors[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a TSHD checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(DTYPE)
        pos += 8 * count
    return out
