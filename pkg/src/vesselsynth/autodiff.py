"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Everything is 64-bit. Ops are recorded on an explicit Tape; outside an
active tape the same functions run forward-only, which is the inference
path. Broadcasting is restricted to scalars and trailing-suffix shapes
(bias-style); anything else needs an explicit reshape.
"""

from __future__ import annotations

import itertools
import json
import struct

import numpy as np

_node_counter = itertools.count()
_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def item(self):
        return float(self.data.reshape(-1)[0])


def param(data):
    """A learnable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data):
    return Tensor(data, requires_grad=False)


class _Op:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; creation order is topological by construction."""

    def __init__(self):
        self.ops = []
        self._used = False

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False

    def backward(self, loss):
        """Populate .grad on every requires_grad tensor reachable from loss.

        The tape is single-use: a second backward without a fresh tape is
        rejected. Parameters not connected to the loss keep grad = None/zero.
        """
        if self._used:
            raise RuntimeError("tape already consumed by a previous backward()")
        if loss.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._used = True
        _accum(loss, np.ones_like(loss.data))
        for op in reversed(self.ops):
            if op.out.grad is None:
                continue
            grads = op.backward_fn(op.out.grad)
            for inp, g in zip(op.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                _accum(inp, g)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
        t.grad = t.grad.reshape(t.data.shape)
    else:
        t.grad = t.grad + g.reshape(t.data.shape)


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _make(data, inputs, backward_fn):
    tape = _active_tape()
    track = tape is not None and any(i.requires_grad for i in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.ops.append(_Op(out, list(inputs), backward_fn))
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce gradient g down to `shape` (scalar or trailing-suffix operand)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, opname):
    sa, sb = a.data.shape, b.data.shape
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    tail = big[len(big) - len(small):]
    ok = all(m == n or m == 1 for m, n in zip(small, tail))
    if not ok:
        raise ShapeError(f"{opname}: shapes {sa} and {sb} are not suffix-compatible")


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                          _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.data.shape),
                                          _unbroadcast(g * a.data, b.data.shape)))


def scale(a, c):
    """Multiply by a python scalar."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def shift(a, c):
    """Add a python scalar."""
    c = float(c)
    return _make(a.data + c, (a,), lambda g: (g,))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def absolute(a):
    """Elementwise |x|; subgradient at 0 is 0 (sign convention)."""
    return _make(np.abs(a.data), (a,), lambda g: (np.sign(a.data) * g,))


def tanh(a):
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: ((1.0 - y * y) * g,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximation GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * dy,)

    return _make(y, (a,), bwd)


def stop_gradient(a):
    """Forward identity, zero gradient: the quantizer detach path."""
    return Tensor(a.data.copy(), requires_grad=False)


def straight_through(a, b):
    """Forward b exactly; backward copies the gradient onto a only."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"straight_through: shapes {a.data.shape} != {b.data.shape}")
    return _make(b.data.copy(), (a, b), lambda g: (g, None))


# ------------------------------------------------------------------ structure

def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def slice_last(a, start, stop):
    """Contiguous slice along the last axis."""
    data = a.data[..., start:stop]

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[..., start:stop] = g
        return (gx,)

    return _make(data, (a,), bwd)


def gather_rows(a, idx):
    """Row lookup a[idx] along axis 0 (embeddings, codebook, positions)."""
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def bwd(g):
        gx = np.zeros_like(a.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, (a,), bwd)


def concat_last(tensors):
    """Concatenate along the last axis."""
    widths = [t.data.shape[-1] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=-1)

    def bwd(g):
        out, ofs = [], 0
        for w in widths:
            out.append(g[..., ofs:ofs + w])
            ofs += w
        return tuple(out)

    return _make(data, tuple(tensors), bwd)


# ----------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l1_loss(a, b):
    """Mean absolute error; subgradient at ties is 0."""
    return tmean(absolute(sub(a, b)))


def mse_loss(a, b):
    return tmean(square(sub(a, b)))


# -------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) == 2 and len(sb) == 2:
        if sa[1] != sb[0]:
            raise ShapeError(f"matmul: inner dims disagree, {sa} @ {sb}")
        data = a.data @ b.data
        return _make(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    if len(sa) == 3 and len(sb) == 3:
        if sa[0] != sb[0] or sa[2] != sb[1]:
            raise ShapeError(f"matmul: batched dims disagree, {sa} @ {sb}")
        data = a.data @ b.data
        return _make(data, (a, b),
                     lambda g: (g @ b.data.transpose(0, 2, 1),
                                a.data.transpose(0, 2, 1) @ g))
    raise ShapeError(f"matmul: unsupported ranks {sa} @ {sb}")


# ------------------------------------------------------------------ activations

def softmax(a, axis=-1):
    """Numerically stable softmax along `axis` (max-subtraction)."""
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _make(y, (a,), bwd)


def log_softmax(a, axis=-1):
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis, then scale and shift."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    y = xhat * gain.data + bias.data

    def bwd(g):
        dgain = _unbroadcast(g * xhat, gain.data.shape)
        dbias = _unbroadcast(g, bias.data.shape)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgain, dbias)

    return _make(y, (a, gain, bias), bwd)


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer targets under row logits."""
    targets = np.asarray(targets, dtype=np.intp)
    logp = log_softmax(logits, axis=-1)
    n = logits.data.shape[0]
    picked = gather_elements(logp, targets)
    return scale(tsum(picked), -1.0 / n)


def gather_elements(a, idx):
    """Pick a[i, idx[i]] for each row i."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    data = a.data[rows, idx]

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(data, (a,), bwd)


# ----------------------------------------------------------------------- Adam

class Adam:
    """Bias-corrected ADAM over a named parameter dict."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1 ** t)
            vhat = v / (1 - self.beta2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self):
        out = {"adam.step": np.array([float(self.step_count)])}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["adam.step"][0])
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"])
            self.v[k] = np.array(arrays[f"adam.v.{k}"])


# ----------------------------------------------------------------- checkpoints

_MAGIC = "vessel-checkpoint-v1"


def save_checkpoint(path, arrays, meta=None):
    """Single-file format: one JSON header line, then raw little-endian f64."""
    header = {"magic": _MAGIC, "meta": meta or {}, "tensors": []}
    offset = 0
    payloads = []
    for name in sorted(arrays):
        shape = np.asarray(arrays[name]).shape
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        header["tensors"].append(
            {"name": name, "shape": list(shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    blob = json.dumps(header, sort_keys=True).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        if header.get("magic") != _MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        payload = fh.read()
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=entry["offset"]).reshape(shape)
        arrays[entry["name"]] = np.array(arr)  # own the memory
    return arrays, header["meta"]
