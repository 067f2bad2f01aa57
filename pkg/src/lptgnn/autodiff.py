"""Minimal tape-based reverse-mode autodiff over numpy arrays.

Operations are polymorphic: when none of the inputs is a :class:`Var` they
return a plain ``ndarray`` and nothing is recorded, so the same model code
serves the training path (Vars) and frozen inference (arrays).
"""

from __future__ import annotations

import string
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class TrainingError(RuntimeError):
    """Numerical failure during optimisation (NaN/inf gradient or loss)."""


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "parents", "grad_fn", "name")

    def __init__(self, value, parents=(), grad_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.grad_fn = grad_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of the operations of one forward pass.

    Nodes are appended as they are created, so the recording order is a
    topological order and :meth:`backward` only has to walk it in reverse.
    """

    _active: list[Tape] = []

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self):
        Tape._active.append(self)
        return self

    def __exit__(self, *exc):
        Tape._active.pop()
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss, store=None):
        """Propagate d(loss)/d(node) to every recorded node.

        Leaf gradients of parameters are accumulated into ``store``.
        """
        if not isinstance(loss, Var):
            # loss does not depend on any parameter
            return
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.grad_fn is None:
                continue
            grads = node.grad_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        if store is not None:
            store.accumulate()


def _current_tape():
    return Tape._active[-1] if Tape._active else None


def _make(value, parents, grad_fn):
    out = Var(value, parents, grad_fn)
    tape = _current_tape()
    if tape is not None:
        tape.record(out)
    return out


def _val(x):
    return x.value if isinstance(x, Var) else x


def _any_var(*xs):
    return any(isinstance(x, Var) for x in xs)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b):
    va, vb = _val(a), _val(b)
    out = va + vb
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    if not isinstance(a, Var):
        return -a
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    va, vb = _val(a), _val(b)
    out = va * vb
    if not _any_var(a, b):
        return out
    sa, sb = np.shape(va), np.shape(vb)
    return _make(
        out, (a, b), lambda g: (_unbroadcast(g * vb, sa), _unbroadcast(g * va, sb))
    )


def relu(x):
    v = _val(x)
    out = np.maximum(v, 0.0)
    if not isinstance(x, Var):
        return out
    mask = v > 0
    return _make(out, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------- shaping


def reshape(x, shape):
    v = _val(x)
    out = v.reshape(shape)
    if not isinstance(x, Var):
        return out
    old = v.shape
    return _make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    v = _val(x)
    out = np.transpose(v, axes)
    if not isinstance(x, Var):
        return out
    inv = np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def concat(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not _any_var(*xs):
        return out
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(xs), grad_fn)


def stack(xs, axis=0):
    vals = [_val(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if not _any_var(*xs):
        return out

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _make(out, tuple(xs), grad_fn)


def take_rows(x, index):
    """Gather rows ``x[index]``; gradient scatter-adds back."""
    v = _val(x)
    index = np.asarray(index, dtype=np.intp)
    out = v[index]
    if not isinstance(x, Var):
        return out
    shape = v.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (x,), grad_fn)


# --------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False):
    v = _val(x)
    out = v.sum(axis=axis, keepdims=keepdims)
    if not isinstance(x, Var):
        return out
    shape = v.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (x,), grad_fn)


def mean(x, axis=None, keepdims=False):
    v = _val(x)
    n = v.size if axis is None else np.prod([v.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(x, axis):
    """Max over one axis; ties route the gradient to the first maximiser."""
    v = _val(x)
    out = v.max(axis=axis)
    if not isinstance(x, Var):
        return out
    arg = v.argmax(axis=axis)
    shape = v.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _make(out, (x,), grad_fn)


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    va, vb = _val(a), _val(b)
    out = va @ vb
    if not _any_var(a, b):
        return out
    return _make(out, (a, b), lambda g: (g @ vb.T, va.T @ g))


def const_matmul(m, x):
    """``m @ x`` for a constant (dense or scipy.sparse) matrix ``m``."""
    v = _val(x)
    out = np.asarray(m @ v)
    if not isinstance(x, Var):
        return out
    mt = m.T
    return _make(out, (x,), lambda g: (np.asarray(mt @ g),))


def einsum(subscripts, *operands):
    """Explicit-output einsum (no ellipsis, no repeated index per operand)."""
    ins, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = ins.split(",")
    if len(in_subs) != len(operands):
        raise ContractError(f"einsum '{subscripts}' got {len(operands)} operands")
    vals = [_val(o) for o in operands]
    out = np.einsum(subscripts, *vals, optimize=len(vals) > 2)
    if not _any_var(*operands):
        return out
    sizes = {}
    for sub, v in zip(in_subs, vals):
        sizes.update(zip(sub, v.shape))

    def grad_fn(g):
        grads = []
        for k, (sub, op) in enumerate(zip(in_subs, operands)):
            if not isinstance(op, Var):
                grads.append(None)
                continue
            others = [(s, v) for i, (s, v) in enumerate(zip(in_subs, vals)) if i != k]
            present = set(out_sub).union(*[set(s) for s, _ in others]) if others else set(out_sub)
            target = "".join(c for c in sub if c in present)
            expr = ",".join([out_sub] + [s for s, _ in others]) + "->" + target
            gk = np.einsum(expr, g, *[v for _, v in others], optimize=len(others) > 1)
            if target != sub:
                # indices summed inside this operand only: broadcast back
                shape = [sizes[c] if c in present else 1 for c in sub]
                gk = np.broadcast_to(gk.reshape(shape), [sizes[c] for c in sub]).copy()
            grads.append(gk)
        return tuple(grads)

    return _make(out, tuple(operands), grad_fn)


def letters(n, skip=""):
    pool = [c for c in string.ascii_letters if c not in skip]
    if n > len(pool):
        raise ContractError(f"too many tensor modes ({n})")
    return "".join(pool[:n])


# ----------------------------------------------------------------- CNN parts


def _im2col(x, kh, kw, pad):
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    # (b, c, oh, ow, kh, kw) -> (b, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, oh, ow, c * kh * kw)


def conv2d(x, weight, bias, padding=1):
    """Stride-1 2D cross-correlation. x: (B,C,H,W), weight: (O,C,kh,kw)."""
    vx, vw, vb = _val(x), _val(weight), _val(bias)
    o, c, kh, kw = vw.shape
    if vx.shape[1] != c:
        raise ContractError(f"conv2d expects {c} input channels, got {vx.shape[1]}")
    cols = _im2col(vx, kh, kw, padding)
    wmat = vw.reshape(o, -1)
    out = (cols @ wmat.T + vb).transpose(0, 3, 1, 2)
    if not _any_var(x, weight, bias):
        return out
    b, _, h, w = vx.shape

    def grad_fn(g):
        gt = g.transpose(0, 2, 3, 1)  # (B, oh, ow, O)
        gw = np.einsum("bijo,bijk->ok", gt, cols).reshape(vw.shape)
        gb = gt.sum(axis=(0, 1, 2))
        gx = None
        if isinstance(x, Var):
            # full correlation with the flipped kernel
            flipped = vw[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gcols = _im2col(g, kh, kw, kh - 1 - padding)
            gx = (gcols @ flipped.reshape(c, -1).T).transpose(0, 3, 1, 2)
        return gx, gw, gb

    return _make(out, (x, weight, bias), grad_fn)


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    v = _val(x)
    b, c, h, w = v.shape
    oh, ow = h // size, w // size
    blocks = v[:, :, : oh * size, : ow * size].reshape(b, c, oh, size, ow, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, size * size)
    out = blocks.max(axis=-1)
    if not isinstance(x, Var):
        return out
    arg = blocks.argmax(axis=-1)

    def grad_fn(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(b, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        full = np.zeros(v.shape)
        full[:, :, : oh * size, : ow * size] = gb.reshape(b, c, oh * size, ow * size)
        return (full,)

    return _make(out, (x,), grad_fn)


# ----------------------------------------------------- normalisation, losses


def batchnorm(x, gamma, beta, running, training, momentum=0.9, eps=1e-5, stats=None):
    """Batch normalisation over axis 0 of a 2D input.

    ``running`` is a dict with ``mean``/``var`` arrays, updated in place at
    train time as ``momentum * old + (1 - momentum) * batch``. Passing
    ``stats=(mean, var)`` normalises with those fixed constants instead and
    leaves ``running`` untouched.
    """
    v = _val(x)
    if stats is not None or not training:
        mean_, var_ = stats if stats is not None else (running["mean"], running["var"])
        scale = 1.0 / np.sqrt(var_ + eps)
        return add(mul(add(x, -mean_), mul(gamma, scale)), beta)
    mu = v.mean(axis=0)
    var = v.var(axis=0)
    n = v.shape[0]
    running["mean"] = momentum * running["mean"] + (1 - momentum) * mu
    unbiased = var * n / (n - 1) if n > 1 else var
    running["var"] = momentum * running["var"] + (1 - momentum) * unbiased
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv
    vg, vbeta = _val(gamma), _val(beta)
    out = xhat * vg + vbeta
    if not _any_var(x, gamma, beta):
        return out

    def grad_fn(g):
        gg = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        gxhat = g * vg
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx, gg, gbeta

    return _make(out, (x, gamma, beta), grad_fn)


def dropout(x, rate, rng, training):
    """Inverted dropout; identity when not training or rate == 0."""
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(np.shape(_val(x))) >= rate) / (1.0 - rate)
    return mul(x, keep)


def log_softmax(logits):
    v = np.asarray(logits, dtype=np.float64)
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of (n, C) logits against integer labels."""
    v = _val(logits)
    labels = np.asarray(labels, dtype=np.intp)
    n, c = v.shape
    if labels.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label outside 0..{c - 1}")
    logp = log_softmax(v)
    per = -logp[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    out = np.asarray(per.sum() / n if reduction == "mean" else per.sum())
    if not isinstance(logits, Var):
        return out
    p = np.exp(logp)

    def grad_fn(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g * scale),)

    return _make(out, (logits,), grad_fn)


# ------------------------------------------------------------ parameters, Adam


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    leaf: Var = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Named trainable tensors with gradient slots and Adam moments."""

    def __init__(self):
        self.params: OrderedDict[str, Param] = OrderedDict()
        self.buffers: OrderedDict[str, dict] = OrderedDict()
        self.step_count = 0
        self.tracking = False

    def add(self, name, value):
        if name in self.params:
            raise ContractError(f"duplicate parameter {name!r}")
        self.params[name] = Param(value)

    def buffer(self, name, **arrays):
        self.buffers.setdefault(name, {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
        return self.buffers[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def get(self, name):
        """Leaf Var when tracking gradients, else the raw array."""
        p = self.params[name]
        if not self.tracking:
            return p.value
        if p.leaf is None:
            p.leaf = Var(p.value, name=name)
        return p.leaf

    def track(self, on=True):
        self.tracking = on
        for p in self.params.values():
            p.leaf = None
        return self

    def accumulate(self):
        for p in self.params.values():
            if p.leaf is not None and p.leaf.grad is not None:
                p.grad = p.grad + p.leaf.grad
            p.leaf = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)

    def count(self):
        return int(sum(p.value.size for p in self.params.values()))

    def values(self):
        return OrderedDict((k, p.value) for k, p in self.params.items())

    def load_values(self, values):
        for k, v in values.items():
            p = self.params[k]
            v = np.asarray(v, dtype=np.float64)
            if v.shape != p.value.shape:
                raise ContractError(f"{k}: expected shape {p.value.shape}, got {v.shape}")
            p.value = v.copy()


def backward(tape, loss, store):
    tape.backward(loss, store)


def adam_step(store, learning_rate, betas=(0.9, 0.999), epsilon=1e-8):
    """Bias-corrected Adam update of every parameter; zeroes gradients."""
    for name, p in store.params.items():
        if not np.all(np.isfinite(p.grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
    store.step_count += 1
    b1, b2 = betas
    t = store.step_count
    for p in store.params.values():
        p.m = b1 * p.m + (1 - b1) * p.grad
        p.v = b2 * p.v + (1 - b2) * p.grad**2
        mhat = p.m / (1 - b1**t)
        vhat = p.v / (1 - b2**t)
        p.value = p.value - learning_rate * mhat / (np.sqrt(vhat) + epsilon)
    store.zero_grad()
    return store


def sparse_block_diag(blocks):
    return sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((0, 0))
