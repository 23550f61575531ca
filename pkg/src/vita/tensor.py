"""Minimal reverse-mode autograd on numpy arrays.

Every trainable component in this package is built from the ops here.
Tensors hold row-major float32 data by default; float64 graphs are used
only for finite-difference verification (see gradcheck). Gradient
accumulation is additive: callers zero grads between optimizer steps.

Thread-safety: tensors are treated as immutable once shared; backward()
mutates only .grad fields of the graph it owns.
"""

from __future__ import annotations

import contextlib
import os

import numpy as np

_CHECK_FINITE = bool(int(os.environ.get("VITA_CHECK_FINITE", "0")))
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense array plus an optional gradient accumulator.

    Invariants: prod(shape) == data.size, grad (when present) matches
    data.shape, and forward results are finite unless the computation
    itself diverged (checked eagerly when VITA_CHECK_FINITE=1).
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = ()

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False):
        """Add g into the gradient buffer.

        own=True asserts g is freshly allocated and unshared, letting the
        first accumulation take the array without a defensive copy.
        """
        if self.grad is None:
            if own and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Reverse-mode sweep from this tensor.

        Defaults to seed gradient 1 (scalar outputs only).
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p._backward is not None or p.requires_grad:
                    stack.append((p, False))
        self.accumulate_grad(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # intermediate buffers are single-use; release for reuse

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad or t._backward is not None for t in ts)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in forward op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        # the child's buffer is released after this runs, so the first taker
        # may own it; a second identical-shape taker must copy
        ga = _unbroadcast(g, a.shape)
        a.accumulate_grad(ga, own=True)
        gb = _unbroadcast(g, b.shape)
        b.accumulate_grad(gb, own=gb is not g)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape), own=True)
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape), own=True)

    return _make(data, (a, b), backward)


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        a.accumulate_grad(_unbroadcast(g / b.data, a.shape), own=True)
        b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.shape), own=True)

    return _make(data, (a, b), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    data = a.data * a.data

    def backward(g):
        a.accumulate_grad(g * (2.0 * a.data), own=True)

    return _make(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def backward(g):
        a.accumulate_grad(g * (0.5 / np.sqrt(a.data)), own=True)

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        a.accumulate_grad(g * data, own=True)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        a.accumulate_grad(g / a.data, own=True)

    return _make(data, (a,), backward)


def absolute(a) -> Tensor:
    # subgradient at 0 taken as 0
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        a.accumulate_grad(g * np.sign(a.data), own=True)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        a.accumulate_grad(g * (1.0 - data * data), own=True)

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        a.accumulate_grad(g * data * (1.0 - data), own=True)

    return _make(data, (a,), backward)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; the derivative matches the approximation exactly."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        a.accumulate_grad(g * da, own=True)

    return _make(data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        a.accumulate_grad(g * (a.data > 0), own=True)

    return _make(data, (a,), backward)


# -- shape ops -----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    data = a.data.reshape(shape)

    def backward(g):
        a.accumulate_grad(g.reshape(old), own=True)

    return _make(data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)

    def backward(g):
        a.accumulate_grad(g.transpose(inv), own=True)

    return _make(data, (a,), backward)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def take(a, idx) -> Tensor:
    """Slice / fancy-index with scatter-add backward."""
    a = as_tensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        buf = np.zeros_like(a.data)
        if basic:
            buf[idx] += g
        else:
            np.add.at(buf, idx, g)
        a.accumulate_grad(buf, own=True)

    return _make(data, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(sl)], own=True)

    return _make(data, tuple(tensors), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return _make(data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.data.size / max(data.size, 1)

    def backward(g):
        gg = g / denom
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        a.accumulate_grad(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return _make(data, (a,), backward)


# -- linear algebra --------------------------------------------------------------


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def matmul(a, b) -> Tensor:
    """np.matmul semantics, including batched stacks with broadcasting.

    Gradients are only computed for operands that participate in the
    graph, and the common (batched x) @ (2-D weight) pattern folds the
    weight gradient into a single 2-D GEMM.
    """
    a, b = as_tensor(a), as_tensor(b)
    data = np.matmul(a.data, b.data)

    def backward(g):
        if b.data.ndim == 1:
            if _wants_grad(a):
                ga = np.multiply.outer(g, b.data) if a.data.ndim > 1 else g * b.data
                a.accumulate_grad(_unbroadcast(ga.reshape(a.shape), a.shape))
            if _wants_grad(b):
                gb = np.tensordot(g, a.data, axes=(range(g.ndim), range(g.ndim)))
                b.accumulate_grad(gb)
            return
        if a.data.ndim == 1:
            if _wants_grad(a):
                a.accumulate_grad(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
            if _wants_grad(b):
                if b.data.ndim == 2:
                    gb = np.multiply.outer(a.data, g)
                else:
                    gb = np.matmul(a.data[:, None], g[..., None, :])
                b.accumulate_grad(_unbroadcast(gb, b.shape))
            return
        if _wants_grad(a):
            a.accumulate_grad(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape), own=True)
        if _wants_grad(b):
            if b.data.ndim == 2 and a.data.ndim > 2:
                k = a.data.shape[-1]
                n = g.shape[-1]
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b.accumulate_grad(gb, own=True)

    return _make(data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """y = x @ w + b with exact analytic gradients.

    x: (..., in), w: (in, out), b: (out,) or None. Batched inputs are
    flattened into one 2-D GEMM rather than a loop of small ones.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: inner dims differ, x{x.shape} vs w{w.shape}")
    if x.ndim > 2:
        lead = x.shape[:-1]
        out = matmul(reshape(x, (-1, x.shape[-1])), w)
        out = reshape(out, lead + (w.shape[1],))
    else:
        out = matmul(x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        out = add(out, b)
    return out


# -- fused neural ops -------------------------------------------------------------


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax along axis (max-subtraction; shift is treated as constant)."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x.accumulate_grad((g - dot) * data, own=True)

    return _make(data, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def backward(g):
        x.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True), own=True)

    return _make(data, (x,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under logits (n, K).

    Gradient w.r.t. logits is (softmax - one_hot) / n.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets)
    if logits.ndim != 2:
        raise ValueError("cross_entropy expects (n, K) logits")
    n, k = logits.shape
    if t.shape != (n,):
        raise ValueError(f"cross_entropy: targets shape {t.shape} != ({n},)")
    if t.min() < 0 or t.max() >= k:
        raise IndexError("cross_entropy: target index out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    data = np.asarray(-logp[np.arange(n), t].mean(), dtype=logits.dtype)

    def backward(g):
        sm = np.exp(logp)
        sm[np.arange(n), t] -= 1.0
        logits.accumulate_grad(g * sm / n, own=True)

    return _make(data, (logits,), backward)


def layer_norm(x, weight, bias, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * weight.data + bias.data
    n = x.shape[-1]

    def backward(g):
        gw = g * weight.data
        gx = inv * (gw - gw.mean(axis=-1, keepdims=True) - xhat * (gw * xhat).mean(axis=-1, keepdims=True))
        x.accumulate_grad(gx.astype(x.dtype, copy=False), own=True)
        red = tuple(range(g.ndim - 1))
        weight.accumulate_grad((g * xhat).sum(axis=red), own=True)
        bias.accumulate_grad(g.sum(axis=red), own=True)

    return _make(data, (x, weight, bias), backward)


def masked_fill(x, keep_mask: np.ndarray, value: float) -> Tensor:
    """Where keep_mask is False, replace by constant value (no grad there)."""
    x = as_tensor(x)
    m = np.asarray(keep_mask, dtype=bool)
    data = np.where(m, x.data, np.asarray(value, dtype=x.dtype))

    def backward(g):
        x.accumulate_grad(_unbroadcast(np.where(m, g, 0.0), x.shape), own=True)

    return _make(data, (x,), backward)


def multihead_attention(qkv, heads: int, keep_mask: np.ndarray) -> Tensor:
    """Fused softmax(scale * QK^T) V over heads, from packed (B, S, 3W) projections.

    keep_mask is boolean (S, S) or (B, S, S); False positions contribute
    exactly zero weight (scores forced to -inf), which keeps masked-out
    content bit-invisible to the rest of the sequence.
    """
    qkv = as_tensor(qkv)
    b, s, w3 = qkv.shape
    w = w3 // 3
    if w % heads or w * 3 != w3:
        raise ValueError("multihead_attention: packed width must be 3 * heads * head_dim")
    dh = w // heads
    scale = 1.0 / np.sqrt(dh)
    m = np.asarray(keep_mask, dtype=bool)
    m4 = m[None, None] if m.ndim == 2 else m[:, None]
    split = qkv.data.reshape(b, s, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = split[0], split[1], split[2]             # (B, h, S, dh) views
    scores = np.matmul(np.ascontiguousarray(q), np.ascontiguousarray(np.swapaxes(k, -1, -2)))
    scores *= scale
    scores[~np.broadcast_to(m4, scores.shape)] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    probs = scores                                      # (B, h, S, S)
    out = np.matmul(probs, np.ascontiguousarray(v))
    data = out.transpose(0, 2, 1, 3).reshape(b, s, w)

    def backward(g):
        gout = g.reshape(b, s, heads, dh).transpose(0, 2, 1, 3)
        dv = np.matmul(np.swapaxes(probs, -1, -2), gout)
        dp = np.matmul(gout, np.swapaxes(np.ascontiguousarray(v), -1, -2))
        ds = probs * (dp - (dp * probs).sum(axis=-1, keepdims=True))
        dq = np.matmul(ds, np.ascontiguousarray(k)) * scale
        dk = np.matmul(np.swapaxes(ds, -1, -2), np.ascontiguousarray(q)) * scale
        dqkv = np.empty((3, b, heads, s, dh), dtype=g.dtype)
        dqkv[0], dqkv[1], dqkv[2] = dq, dk, dv
        qkv.accumulate_grad(dqkv.transpose(1, 3, 0, 2, 4).reshape(b, s, w3), own=True)

    return _make(data, (qkv,), backward)


def embedding(table, ids) -> Tensor:
    """Row lookup into (V, D) table; backward scatter-adds into rows."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding: id out of range")
    data = table.data[ids]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        table.accumulate_grad(buf, own=True)

    return _make(data, (table,), backward)


def straight_through(x, forward_value: np.ndarray) -> Tensor:
    """Forward takes forward_value; backward passes the gradient to x unchanged."""
    x = as_tensor(x)
    if np.shape(forward_value) != x.shape:
        raise ValueError("straight_through: value shape mismatch")
    data = np.asarray(forward_value, dtype=x.dtype)

    def backward(g):
        x.accumulate_grad(g, own=True)

    return _make(data, (x,), backward)


# -- parameter helpers -------------------------------------------------------------


def parameter(rng: np.random.Generator, shape, scale: float | None = None, dtype=np.float32) -> Tensor:
    """Uniform(-s, s) initialized trainable tensor; default s = 1/sqrt(fan_in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        scale = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-scale, scale, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


class Module:
    """Tiny parameter-registry convenience shared by all trainable components."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                for sub, t in val.params().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub, t in item.params().items():
                            out[f"{name}.{i}.{sub}"] = t
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{i}"] = item
        return out

    def zero_grad(self):
        for t in self.params().values():
            t.grad = None
