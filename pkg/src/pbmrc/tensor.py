"""Dense float64 arrays with a reverse-mode differentiation tape.

Each op returns a :class:`Node` that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. ``backward`` walks
the graph once in reverse topological order and accumulates into ``.grad``.
"""

from __future__ import annotations

import math

import numpy as np

_CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (masking ops excepted)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class NonFiniteError(FloatingPointError):
    pass


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "op")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False, op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"


def leaf(value, requires_grad=True) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64), requires_grad=False, op="const")


def _make(value, parents, backward_fn, op, allow_inf=False):
    req = any(p.requires_grad for p in parents)
    if _CHECK_FINITE and not allow_inf and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from op {op!r}")
    return Node(value, parents, backward_fn if req else None, req, op)


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable node."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value) if root.grad is None else root.grad + 1.0
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            p.grad = g.copy() if p.grad is None else p.grad + g
        if node is not root:
            # interior grads are dead once propagated; leaves keep theirs
            node.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Node, c: float) -> Node:
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def add_row(x: Node, b: Node) -> Node:
    """x[p, q] + b[q], the bias broadcast over rows."""
    if x.value.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_row: cannot add {b.shape} to rows of {x.shape}")
    return _make(x.value + b.value, (x, b), lambda g: (g, g.sum(axis=0)), "add_row")


def add_const(x: Node, c) -> Node:
    """Add a fixed array (broadcastable to x). -inf entries are allowed."""
    c = np.asarray(c, dtype=np.float64)
    return _make(x.value + c, (x,), lambda g: (g,), "add_const", allow_inf=True)


def masked_fill(x: Node, keep, fill=-np.inf) -> Node:
    """Entries where ``keep`` is False become ``fill`` and get zero gradient."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, x.value, fill)
    return _make(out, (x,), lambda g: (np.where(keep, g, 0.0),), "masked_fill", allow_inf=True)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Node) -> Node:
    """0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))"""
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def transpose(a: Node) -> Node:
    return _make(a.value.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def slice_(a: Node, index) -> Node:
    """Basic (non-fancy) indexing; the backward scatters into zeros."""
    out = a.value[index].copy()

    def bw(g):
        full = np.zeros_like(a.value)
        full[index] = g
        return (full,)

    return _make(out, (a,), bw, "slice")


def concat(nodes, axis=0) -> Node:
    nodes = list(nodes)
    values = [n.value for n in nodes]
    out = np.concatenate(values, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, nodes, bw, "concat")


def embedding(table: Node, ids) -> Node:
    """Gather rows of ``table``; backward scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")

    def bw(g):
        full = np.zeros_like(table.value)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.value[ids], (table,), bw, "embedding")


# ---------------------------------------------------------------- reductions


def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.array([a.value.sum()]), (a,), lambda g: (np.full(shape, g[0]),), "sum")


def softmax_rows(x: Node) -> Node:
    v = x.value
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), bw, "softmax")


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-12) -> Node:
    """Row standardisation with biased variance, then ``gain * xhat + bias``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    v = x.value
    d = v.shape[-1]
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    out = xhat * gv + bias.value

    def bw(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / d)
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gain, bias), bw, "layer_norm")


def dropout(x: Node, p: float, rng: "Rng | None", training: bool) -> Node:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.uniform(size=x.shape) >= p
    m = keep / (1.0 - p)
    return _make(x.value * m, (x,), lambda g: (g * m,), "dropout")


def bce_with_logits(logits: Node, targets, mask) -> Node:
    """Mean binary cross-entropy over entries where ``mask`` is True.

    Masked entries may hold -inf; they contribute neither value nor gradient.
    Returns a [1] node; an empty mask yields 0.
    """
    mask = np.asarray(mask, dtype=bool)
    t = np.asarray(targets, dtype=np.float64)
    n = int(mask.sum())
    if n == 0:
        return _make(np.zeros(1), (logits,), lambda g: (np.zeros_like(logits.value),), "bce")
    x = np.where(mask, logits.value, 0.0)
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    loss = np.where(mask, per, 0.0).sum() / n

    def bw(g):
        return (np.where(mask, (sigmoid(x) - t) * (g[0] / n), 0.0),)

    return _make(np.array([loss]), (logits,), bw, "bce")


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))  # in [0, 1]: no overflow, exact 0/1 at -inf/+inf
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- randomness


class Rng:
    """Counter-based (Philox) generator addressed by ``(seed, *stream)``.

    ``split`` derives an independent child stream, so e.g. a dropout mask keyed
    by (epoch, step, instance) does not depend on what ran before it.
    """

    def __init__(self, seed: int, stream=()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys) -> "Rng":
        return Rng(self.seed, self.stream + tuple(keys))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def truncated_normal(self, shape, std=0.02, bound=2.0):
        """Normal(0, std) resampled until every draw lies within ±bound·std."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        out *= std
        return out
