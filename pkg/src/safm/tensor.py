"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward``
orders the recorded graph topologically and walks it in reverse, adding
the result into the ``grad`` slot of every leaf that requires it.
"""

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels

COS_EPS = 1e-8

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in this thread (evaluation, generation)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        return self.data

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# graph traversal


def build_tape(root):
    """Topologically ordered list of recorded nodes reachable from ``root``.

    Every node appears after all of its parents; ``backward`` consumes the
    list in exact reverse order.
    """
    order, seen = [], set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return _record(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)),
    )


def matmul(a, b):
    """Batched matrix product; 2-D weights broadcast over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _record(np.matmul(ad, bd), (a, b), grad_fn)


def reshape(a, shape):
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx):
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) for i in parts)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic(idx)

    def grad_fn(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _record(a.data[idx], (a,), grad_fn)


def tensor_sum(a):
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    shape, n = a.shape, a.size
    return _record(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),)
    )


def stack_sum(terms):
    """Sum of equally shaped tensors as one node."""
    terms = [_lift(t) for t in terms]
    data = terms[0].data.copy()
    for t in terms[1:]:
        data = data + t.data
    return _record(data, tuple(terms), lambda g: tuple(g for _ in terms))


def embedding(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _record(table.data[ids], (table,), grad_fn)


def softmax(z):
    """Softmax of a 1-D logit vector."""
    e = np.exp(z.data - z.data.max())
    p = e / e.sum()
    return _record(p, (z,), lambda g: (p * (g - np.dot(g, p)),))


def exp(a):
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# fused ops backed by the kernels package


def gelu(x):
    xd = x.data
    return _record(kernels.gelu_forward(xd), (x,), lambda g: (kernels.gelu_backward(xd, g),))


def layer_norm(x, gamma, beta, eps=1e-5):
    shape = x.shape
    d = shape[-1]
    y, xhat, rstd = kernels.layer_norm_forward(x.data.reshape(-1, d), gamma.data, beta.data, eps)

    def grad_fn(g):
        gx, gg, gb = kernels.layer_norm_backward(g.reshape(-1, d), xhat, rstd, gamma.data)
        return gx.reshape(shape), gg, gb

    return _record(y.reshape(shape), (x, gamma, beta), grad_fn)


def causal_softmax(scores):
    p = kernels.causal_softmax_forward(scores.data)
    return _record(p, (scores,), lambda g: (kernels.causal_softmax_backward(p, g),))


def weighted_nll(logits, targets, weights):
    """sum_i w_i * -log softmax(logits_i)[t_i] over flattened positions."""
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if t.size and (t.min() < 0 or t.max() >= V):
        raise DimensionError(f"target ids must lie in [0, {V})")
    loss, probs = kernels.cross_entropy_forward(flat, t, w)
    shape = logits.shape

    def grad_fn(g):
        return (kernels.cross_entropy_backward(probs, t, w, float(g)).reshape(shape),)

    return _record(np.asarray(loss), (logits,), grad_fn)


def cross_entropy_loss(logits, targets, mask=None):
    """Mean token cross-entropy over the positions selected by ``mask``."""
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("degenerate batch: mask selects no positions")
    return weighted_nll(logits, np.where(mask, targets, 0), mask / n)


def row_cosine(u, v, eps=COS_EPS):
    """Cosine similarity along the last axis; output drops that axis."""
    shape = u.shape
    d = shape[-1]
    ud, vd = u.data.reshape(-1, d), v.data.reshape(-1, d)
    cos, dot, nu, nv = kernels.row_cosine_forward(ud, vd, eps)

    def grad_fn(g):
        gu, gv = kernels.row_cosine_backward(ud, vd, dot, nu, nv, eps, g.reshape(-1))
        return gu.reshape(shape), gv.reshape(shape)

    return _record(cos.reshape(shape[:-1]), (u, v), grad_fn)


def cosine_similarity(u, v, eps=COS_EPS):
    """u.v / (|u||v| + eps) for two vectors, as a scalar tensor."""
    if u.shape != v.shape or u.ndim != 1 or u.shape[0] < 1:
        raise DimensionError(f"cosine_similarity needs equal 1-D shapes, got {u.shape}, {v.shape}")
    return reshape(row_cosine(reshape(u, (1, -1)), reshape(v, (1, -1)), eps), ())


# ---------------------------------------------------------------------------
# optimisation


class AdamW:
    """Adam with decoupled weight decay over a fixed parameter list."""

    def __init__(self, params, lr=1.75e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        b1, b2 = self.betas
        for p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {p.name or p.shape} has no gradient")
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adamw_step(params, state):
    """Functional form: apply one AdamW update held in ``state`` to ``params``."""
    if list(params) != state.params:
        raise ContractError("parameters are not registered with this optimizer state")
    state.step()


# ---------------------------------------------------------------------------
# verification


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_difference_check(f, x, step=1e-5, indices=None, floor=1e-6):
    """Max relative error between tape and central-difference gradients.

    ``f`` maps the leaf tensor ``x`` to a scalar tensor. ``indices`` limits
    the check to some flat coordinates of ``x``.
    """
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    coords = range(x.size) if indices is None else indices
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, float(relative_error(analytic[i], numeric, floor)))
    return worst


def numeric_gradient(f, x, step=1e-5):
    flat = x.data.reshape(-1)
    out = np.zeros(x.size)
    with no_grad():
        for i in range(x.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(x).item()
            flat[i] = orig - step
            fm = f(x).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)

