"""Fused numeric kernels with a compiled fast path.

The Cython extension ``_ckernels`` is used when it was built at install
time; otherwise the numpy fallback ``_pykernels`` is selected. Setting
``SAFM_KERNELS=python`` in the environment forces the fallback, and
:func:`use_backend` switches at runtime (tests and the benchmark use it).

All wrappers accept arrays of any memory layout and hand contiguous
float64 buffers to the backend.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_impl = _pykernels
backend = "python"


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel backend by name; returns the previous name."""
    global _impl, backend
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    previous = backend
    _impl = _BACKENDS[name]
    backend = name
    return previous


use_backend(os.environ.get("SAFM_KERNELS") or ("cython" if _ckernels is not None else "python"))


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def layer_norm_forward(x, gamma, beta, eps):
    """Row-wise layer norm of a 2-D array; returns (y, xhat, rstd)."""
    return _impl.layer_norm_forward(_c(x), _c(gamma), _c(beta), float(eps))


def layer_norm_backward(gy, xhat, rstd, gamma):
    return _impl.layer_norm_backward(_c(gy), _c(xhat), _c(rstd), _c(gamma))


def gelu_forward(x):
    x = _c(x)
    return _impl.gelu_forward(x.reshape(-1)).reshape(x.shape)


def gelu_backward(x, gy):
    x = _c(x)
    return _impl.gelu_backward(x.reshape(-1), _c(gy).reshape(-1)).reshape(x.shape)


def causal_softmax_forward(s):
    """Softmax over the last axis of (..., T, T) scores under a causal mask."""
    s = _c(s)
    T = s.shape[-1]
    return _impl.causal_softmax_forward(s.reshape(-1, T, T)).reshape(s.shape)


def causal_softmax_backward(p, gp):
    p = _c(p)
    T = p.shape[-1]
    out = _impl.causal_softmax_backward(p.reshape(-1, T, T), _c(gp).reshape(-1, T, T))
    return out.reshape(p.shape)


def cross_entropy_forward(logits, targets, weights):
    """Weighted NLL over rows of (n, V) logits; returns (loss, probs)."""
    return _impl.cross_entropy_forward(
        _c(logits), np.ascontiguousarray(targets, dtype=np.int64), _c(weights)
    )


def cross_entropy_backward(probs, targets, weights, g):
    return _impl.cross_entropy_backward(
        _c(probs), np.ascontiguousarray(targets, dtype=np.int64), _c(weights), float(g)
    )


def row_cosine_forward(u, v, eps):
    """Cosine per row of two (n, d) arrays; returns (cos, dot, |u|, |v|)."""
    return _impl.row_cosine_forward(_c(u), _c(v), float(eps))


def row_cosine_backward(u, v, dot, nu, nv, eps, g):
    return _impl.row_cosine_backward(_c(u), _c(v), _c(dot), _c(nu), _c(nv), float(eps), _c(g))
