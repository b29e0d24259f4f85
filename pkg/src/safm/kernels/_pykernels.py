"""Pure numpy implementations of the fused kernels.

Every function takes and returns float64 arrays. Shapes follow the Cython
module exactly so the two are interchangeable.
"""

import numpy as np

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def layer_norm_forward(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layer_norm_backward(gy, xhat, rstd, gamma):
    ggamma = np.sum(gy * xhat, axis=0)
    gbeta = gy.sum(axis=0)
    gxhat = gy * gamma
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, ggamma, gbeta


def gelu_forward(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    return 0.5 * x * (1.0 + t)


def gelu_backward(x, gy):
    t = np.tanh(_GELU_C * (x + _GELU_A * x ** 3))
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def causal_softmax_forward(s):
    """Row softmax over the last axis of (n, T, T) with j > i masked out."""
    T = s.shape[-1]
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    z = np.where(mask, -np.inf, s)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_backward(p, gp):
    return p * (gp - np.sum(gp * p, axis=-1, keepdims=True))


def cross_entropy_forward(logits, targets, weights):
    """Weighted token NLL: sum_i w_i * (logsumexp(logits_i) - logits_i[t_i])."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    se = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(se))[:, 0]
    rows = np.arange(logits.shape[0])
    nll = lse - logits[rows, targets]
    return float(np.dot(weights, nll)), e / se


def cross_entropy_backward(probs, targets, weights, g):
    out = probs * (g * weights)[:, None]
    out[np.arange(probs.shape[0]), targets] -= g * weights
    return out


def row_cosine_forward(u, v, eps):
    dot = np.sum(u * v, axis=1)
    nu = np.sqrt(np.sum(u * u, axis=1))
    nv = np.sqrt(np.sum(v * v, axis=1))
    return dot / (nu * nv + eps), dot, nu, nv


def row_cosine_backward(u, v, dot, nu, nv, eps, g):
    den = nu * nv + eps
    # d|u|/du = u/|u|, taken as 0 at u = 0
    su = np.divide(nv, nu, out=np.zeros_like(nu), where=nu > 0)
    sv = np.divide(nu, nv, out=np.zeros_like(nv), where=nv > 0)
    a = (g / den)[:, None]
    b = (g * dot / (den * den))[:, None]
    gu = a * v - b * su[:, None] * u
    gv = a * u - b * sv[:, None] * v
    return gu, gv
