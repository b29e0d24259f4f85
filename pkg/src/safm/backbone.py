"""A small pre-norm decoder-only transformer with adapter hook points.

Layers are indexed from 0. The hidden trace holds ``L + 1`` states: the
post-embedding state followed by the post-adapter output of every layer.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .adapters import EMPTY, Route
from .tasks import EOS, SEP
from .tensor import (
    DimensionError,
    Tensor,
    add,
    causal_softmax,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    transpose,
)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_model: int = 32
    n_heads: int = 2
    vocab_size: int = 72
    max_seq: int = 32
    adapter_dim: int = 8
    init_std: float = 0.1
    adapter_init_std: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.n_layers, self.d_model, self.vocab_size, self.max_seq, self.adapter_dim) < 1:
            raise ValueError("model dimensions must be positive")

    def to_dict(self):
        return asdict(self)


def backbone_param_count(cfg):
    d, V = cfg.d_model, cfg.vocab_size
    per_layer = 12 * d * d + 13 * d
    return V * d + cfg.max_seq * d + cfg.n_layers * per_layer + 2 * d + d * V


@dataclass(frozen=True)
class Sampling:
    """Decoding policy.

    ``top_k=0`` is greedy. With ``greedy_after_sep`` the answer part after
    SEP is always decoded greedily, whatever ``top_k`` says.
    """

    top_k: int = 0
    temperature: float = 1.0
    greedy_after_sep: bool = False


class Backbone:
    def __init__(self, cfg, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 7])
        d, std = cfg.d_model, cfg.init_std
        self.params = {}

        def p(name, shape, scale=std, zero=False, one=False):
            if one:
                arr = np.ones(shape)
            elif zero:
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, scale, shape)
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        p("tok", (cfg.vocab_size, d))
        p("pos", (cfg.max_seq, d))
        resid = std / np.sqrt(2 * cfg.n_layers)
        for l in range(cfg.n_layers):
            p(f"l{l}.ln1.g", (d,), one=True)
            p(f"l{l}.ln1.b", (d,), zero=True)
            p(f"l{l}.qkv.w", (d, 3 * d))
            p(f"l{l}.qkv.b", (3 * d,), zero=True)
            p(f"l{l}.proj.w", (d, d), scale=resid)
            p(f"l{l}.proj.b", (d,), zero=True)
            p(f"l{l}.ln2.g", (d,), one=True)
            p(f"l{l}.ln2.b", (d,), zero=True)
            p(f"l{l}.fc1.w", (d, 4 * d))
            p(f"l{l}.fc1.b", (4 * d,), zero=True)
            p(f"l{l}.fc2.w", (4 * d, d), scale=resid)
            p(f"l{l}.fc2.b", (d,), zero=True)
        p("lnf.g", (d,), one=True)
        p("lnf.b", (d,), zero=True)
        p("out", (d, cfg.vocab_size))

    def parameters(self):
        return list(self.params.values())

    def param_count(self):
        return sum(t.size for t in self.params.values())

    def set_trainable(self, flag):
        for t in self.params.values():
            t.requires_grad = flag
            t.grad = None

    @property
    def trainable(self):
        return next(iter(self.params.values())).requires_grad

    # -- forward pieces --------------------------------------------------

    def embed(self, tokens):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be (batch, seq), got {tokens.shape}")
        T = tokens.shape[1]
        if T > self.cfg.max_seq:
            raise DimensionError(f"sequence length {T} exceeds max_seq={self.cfg.max_seq}")
        P = self.params
        return add(embedding(P["tok"], tokens), embedding(P["pos"], np.arange(T)))

    def forward_layer(self, l, h):
        """Transformer block ``l`` (0-based), before any adapter."""
        cfg, P = self.cfg, self.params
        if not 0 <= l < cfg.n_layers:
            raise IndexError(f"layer {l} outside [0, {cfg.n_layers})")
        if h.ndim != 3 or h.shape[-1] != cfg.d_model:
            raise DimensionError(f"hidden state must be (batch, seq, {cfg.d_model}), got {h.shape}")
        B, T, d = h.shape
        H = cfg.n_heads
        dh = d // H
        a = layer_norm(h, P[f"l{l}.ln1.g"], P[f"l{l}.ln1.b"])
        qkv = add(matmul(a, P[f"l{l}.qkv.w"]), P[f"l{l}.qkv.b"])
        qkv = transpose(reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = matmul(causal_softmax(scores), v)
        att = reshape(transpose(att, (0, 2, 1, 3)), (B, T, d))
        h = add(h, add(matmul(att, P[f"l{l}.proj.w"]), P[f"l{l}.proj.b"]))
        f = layer_norm(h, P[f"l{l}.ln2.g"], P[f"l{l}.ln2.b"])
        f = gelu(add(matmul(f, P[f"l{l}.fc1.w"]), P[f"l{l}.fc1.b"]))
        return add(h, add(matmul(f, P[f"l{l}.fc2.w"]), P[f"l{l}.fc2.b"]))

    def head(self, h):
        P = self.params
        return matmul(layer_norm(h, P["lnf.g"], P["lnf.b"]), P["out"])

    def forward(self, tokens, mix):
        """Run the stack with ``mix(l, f)`` producing each post-adapter state."""
        h = self.embed(tokens)
        trace = [h]
        for l in range(self.cfg.n_layers):
            h = mix(l, self.forward_layer(l, h))
            trace.append(h)
        return self.head(h), trace

    def forward_with_route(self, tokens, route, store):
        store.check_route(route)
        return self.forward(tokens, lambda l, f: store.apply(route[l], f))

    # -- decoding --------------------------------------------------------

    def generate_batch(self, prefixes, route, store, max_len, sampling=Sampling(), rng=None):
        """Decode continuations for equal-length prefixes.

        Returns one list per row holding the new tokens, truncated after the
        first EOS; no row is longer than ``max_len``.
        """
        seqs = np.asarray(prefixes, dtype=np.int64)
        B, P0 = seqs.shape
        max_len = min(max_len, self.cfg.max_seq - P0)
        if sampling.top_k and rng is None:
            raise ValueError("sampling with top_k needs an rng")
        done = np.zeros(B, dtype=bool)
        after_sep = np.any(seqs == SEP, axis=1)
        with no_grad():
            for _ in range(max(max_len, 0)):
                logits, _ = self.forward_with_route(seqs, route, store)
                last = logits.data[:, -1, :]
                nxt = np.argmax(last, axis=1)
                if sampling.top_k:
                    sampled = _top_k_sample(last, sampling.top_k, sampling.temperature, rng)
                    use = ~after_sep if sampling.greedy_after_sep else np.ones(B, dtype=bool)
                    nxt = np.where(use, sampled, nxt)
                nxt = np.where(done, EOS, nxt)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                after_sep |= nxt == SEP
                done |= nxt == EOS
                if done.all():
                    break
        out = []
        for row in seqs[:, P0:].tolist():
            if EOS in row:
                row = row[: row.index(EOS) + 1]
            out.append(row)
        return out

    def generate(self, prefix, route, store, max_len, sampling=Sampling(), rng=None):
        if sampling.top_k == 0:
            rng = None
        return self.generate_batch([list(prefix)], route, store, max_len, sampling, rng)[0]

    # -- serialization ---------------------------------------------------

    def state_dict(self):
        return {k: t.data.tolist() for k, t in self.params.items()}

    def load_state_dict(self, state):
        for k, v in state.items():
            self.params[k].data = np.asarray(v, dtype=np.float64)


def _top_k_sample(logits, k, temperature, rng):
    k = min(k, logits.shape[1])
    idx = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(logits, idx, axis=1) / temperature
    top = np.exp(top - top.max(axis=1, keepdims=True))
    top /= top.sum(axis=1, keepdims=True)
    u = rng.random(logits.shape[0])
    choice = (np.cumsum(top, axis=1) < u[:, None]).sum(axis=1)
    choice = np.minimum(choice, k - 1)
    return idx[np.arange(logits.shape[0]), choice]


def empty_route(task, n_layers):
    return Route(task, (EMPTY,) * n_layers)
