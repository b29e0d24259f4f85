"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 50] [--steps 20]

Reports per-kernel microseconds at training-sized shapes and the wall time
of a full adapter training step (forward, backward, AdamW) per backend.
"""

import argparse
import timeit

import numpy as np

from safm import kernels
from safm.adapters import AdapterStore, Route
from safm.backbone import Backbone, ModelConfig
from safm.tasks import Sample, Vocab
from safm.tensor import AdamW, backward
from safm.training import encode_batch, lm_loss


def kernel_cases(rng, B=16, T=14, d=32, V=72, H=2):
    x = rng.normal(size=(B * T, d))
    g = rng.normal(size=(B * T, d))
    h = rng.normal(size=(B * T, 4 * d))
    s = rng.normal(size=(B * H, T, T))
    logits = rng.normal(size=(B * T, V))
    t = rng.integers(0, V, B * T)
    w = np.full(B * T, 1.0 / (B * T))
    ln = kernels.layer_norm_forward(x, np.ones(d), np.zeros(d), 1e-5)
    p = kernels.causal_softmax_forward(s)
    _, probs = kernels.cross_entropy_forward(logits, t, w)
    cos = kernels.row_cosine_forward(x, g, 1e-8)
    return {
        "layer_norm fwd": lambda: kernels.layer_norm_forward(x, np.ones(d), np.zeros(d), 1e-5),
        "layer_norm bwd": lambda: kernels.layer_norm_backward(g, ln[1], ln[2], np.ones(d)),
        "gelu fwd": lambda: kernels.gelu_forward(h),
        "gelu bwd": lambda: kernels.gelu_backward(h, h),
        "causal_softmax fwd": lambda: kernels.causal_softmax_forward(s),
        "causal_softmax bwd": lambda: kernels.causal_softmax_backward(p, s),
        "cross_entropy fwd": lambda: kernels.cross_entropy_forward(logits, t, w),
        "cross_entropy bwd": lambda: kernels.cross_entropy_backward(probs, t, w, 1.0),
        "row_cosine fwd": lambda: kernels.row_cosine_forward(x, g, 1e-8),
        "row_cosine bwd": lambda: kernels.row_cosine_backward(x, g, cos[1], cos[2], cos[3], 1e-8,
                                                              np.ones(B * T)),
    }


def train_step_fn(seed=0, batch_size=16):
    vocab = Vocab(5, 64)
    cfg = ModelConfig(vocab_size=vocab.size)
    bb = Backbone(cfg, seed)
    bb.set_trainable(False)
    store = AdapterStore(cfg.d_model, cfg.adapter_dim, cfg.n_layers, 0.1)
    route = Route(0, tuple(store.new_adapter(l, seed, 0) for l in range(cfg.n_layers)))
    store.register_route(route)
    store.set_trainable(route.adapter_ids())
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(batch_size):
        x = tuple(vocab.content(int(i)) for i in rng.integers(0, 64, 6))
        samples.append(Sample(0, x, x))
    batch = encode_batch(samples, vocab)
    opt = AdamW(store.parameters(route.adapter_ids()), lr=1e-3, weight_decay=0.0)

    def step():
        logits, _ = bb.forward_with_route(batch.inputs, route, store)
        opt.zero_grad()
        backward(lm_loss(logits, batch, 0.25))
        opt.step()

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--steps", type=int, default=20)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    original = kernels.backend
    timings, steps = {}, {}
    for name in backends:
        kernels.use_backend(name)
        cases = kernel_cases(np.random.default_rng(0))
        timings[name] = {
            k: min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat * 1e6
            for k, fn in cases.items()
        }
        step = train_step_fn()
        step()
        steps[name] = min(timeit.repeat(step, number=args.steps, repeat=3)) / args.steps * 1e3
    kernels.use_backend(original)

    header = f"{'kernel':22s}" + "".join(f"{b:>12s}" for b in backends)
    if len(backends) > 1:
        header += f"{'speedup':>10s}"
    print(header + "\n" + "-" * len(header))
    for k in timings[backends[0]]:
        row = f"{k:22s}" + "".join(f"{timings[b][k]:10.1f}us" for b in backends)
        if len(backends) > 1:
            row += f"{timings['python'][k] / timings['cython'][k]:9.1f}x"
        print(row)
    row = f"{'train step':22s}" + "".join(f"{steps[b]:10.2f}ms" for b in backends)
    if len(backends) > 1:
        row += f"{steps['python'] / steps['cython']:9.1f}x"
    print(row)


if __name__ == "__main__":
    main()
