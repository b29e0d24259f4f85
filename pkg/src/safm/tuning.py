"""Fine-tuning a selected route with pseudo-replay and the layer-wise loss.

Prior tasks that share an adapter with the current route are replayed
from samples the model generates itself, decoded through each prior
task's own route. The layer-wise term penalises cosine similarity between
consecutive post-adapter states on non-empty layers.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .adapters import EMPTY
from .backbone import Sampling
from .tasks import EOS, SEP, Sample
from .tensor import AdamW, Tensor, backward, mul, no_grad, row_cosine, tensor_sum
from .training import lm_loss, make_batches

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def replay_count(gamma, n_current):
    """round(gamma * N), halves rounded up."""
    return int(math.floor(gamma * n_current + 0.5))


def replay_targets(route, prior_routes):
    """Prior tasks whose route shares at least one non-empty adapter."""
    mine = route.adapter_ids()
    return {r.task for r in prior_routes if r.task != route.task and mine & r.adapter_ids()}


@dataclass(frozen=True)
class ReplayPlan:
    targets: tuple
    count: int
    gamma: float


def plan_replay(route, prior_routes, n_current, gamma, scope="sharing"):
    if scope == "sharing":
        targets = replay_targets(route, prior_routes)
    elif scope == "all":
        targets = {r.task for r in prior_routes if r.task != route.task}
    else:
        raise ValueError(f"unknown replay scope {scope!r}")
    return ReplayPlan(tuple(sorted(targets)), replay_count(gamma, n_current), gamma)


def parse_generated(task, tokens, vocab, max_seq=None):
    """Turn ``x SEP y EOS`` (continuation after the task token) into a Sample.

    Returns None for anything malformed.
    """
    if not tokens or tokens[-1] != EOS or tokens.count(SEP) != 1 or tokens.count(EOS) != 1:
        return None
    body = tokens[:-1]
    i = body.index(SEP)
    x, y = body[:i], body[i + 1 :]
    if not x or not y or not all(vocab.is_content(t) for t in x + y):
        return None
    if max_seq is not None and len(x) + len(y) + 3 > max_seq:
        return None
    return Sample(task, tuple(x), tuple(y))


def generate_pseudo_samples(backbone, store, vocab, task, count, rng, sampling=None,
                            batch_size=64):
    """Exactly ``count`` well-formed samples decoded under ``task``'s route.

    Draws at most ``5 * count`` candidates. If some but too few parse,
    accepted ones are resampled to fill up; if none parse, a warning is
    logged and an empty list returned.
    """
    if count <= 0:
        return []
    sampling = sampling or Sampling(top_k=8, temperature=1.0, greedy_after_sep=True)
    route = store.routes[task]
    prefix = vocab.task_token(task)
    max_len = backbone.cfg.max_seq - 1
    accepted, attempts = [], 0
    while len(accepted) < count and attempts < 5 * count:
        n = min(batch_size, 5 * count - attempts)
        outs = backbone.generate_batch([[prefix]] * n, route, store, max_len, sampling, rng)
        attempts += n
        for out in outs:
            s = parse_generated(task, out, vocab, backbone.cfg.max_seq)
            if s is not None and len(accepted) < count:
                accepted.append(s)
    if not accepted:
        log.warning("replay degraded: no well-formed pseudo-samples for task %d", task)
        return []
    while len(accepted) < count:
        accepted.append(accepted[int(rng.integers(len(accepted)))])
    return accepted


def layerwise_terms(trace, route, mask=None):
    """Per-layer mean cosine between consecutive states; None on empty layers."""
    terms = []
    for l, entry in enumerate(route.entries):
        if entry is EMPTY:
            terms.append(None)
            continue
        cos = row_cosine(trace[l + 1], trace[l])
        if mask is None:
            w = np.full(cos.shape, 1.0 / cos.size)
        else:
            w = np.asarray(mask, dtype=np.float64)
            w = w / w.sum()
        terms.append(tensor_sum(mul(cos, w)))
    return terms


def layerwise_loss(trace, route, mask=None):
    """Sum over non-empty layers of mean cos(h_l, h_{l-1}); exactly 0 if all empty."""
    if len(trace) != len(route) + 1:
        raise ValueError(f"trace has {len(trace)} states for {len(route)} layers")
    terms = [t for t in layerwise_terms(trace, route, mask) if t is not None]
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


@dataclass(frozen=True)
class TuneConfig:
    epochs: int = 12
    w_lw: float = 0.4
    w_gen: float = 0.25
    lr: float = 1e-2
    batch_size: int = 16
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.w_lw < 0:
            raise ValueError("layer-wise loss weight must be >= 0")


def tune(backbone, store, route, samples, pseudo, vocab, cfg, rng):
    """Fine-tune every adapter on ``route`` (plus the backbone if trainable).

    ``pseudo`` maps prior task id to its pseudo-samples, which are run
    through that task's own route. The layer-wise term only applies to
    current-task batches. Returns one log dict per epoch.
    """
    ids = route.adapter_ids()
    store.set_trainable(ids)
    params = store.parameters(ids) + (backbone.parameters() if backbone.trainable else [])
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay) if params else None
    replay_n = sum(len(v) for v in pseudo.values())
    history, step = [], 0
    for epoch in range(cfg.epochs):
        batches = make_batches(samples, vocab, cfg.batch_size, rng)
        for t in sorted(pseudo):
            if pseudo[t]:
                batches += make_batches(pseudo[t], vocab, cfg.batch_size, rng)
        order = rng.permutation(len(batches))
        ce_sum = lw_sum = 0.0
        n_cur = 0
        for bi in order:
            batch = batches[bi]
            step += 1
            own = batch.task == route.task
            r = route if own else store.routes[batch.task]
            logits, trace = backbone.forward_with_route(batch.inputs, r, store)
            loss = lm_loss(logits, batch, cfg.w_gen)
            ce = loss.item()
            if own:
                n_cur += 1
                if cfg.w_lw:
                    lw = layerwise_loss(trace, route, batch.valid)
                    lw_sum += lw.item()
                    loss = loss + cfg.w_lw * lw
            if not np.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss at tuning step {step}")
            ce_sum += ce
            if opt is None:
                continue
            opt.zero_grad()
            backward(loss)
            for p in params:
                if p.grad is None:
                    p.zero_grad()
            opt.step()
        history.append(
            {
                "task": route.task,
                "epoch": epoch,
                "ce_loss": ce_sum / max(len(batches), 1),
                "layerwise_loss": lw_sum / max(n_cur, 1),
                "replay_samples": replay_n,
            }
        )
    return history


def mean_layer_cosine(backbone, store, route, samples, vocab, batch_size=64):
    """Average consecutive-layer cosine over non-empty layers (no graph)."""
    vals = []
    with no_grad():
        for batch in make_batches(samples, vocab, batch_size):
            _, trace = backbone.forward_with_route(batch.inputs, route, store)
            for t in layerwise_terms(trace, route, batch.valid):
                if t is not None:
                    vals.append(t.item())
    return float(np.mean(vals)) if vals else 0.0
