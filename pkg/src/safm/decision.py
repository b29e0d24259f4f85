"""Per-layer adapter search over {empty, reused, new} candidates.

A task first warms up a fresh adapter at every layer with hard routing.
Then each layer mixes the outputs of its candidates with softmax weights
whose logits start at ``[alpha, beta, ..., beta, -beta]``, so the empty
adapter is favoured over reuse and reuse over a new module. Logits and
the fresh adapters train jointly; the argmax picks the final route.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .adapters import EMPTY, Route, unique_adapters_at_layer
from .tensor import AdamW, Tensor, backward, mul, softmax, stack_sum
from .training import lm_loss, make_batches


class ConfigurationError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


def initial_logits(k, alpha, beta, include_empty=True):
    z = [beta] * k + [-beta]
    return np.array(([alpha] if include_empty else []) + z, dtype=np.float64)


def init_lambda(k, alpha, beta, strict=True, include_empty=True):
    """Initial fusion weights over ``k + 2`` candidates (``k + 1`` without empty).

    Equal to ``softmax(initial_logits(k, alpha, beta))``.
    """
    if k < 0:
        raise ConfigurationError("k must be non-negative")
    if strict and not alpha > beta > 0:
        raise ConfigurationError(f"need alpha > beta > 0, got alpha={alpha}, beta={beta}")
    z = initial_logits(k, alpha, beta, include_empty)
    e = np.exp(z - z.max())
    return e / e.sum()


def build_candidates(layer, prior_routes, new_id, include_empty=True):
    """``[EMPTY, mu_1 .. mu_k, new]`` for one layer."""
    head = [EMPTY] if include_empty else []
    return head + unique_adapters_at_layer(layer, prior_routes) + [new_id]


@dataclass
class FusionState:
    task: int
    new_route: Route
    candidates: list
    logits: list  # per layer: Tensor, or None on no-search layers
    no_as: frozenset = field(default_factory=frozenset)

    @property
    def n_layers(self):
        return len(self.candidates)

    def weights(self, layer):
        return softmax(self.logits[layer])

    def lambdas(self, layer):
        if self.logits[layer] is None:
            return None
        z = self.logits[layer].data
        e = np.exp(z - z.max())
        return e / e.sum()

    def parameters(self):
        return [z for z in self.logits if z is not None]

    def set_one_hot(self, layer, index):
        """Force the weights at ``layer`` onto a single candidate."""
        z = np.full(len(self.candidates[layer]), -1e4)
        z[index] = 0.0
        self.logits[layer].data = z


def make_fusion_state(store, task, new_route, alpha, beta, no_as=(), include_empty=True,
                      strict=True):
    priors = [r for t, r in store.routes.items() if t != task]
    no_as = frozenset(no_as)
    candidates, logits = [], []
    for l in range(store.n_layers):
        if l in no_as:
            candidates.append([new_route[l]])
            logits.append(None)
            continue
        cands = build_candidates(l, priors, new_route[l], include_empty)
        k = len(cands) - (2 if include_empty else 1)
        init_lambda(k, alpha, beta, strict, include_empty)  # validates alpha/beta
        candidates.append(cands)
        logits.append(Tensor(initial_logits(k, alpha, beta, include_empty), requires_grad=True,
                             name=f"z{l}"))
    return FusionState(task, new_route, candidates, logits, no_as)


def fused_forward(backbone, store, fusion, batch, w_gen=0.25):
    """Forward with each searched layer a weighted mix of its candidates."""

    def mix(l, f):
        if fusion.logits[l] is None:
            return store.apply(fusion.new_route[l], f)
        lam = fusion.weights(l)
        if np.isnan(lam.data).any():
            raise NumericError(f"fusion weights at layer {l} are NaN")
        terms = [mul(lam[i], store.apply(c, f)) for i, c in enumerate(fusion.candidates[l])]
        return stack_sum(terms)

    logits, trace = backbone.forward(batch.inputs, mix)
    return lm_loss(logits, batch, w_gen), trace


def warmup(backbone, store, route, samples, vocab, epochs, cfg, rng):
    """Train the fresh adapters of ``route`` with hard routing.

    Only adapters created for this task are trainable; returns mean loss
    per epoch.
    """
    if not samples:
        raise ValueError("warmup needs a non-empty dataset")
    fresh = [a for a in route.entries if a is not EMPTY and a.task == route.task]
    store.set_trainable(fresh)
    params = store.parameters(fresh) + (backbone.parameters() if backbone.trainable else [])
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for _ in range(epochs):
        total, n = 0.0, 0
        for batch in make_batches(samples, vocab, cfg.batch_size, rng):
            logits, _ = backbone.forward_with_route(batch.inputs, route, store)
            loss = lm_loss(logits, batch, cfg.w_gen)
            opt.zero_grad()
            backward(loss)
            opt.step()
            total += loss.item()
            n += 1
        history.append(total / n)
    return history


def run_architecture_search(backbone, store, fusion, samples, vocab, epochs, cfg, rng,
                            arch_lr=0.05):
    """Jointly train the fusion logits and the task's fresh adapters."""
    fresh = [a for a in fusion.new_route.entries if a is not EMPTY]
    store.set_trainable(fresh)
    params = store.parameters(fresh) + (backbone.parameters() if backbone.trainable else [])
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    arch = fusion.parameters()
    arch_opt = AdamW(arch, lr=arch_lr, weight_decay=0.0) if arch else None
    history = []
    for _ in range(epochs):
        total, n = 0.0, 0
        for batch in make_batches(samples, vocab, cfg.batch_size, rng):
            loss, _ = fused_forward(backbone, store, fusion, batch, cfg.w_gen)
            opt.zero_grad()
            if arch_opt:
                arch_opt.zero_grad()
            backward(loss)
            for z in arch:
                if z.grad is None:
                    z.zero_grad()
            opt.step()
            if arch_opt:
                arch_opt.step()
            total += loss.item()
            n += 1
        history.append(total / n)
    return fusion


def select_route(fusion):
    """Argmax per layer; exact ties go to the earliest candidate.

    Candidate order is empty, reused (first-use order), new, so ties
    resolve toward sparsity.
    """
    entries = []
    for l in range(fusion.n_layers):
        if fusion.logits[l] is None:
            entries.append(fusion.new_route[l])
            continue
        lam = fusion.lambdas(l)
        if np.isnan(lam).any():
            raise NumericError(f"fusion weights at layer {l} are NaN")
        entries.append(fusion.candidates[l][int(np.argmax(lam))])
    return Route(fusion.task, tuple(entries))


def selection_kind(entry, new_id, searched=True):
    if not searched:
        return "no_as"
    if entry is EMPTY:
        return "empty"
    return "new" if entry == new_id else "reuse"


def decision_rows(fusion, route):
    rows = []
    for l in range(fusion.n_layers):
        lam = fusion.lambdas(l)
        rows.append(
            {
                "task": fusion.task,
                "layer": l,
                "candidates": ";".join("E" if c is EMPTY else str(c) for c in fusion.candidates[l]),
                "lambdas": "" if lam is None else ";".join(f"{v:.6f}" for v in lam),
                "selected": "E" if route[l] is EMPTY else str(route[l]),
                "kind": selection_kind(route[l], fusion.new_route[l], lam is not None),
            }
        )
    return rows


def run_decision_stage(backbone, store, task, samples, vocab, cfg, rng, *, alpha, beta,
                       warmup_epochs, search_epochs, no_as=(), include_empty=True, strict=True,
                       arch_lr=0.05, seed=0):
    """Warmup, search and selection for one task.

    Registers the selected route, drops unselected fresh adapters and
    returns ``(route, fusion_state)``.
    """
    new_route = Route(task, tuple(store.new_adapter(l, seed, task) for l in range(store.n_layers)))
    warmup(backbone, store, new_route, samples, vocab, warmup_epochs, cfg, rng)
    fusion = make_fusion_state(store, task, new_route, alpha, beta, no_as, include_empty, strict)
    run_architecture_search(backbone, store, fusion, samples, vocab, search_epochs, cfg, rng,
                            arch_lr)
    route = select_route(fusion)
    store.register_route(route)
    store.collect_garbage()
    return route, fusion


def default_no_as(n_layers):
    """One mid-stack layer exempt from search (0-based index)."""
    return (math.ceil(n_layers / 2),) if n_layers > 1 else ()

