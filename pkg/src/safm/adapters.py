"""Bottleneck adapters, per-task routes and the store that owns both."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, gelu, matmul


class RoutingError(LookupError):
    pass


class _Empty:
    """The identity adapter. Selecting it means no module at that layer."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "EMPTY"

    def __reduce__(self):
        return (_Empty, ())


EMPTY = _Empty()


@dataclass(frozen=True)
class AdapterId:
    uid: int
    layer: int
    task: int

    def __str__(self):
        return f"A{self.uid}"


@dataclass(frozen=True)
class Route:
    task: int
    entries: tuple

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, layer):
        return self.entries[layer]

    def adapter_ids(self):
        return {e for e in self.entries if e is not EMPTY}

    def describe(self):
        return "[" + ", ".join("E" if e is EMPTY else str(e) for e in self.entries) + "]"


class Adapter:
    def __init__(self, d_model, bottleneck, rng, init_std=0.02):
        self.down = Tensor(rng.normal(0.0, init_std, (d_model, bottleneck)), requires_grad=True)
        self.b_down = Tensor(np.zeros(bottleneck), requires_grad=True)
        self.up = Tensor(np.zeros((bottleneck, d_model)), requires_grad=True)
        self.b_up = Tensor(np.zeros(d_model), requires_grad=True)

    def parameters(self):
        return [self.down, self.b_down, self.up, self.b_up]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def __call__(self, x):
        hidden = gelu(add(matmul(x, self.down), self.b_down))
        return add(x, add(matmul(hidden, self.up), self.b_up))


def adapter_param_count(d_model, bottleneck):
    return 2 * d_model * bottleneck + bottleneck + d_model


class AdapterStore:
    """Owns every adapter by id plus the routes of all registered tasks."""

    def __init__(self, d_model, bottleneck, n_layers, init_std=0.02):
        self.d_model = d_model
        self.bottleneck = bottleneck
        self.n_layers = n_layers
        self.init_std = init_std
        self.adapters = {}
        self.routes = {}
        self._next_uid = 0

    def __contains__(self, aid):
        return aid in self.adapters

    def new_adapter(self, layer, seed, task=-1):
        aid = AdapterId(self._next_uid, layer, task)
        self._next_uid += 1
        rng = np.random.default_rng([seed, aid.uid])
        self.adapters[aid] = Adapter(self.d_model, self.bottleneck, rng, self.init_std)
        return aid

    def get(self, aid):
        try:
            return self.adapters[aid]
        except KeyError:
            raise RoutingError(f"unknown adapter {aid}") from None

    def apply(self, aid, x):
        if aid is EMPTY:
            return x
        return self.get(aid)(x)

    def parameters(self, ids):
        params = []
        for aid in sorted(ids, key=lambda a: a.uid):
            params.extend(self.get(aid).parameters())
        return params

    def set_trainable(self, ids):
        """Only adapters in ``ids`` record gradients."""
        ids = set(ids)
        for aid, adapter in self.adapters.items():
            for p in adapter.parameters():
                p.requires_grad = aid in ids
                p.grad = None

    # -- routes ----------------------------------------------------------

    def check_route(self, route):
        if len(route) != self.n_layers:
            raise RoutingError(f"route has {len(route)} entries, model has {self.n_layers} layers")
        for e in route.entries:
            if e is not EMPTY and e not in self.adapters:
                raise RoutingError(f"route for task {route.task} references missing adapter {e}")

    def register_route(self, route):
        self.check_route(route)
        self.routes[route.task] = route

    def prior_routes(self, task):
        return [r for t, r in self.routes.items() if t != task]

    def unique_adapters_at_layer(self, layer, routes=None):
        """Distinct non-empty ids used at ``layer``, in first-use order."""
        routes = self.routes.values() if routes is None else routes
        return unique_adapters_at_layer(layer, routes)

    def collect_garbage(self):
        """Drop adapters that no registered route references."""
        used = set()
        for r in self.routes.values():
            used |= r.adapter_ids()
        for aid in [a for a in self.adapters if a not in used]:
            del self.adapters[aid]

    def count_learnable_params(self, routes=None, backbone_params=0):
        routes = self.routes.values() if routes is None else routes
        return count_learnable_params(routes, self, backbone_params)

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        return {
            "d_model": self.d_model,
            "bottleneck": self.bottleneck,
            "n_layers": self.n_layers,
            "init_std": self.init_std,
            "next_uid": self._next_uid,
            "adapters": [
                {
                    "uid": a.uid,
                    "layer": a.layer,
                    "task": a.task,
                    "params": [p.data.tolist() for p in ad.parameters()],
                }
                for a, ad in self.adapters.items()
            ],
            "routes": [
                {"task": r.task, "entries": [None if e is EMPTY else e.uid for e in r.entries]}
                for r in self.routes.values()
            ],
        }

    @classmethod
    def from_dict(cls, blob):
        store = cls(blob["d_model"], blob["bottleneck"], blob["n_layers"], blob["init_std"])
        store._next_uid = blob["next_uid"]
        by_uid = {}
        rng = np.random.default_rng(0)
        for a in blob["adapters"]:
            aid = AdapterId(a["uid"], a["layer"], a["task"])
            ad = Adapter(store.d_model, store.bottleneck, rng)
            for p, v in zip(ad.parameters(), a["params"]):
                p.data = np.asarray(v, dtype=np.float64)
            store.adapters[aid] = ad
            by_uid[aid.uid] = aid
        for r in blob["routes"]:
            entries = tuple(EMPTY if u is None else by_uid[u] for u in r["entries"])
            store.routes[r["task"]] = Route(r["task"], entries)
        return store


def unique_adapters_at_layer(layer, routes):
    out = []
    for r in routes:
        e = r.entries[layer]
        if e is not EMPTY and e not in out:
            out.append(e)
    return out


def count_learnable_params(routes, store, backbone_params=0):
    """Parameters of distinct referenced adapters, shared ones counted once."""
    ids = set()
    for r in routes:
        ids |= r.adapter_ids()
    return sum(store.get(a).param_count() for a in ids) + backbone_params
