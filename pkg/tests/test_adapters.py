import json

import numpy as np
import pytest

from safm.adapters import (
    EMPTY,
    AdapterStore,
    Route,
    RoutingError,
    adapter_param_count,
    count_learnable_params,
    unique_adapters_at_layer,
)
from safm.backbone import Backbone, ModelConfig
from safm.tensor import Tensor, finite_difference_check, tensor_sum

from conftest import randomize_adapter


def make_store(L=4, d=32, m=8):
    return AdapterStore(d, m, L, init_std=0.1)


def test_fresh_adapter_is_identity(store, rng):
    aid = store.new_adapter(0, seed=0)
    x = Tensor(rng.normal(size=(2, 3, store.d_model)))
    assert np.array_equal(store.apply(aid, x).data, x.data)


def test_empty_is_bit_identical(store, rng):
    x = Tensor(rng.normal(size=(2, 3, store.d_model)))
    assert store.apply(EMPTY, x) is x


def test_ids_are_unique(store):
    ids = {store.new_adapter(0, seed=0) for _ in range(5)}
    assert len(ids) == 5


def test_param_count_552():
    s = make_store()
    aid = s.new_adapter(0, seed=0)
    assert s.get(aid).param_count() == adapter_param_count(32, 8) == 552


def test_unknown_id(store):
    other = AdapterStore(store.d_model, store.bottleneck, store.n_layers)
    other.new_adapter(0, 0)
    with pytest.raises(RoutingError):
        store.apply(other.new_adapter(0, 0), Tensor(np.zeros((1, 1, store.d_model))))


def test_adapter_grad_matches_fd(store, rng):
    aid = store.new_adapter(0, seed=0)
    randomize_adapter(store, aid, rng)
    x = Tensor(rng.normal(size=(2, 3, store.d_model)))
    c = rng.normal(size=x.shape)
    for p in store.get(aid).parameters():
        err = finite_difference_check(lambda _: tensor_sum(store.apply(aid, x) * c), p)
        assert err <= 1e-4


class TestUnique:
    def test_no_priors(self):
        assert unique_adapters_at_layer(0, []) == []

    def test_dedup_first_use_order(self):
        s = make_store()
        a1, a2 = s.new_adapter(0, 0), s.new_adapter(0, 0)
        routes = [Route(t, (a,) + (EMPTY,) * 3) for t, a in enumerate([a1, a1, a2])]
        assert unique_adapters_at_layer(0, routes) == [a1, a2]

    def test_empty_excluded(self):
        s = make_store()
        a1 = s.new_adapter(0, 0)
        routes = [Route(0, (EMPTY,) * 4), Route(1, (a1,) + (EMPTY,) * 3)]
        assert s.unique_adapters_at_layer(0, routes) == [a1]


class TestCounting:
    def test_all_distinct(self):
        s = make_store()
        for t in range(2):
            s.register_route(Route(t, tuple(s.new_adapter(l, 0, t) for l in range(4))))
        assert s.count_learnable_params() == 4416

    def test_full_reuse(self):
        s = make_store()
        r0 = Route(0, tuple(s.new_adapter(l, 0, 0) for l in range(4)))
        s.register_route(r0)
        s.register_route(Route(1, r0.entries))
        assert count_learnable_params(s.routes.values(), s) == 2208

    def test_empty_route(self):
        s = make_store()
        s.register_route(Route(0, (EMPTY,) * 4))
        assert s.count_learnable_params() == 0

    def test_backbone_added_when_trainable(self):
        s = make_store()
        s.register_route(Route(0, (EMPTY,) * 4))
        assert s.count_learnable_params(backbone_params=100) == 100

    def test_monotone_as_tasks_arrive(self, rng):
        s = make_store()
        counts = [0]
        for t in range(6):
            entries = []
            for l in range(4):
                pool = s.unique_adapters_at_layer(l)
                choice = rng.integers(3)
                if choice == 0 or not pool:
                    entries.append(s.new_adapter(l, 0, t) if choice else EMPTY)
                else:
                    entries.append(pool[rng.integers(len(pool))])
            s.register_route(Route(t, tuple(entries)))
            counts.append(s.count_learnable_params())
            added = any(e is not EMPTY and e.task == t for e in entries)
            assert counts[-1] >= counts[-2]
            assert (counts[-1] > counts[-2]) == added


def test_shared_adapter_changes_every_sharer():
    cfg = ModelConfig(n_layers=2, d_model=8, n_heads=2, vocab_size=12, max_seq=6)
    bb = Backbone(cfg, 0)
    s = AdapterStore(8, 3, 2, init_std=0.3)
    shared = s.new_adapter(0, 0)
    r0 = Route(0, (shared, EMPTY))
    r1 = Route(1, (shared, s.new_adapter(1, 0)))
    toks = np.arange(10).reshape(2, 5) % 12
    before = [bb.forward_with_route(toks, r, s)[0].data for r in (r0, r1)]
    s.get(shared).up.data += np.random.default_rng(0).normal(0, 0.5, (3, 8))
    after = [bb.forward_with_route(toks, r, s)[0].data for r in (r0, r1)]
    assert all(not np.allclose(a, b) for a, b in zip(before, after))


def test_route_validation():
    s = make_store()
    with pytest.raises(RoutingError):
        s.register_route(Route(0, (EMPTY,) * 3))


def test_garbage_collection():
    s = make_store()
    keep = s.new_adapter(0, 0)
    drop = s.new_adapter(1, 0)
    s.register_route(Route(0, (keep, EMPTY, EMPTY, EMPTY)))
    s.collect_garbage()
    assert keep in s and drop not in s


def test_serialization_roundtrip(rng):
    s = make_store()
    r = Route(0, (s.new_adapter(0, 0), EMPTY, s.new_adapter(2, 0), EMPTY))
    for a in r.adapter_ids():
        randomize_adapter(s, a, rng)
    s.register_route(r)
    t = AdapterStore.from_dict(json.loads(json.dumps(s.to_dict())))
    assert t.routes[0].describe() == r.describe()
    for a in r.adapter_ids():
        for p, q in zip(s.get(a).parameters(), t.get(a).parameters()):
            assert np.array_equal(p.data, q.data)
    assert t.new_adapter(0, 0).uid == s.new_adapter(0, 0).uid
