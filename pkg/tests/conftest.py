import sys

import numpy as np
import pytest

from safm.adapters import AdapterStore
from safm.backbone import Backbone, ModelConfig
from safm.tasks import Vocab


@pytest.fixture
def small_cfg():
    return ModelConfig(n_layers=3, d_model=8, n_heads=2, vocab_size=23, max_seq=16, adapter_dim=3,
                       init_std=0.3, adapter_init_std=0.3)


@pytest.fixture
def vocab():
    return Vocab(n_tasks=3, n_content=16)


@pytest.fixture
def model(small_cfg):
    return Backbone(small_cfg, seed=0)


@pytest.fixture
def store(small_cfg):
    return AdapterStore(small_cfg.d_model, small_cfg.adapter_dim, small_cfg.n_layers, init_std=0.3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_adapter(store, aid, rng, scale=0.3):
    """Give an adapter non-zero up-projections so it is not the identity."""
    for p in store.get(aid).parameters():
        p.data = rng.normal(0.0, scale, p.shape)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
