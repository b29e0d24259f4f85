"""Batching and the language-model objective shared by every stage.

A sample is encoded as ``[task] x SEP y EOS``. Positions predicting ``y``
and ``EOS`` carry the answer loss; positions predicting ``x`` and ``SEP``
carry the generation loss that lets the model emit pseudo-samples later.
"""

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterStore
from .backbone import empty_route
from .tasks import PAD, SEP, Sample
from .tensor import AdamW, ContractError, backward, weighted_nll


@dataclass
class Batch:
    inputs: np.ndarray  # (B, T) token ids
    targets: np.ndarray  # (B, T) next-token ids
    answer_mask: np.ndarray  # (B, T) bool
    gen_mask: np.ndarray  # (B, T) bool
    task: int

    @property
    def valid(self):
        return self.answer_mask | self.gen_mask

    def __len__(self):
        return self.inputs.shape[0]


def encode_batch(samples, vocab):
    if not samples:
        raise ContractError("cannot batch an empty sample list")
    seqs = [s.tokens(vocab) for s in samples]
    T = max(len(s) for s in seqs) - 1
    B = len(seqs)
    inputs = np.full((B, T), PAD, dtype=np.int64)
    targets = np.full((B, T), PAD, dtype=np.int64)
    answer = np.zeros((B, T), dtype=bool)
    gen = np.zeros((B, T), dtype=bool)
    for i, seq in enumerate(seqs):
        n = len(seq) - 1
        inputs[i, :n] = seq[:-1]
        targets[i, :n] = seq[1:]
        sep = seq.index(SEP)
        # target index j predicts seq[j + 1]; SEP sits at seq[sep]
        gen[i, : sep] = True
        answer[i, sep:n] = True
    return Batch(inputs, targets, answer, gen, samples[0].task)


def make_batches(samples, vocab, batch_size, rng=None):
    """Split into batches, shuffled when ``rng`` is given; one task per batch."""
    order = np.arange(len(samples)) if rng is None else rng.permutation(len(samples))
    return [
        encode_batch([samples[i] for i in order[k : k + batch_size]], vocab)
        for k in range(0, len(samples), batch_size)
    ]


def lm_loss(logits, batch, w_gen):
    """Mean answer NLL plus ``w_gen`` times mean generation NLL."""
    weights = batch.answer_mask / max(int(batch.answer_mask.sum()), 1)
    if w_gen and batch.gen_mask.any():
        weights = weights + w_gen * batch.gen_mask / int(batch.gen_mask.sum())
    if not weights.any():
        raise ContractError("degenerate batch: no supervised positions")
    return weighted_nll(logits, batch.targets, weights)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-3
    weight_decay: float = 0.0
    batch_size: int = 16
    w_gen: float = 0.25


@dataclass(frozen=True)
class PretrainConfig:
    """Task-agnostic copy pretraining over the whole content vocabulary."""

    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    min_len: int = 4
    max_len: int = 6


def pretrain_backbone(backbone, vocab, cfg, seed, w_gen=0.25):
    """Train every backbone weight on ``BOS x SEP x EOS`` sequences.

    Stands in for a pretrained language model: afterwards every content
    token has a trained embedding and output row. Returns the loss curve.
    """
    rng = np.random.default_rng([seed, 99])
    store = AdapterStore(backbone.cfg.d_model, backbone.cfg.adapter_dim, backbone.cfg.n_layers)
    route = empty_route(-1, backbone.cfg.n_layers)
    backbone.set_trainable(True)
    opt = AdamW(backbone.parameters(), lr=cfg.lr, weight_decay=0.0)
    losses = []
    for _ in range(cfg.steps):
        samples = []
        for _ in range(cfg.batch_size):
            n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            x = tuple(vocab.content(int(t)) for t in rng.integers(0, vocab.n_content, n))
            samples.append(Sample(-1, x, x))
        batch = encode_batch(samples, vocab)
        logits, _ = backbone.forward_with_route(batch.inputs, route, store)
        loss = lm_loss(logits, batch, w_gen)
        opt.zero_grad()
        backward(loss)
        opt.step()
        losses.append(loss.item())
    backbone.set_trainable(False)
    return losses
