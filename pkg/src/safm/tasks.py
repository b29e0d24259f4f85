"""Synthetic task streams over a shared token vocabulary.

Token layout: ``PAD=0, SEP=1, EOS=2, BOS=3``, then one task token per task
slot, then the content tokens that domain vocabularies are carved from.
``BOS`` prefixes task-agnostic pretraining samples (task id ``-1``). Every
pattern has an exact oracle (``apply_pattern``), so evaluation is exact
match.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

PAD, SEP, EOS, BOS = 0, 1, 2, 3
N_SPECIAL = 4

PATTERNS = ("copy", "reverse", "sort", "classify-intent", "extract-slot", "verbalize")
N_INTENTS = 3


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    n_tasks: int
    n_content: int = 64

    @property
    def size(self):
        return N_SPECIAL + self.n_tasks + self.n_content

    def task_token(self, task):
        if task == -1:
            return BOS
        if not 0 <= task < self.n_tasks:
            raise ConfigurationError(f"task {task} outside the {self.n_tasks} task slots")
        return N_SPECIAL + task

    def content(self, i):
        return N_SPECIAL + self.n_tasks + i

    def is_content(self, tok):
        return N_SPECIAL + self.n_tasks <= tok < self.size


@dataclass(frozen=True)
class Sample:
    task: int
    x: tuple
    y: tuple

    def tokens(self, vocab):
        return [vocab.task_token(self.task), *self.x, SEP, *self.y, EOS]

    def to_json(self):
        return {"task": self.task, "x": list(self.x), "y": list(self.y)}


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    pattern: str
    domain: tuple
    seed: int
    n_train: int = 256
    n_valid: int = 64
    n_test: int = 64
    min_len: int = 4
    max_len: int = 6

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigurationError(f"unknown pattern {self.pattern!r}")
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ConfigurationError("split sizes must be >= 1")
        if self.pattern in ("verbalize", "classify-intent") and len(self.domain) < 2 * N_INTENTS + 1:
            raise ConfigurationError(f"domain too small for {self.pattern}")


@dataclass(frozen=True)
class Stream:
    scenario: str
    seed: int
    specs: tuple
    order: tuple
    vocab: Vocab = field(default_factory=lambda: Vocab(0))

    def __len__(self):
        return len(self.specs)

    def to_manifest(self):
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "order": list(self.order),
            "vocab": asdict(self.vocab),
            "specs": [dict(asdict(s), domain=list(s.domain)) for s in self.specs],
        }

    @classmethod
    def from_manifest(cls, blob):
        specs = tuple(TaskSpec(**dict(s, domain=tuple(s["domain"]))) for s in blob["specs"])
        return cls(blob["scenario"], blob["seed"], specs, tuple(blob["order"]), Vocab(**blob["vocab"]))


# ---------------------------------------------------------------------------
# pattern rules


def _verbalize_lexicon(domain):
    half = len(domain) // 2
    return dict(zip(domain[:half], domain[half : 2 * half]))


def _intent_parts(domain):
    labels = domain[:N_INTENTS]
    keywords = domain[N_INTENTS : 2 * N_INTENTS]
    fillers = domain[2 * N_INTENTS :]
    return labels, keywords, fillers


def apply_pattern(spec, x):
    """The unique correct output for input ``x`` under ``spec``."""
    x = tuple(x)
    p = spec.pattern
    if p == "copy":
        return x
    if p == "reverse":
        return x[::-1]
    if p == "sort":
        return tuple(sorted(x))
    if p == "verbalize":
        lex = _verbalize_lexicon(spec.domain)
        return tuple(lex[t] for t in x)
    if p == "classify-intent":
        labels, keywords, _ = _intent_parts(spec.domain)
        hits = [keywords.index(t) for t in x if t in keywords]
        if len(hits) != 1:
            raise ValueError("classify-intent input needs exactly one keyword")
        return (labels[hits[0]],)
    if p == "extract-slot":
        marker = spec.domain[0]
        i = x.index(marker)
        return (x[i + 1],)
    raise ConfigurationError(p)


def _draw_input(spec, rng):
    d = spec.domain
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    if spec.pattern in ("copy", "reverse", "sort"):
        return tuple(int(t) for t in rng.choice(d, size=n))
    if spec.pattern == "verbalize":
        sources = list(_verbalize_lexicon(d))
        return tuple(int(t) for t in rng.choice(sources, size=n))
    if spec.pattern == "classify-intent":
        _, keywords, fillers = _intent_parts(d)
        body = [int(t) for t in rng.choice(fillers, size=n - 1)]
        body.insert(int(rng.integers(0, n)), int(rng.choice(keywords)))
        return tuple(body)
    # extract-slot: marker followed by the value to extract
    body = [int(t) for t in rng.choice(d[1:], size=n - 1)]
    body.insert(int(rng.integers(0, n - 1)), int(d[0]))
    return tuple(body)


def materialize(spec):
    """Disjoint train/valid/test splits; every input appears at most once."""
    rng = np.random.default_rng([spec.seed, spec.task_id])
    sizes = {"train": spec.n_train, "valid": spec.n_valid, "test": spec.n_test}
    need = sum(sizes.values())
    seen, xs = set(), []
    attempts = 0
    while len(xs) < need:
        attempts += 1
        if attempts > 200 * need:
            raise ConfigurationError(f"task {spec.task_id}: input space too small for {need} samples")
        x = _draw_input(spec, rng)
        if x in seen:
            continue
        seen.add(x)
        xs.append(x)
    out, start = {}, 0
    for name, n in sizes.items():
        out[name] = [Sample(spec.task_id, x, apply_pattern(spec, x)) for x in xs[start : start + n]]
        start += n
    return out


# ---------------------------------------------------------------------------
# streams


def _domains(n_tasks, domain_size, vocab, rng):
    if n_tasks * domain_size > vocab.n_content:
        raise ConfigurationError(
            f"{n_tasks} tasks x {domain_size} tokens exceed {vocab.n_content} content tokens"
        )
    perm = rng.permutation(vocab.n_content)
    return [
        tuple(sorted(vocab.content(int(i)) for i in perm[k * domain_size : (k + 1) * domain_size]))
        for k in range(n_tasks)
    ]


def _stream(scenario, patterns, seed, domain_size, n_content, sizes):
    n = len(patterns)
    vocab = Vocab(n, n_content)
    rng = np.random.default_rng([seed, 0 if scenario == "similar" else 1])
    domains = _domains(n, domain_size, vocab, rng)
    order = tuple(int(i) for i in rng.permutation(n))
    specs = tuple(
        TaskSpec(task_id=pos, pattern=patterns[k], domain=domains[k], seed=seed, **sizes)
        for pos, k in enumerate(order)
    )
    return Stream(scenario, seed, specs, order, vocab)


def make_similar_stream(n_tasks=5, seed=0, domain_size=12, n_content=64, **sizes):
    """Verbalize tasks over pairwise-disjoint domain vocabularies."""
    return _stream("similar", ["verbalize"] * n_tasks, seed, domain_size, n_content, sizes)


def make_dissimilar_stream(n_tasks=5, seed=0, domain_size=12, n_content=64, **sizes):
    """Tasks cycling through distinct patterns, each on its own domain."""
    rng = np.random.default_rng([seed, 2])
    cycle = [PATTERNS[i] for i in rng.permutation(len(PATTERNS))]
    patterns = [cycle[i % len(cycle)] for i in range(n_tasks)]
    return _stream("dissimilar", patterns, seed, domain_size, n_content, sizes)


def make_stream(scenario, n_tasks=5, seed=0, **kw):
    if scenario == "similar":
        return make_similar_stream(n_tasks, seed, **kw)
    if scenario == "dissimilar":
        return make_dissimilar_stream(n_tasks, seed, **kw)
    raise ConfigurationError(f"unknown scenario {scenario!r}")


def write_jsonl(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_jsonl(path):
    with open(path) as fh:
        return [
            Sample(d["task"], tuple(d["x"]), tuple(d["y"]))
            for d in (json.loads(line) for line in fh if line.strip())
        ]
