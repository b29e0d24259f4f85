"""Config-driven continual-learning runs and the reports built from them."""

import csv
import dataclasses
import hashlib
import io
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import EMPTY, AdapterStore, Route
from .backbone import Backbone, ModelConfig, Sampling
from .decision import decision_rows, default_no_as, run_decision_stage
from .evaluation import EvalReport, RMatrix, compare_methods, evaluate_task
from .tasks import make_stream, materialize
from .tensor import ContractError
from .training import PretrainConfig, TrainConfig, pretrain_backbone
from .tuning import TuneConfig, generate_pseudo_samples, plan_replay, tune

log = logging.getLogger(__name__)

METHODS = ("finetune", "adaptercl", "acm", "safm", "safm_no_lw")
CHECKPOINT_VERSION = 1
DECISION_FIELDS = ["task", "layer", "candidates", "lambdas", "selected", "kind"]
TRAIN_FIELDS = ["task", "phase", "epoch", "ce_loss", "layerwise_loss", "replay_samples"]


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "similar"
    n_tasks: int = 5
    seeds: list = field(default_factory=lambda: [0])
    method: str = "safm"
    model: dict = field(default_factory=dict)
    alpha: float = 0.11
    beta: float = 0.08
    strict_alpha_beta: bool = True
    warmup_epochs: int = 3
    search_epochs: int = 3
    tune_epochs: int = 12
    replay_ratio: float = 0.2
    replay_scope: str = "sharing"
    replay_top_k: int = 8
    w_lw: object = None  # None: 0.4 for similar streams, 0.1 for dissimilar
    w_gen: float = 0.25
    no_as_layers: object = None  # None: one mid-stack layer
    lr: float = 1e-2
    arch_lr: float = 0.05
    batch_size: int = 16
    weight_decay: float = 0.0
    backbone_mode: str = "pretrain"
    pretrain_steps: int = 1500
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    n_train: int = 256
    n_valid: int = 64
    n_test: int = 64
    domain_size: int = 12
    n_content: int = 64
    output_dir: str = "runs"
    save_checkpoints: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.scenario not in ("similar", "dissimilar"):
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.backbone_mode not in ("pretrain", "first_task"):
            raise ConfigError(f"unknown backbone_mode {self.backbone_mode!r}")
        if self.replay_scope not in ("sharing", "all"):
            raise ConfigError(f"unknown replay_scope {self.replay_scope!r}")
        unknown = set(self.model) - {f.name for f in dataclasses.fields(ModelConfig)}
        if unknown or "vocab_size" in self.model:
            raise ConfigError(f"bad model keys: {sorted(unknown | ({'vocab_size'} & set(self.model)))}")

    @property
    def layerwise_weight(self):
        if self.method in ("safm_no_lw", "acm", "finetune", "adaptercl"):
            return 0.0
        if self.w_lw is not None:
            return float(self.w_lw)
        return 0.4 if self.scenario == "similar" else 0.1

    def no_as(self, n_layers):
        if self.no_as_layers is None:
            return default_no_as(n_layers)
        layers = tuple(int(l) for l in self.no_as_layers)
        if any(not 0 <= l < n_layers for l in layers):
            raise ConfigError(f"no_as_layers {layers} outside [0, {n_layers})")
        return layers

    @classmethod
    def from_dict(cls, blob):
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(blob) - set(fields)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        for key, value in blob.items():
            _check_type(key, value, getattr(defaults, key))
        return cls(**blob)

    def to_dict(self):
        return dataclasses.asdict(self)


def _check_type(key, value, default):
    if default is None:
        ok = value is None or isinstance(value, (int, float, list))
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r} has wrong type {type(value).__name__}")


def load_config(path, **overrides):
    with open(path) as fh:
        blob = json.load(fh)
    blob.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(blob)


# ---------------------------------------------------------------------------
# backbone preparation

_PRETRAINED = {}


def _pretrain_key(mcfg, vocab, pcfg, seed):
    blob = json.dumps([mcfg.to_dict(), dataclasses.asdict(vocab), dataclasses.asdict(pcfg), seed],
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrained_backbone(mcfg, vocab, pcfg, seed, cache_dir=None):
    """A frozen backbone pretrained on generic copy data (memoised per key)."""
    key = _pretrain_key(mcfg, vocab, pcfg, seed)
    bb = Backbone(mcfg, seed)
    state = _PRETRAINED.get(key)
    path = Path(cache_dir) / f"backbone_{key}.npz" if cache_dir else None
    if state is None and path is not None and path.exists():
        with np.load(path) as z:
            state = {k: z[k].copy() for k in z.files}
    if state is None:
        log.info("pretraining backbone %s (%d steps)", key, pcfg.steps)
        pretrain_backbone(bb, vocab, pcfg, seed)
        state = {k: t.data.copy() for k, t in bb.params.items()}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(path, **state)
    _PRETRAINED[key] = state
    for k, t in bb.params.items():
        t.data = state[k].copy()
    bb.set_trainable(False)
    return bb


# ---------------------------------------------------------------------------
# one seed


def _csv_text(rows, fields):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _history_rows(task, phase, history):
    return [
        {"task": task, "phase": phase, "epoch": i, "ce_loss": float(v), "layerwise_loss": 0.0,
         "replay_samples": 0}
        for i, v in enumerate(history)
    ]


def _baseline_rows(task, route, kind):
    return [
        {"task": task, "layer": l, "candidates": "", "lambdas": "",
         "selected": "E" if e is EMPTY else str(e), "kind": kind}
        for l, e in enumerate(route.entries)
    ]


class SeedRun:
    """State of one (config, seed) run; ``step(task)`` advances one task."""

    def __init__(self, cfg, seed, out_dir=None):
        self.cfg = cfg
        self.seed = seed
        self.out_dir = Path(out_dir) if out_dir else None
        self.stream = make_stream(
            cfg.scenario, cfg.n_tasks, seed, domain_size=cfg.domain_size,
            n_content=cfg.n_content, n_train=cfg.n_train, n_valid=cfg.n_valid, n_test=cfg.n_test,
        )
        self.vocab = self.stream.vocab
        self.mcfg = ModelConfig(**cfg.model, vocab_size=self.vocab.size)
        longest = max(2 * s.max_len + 3 for s in self.stream.specs)
        if self.mcfg.max_seq < longest:
            raise ConfigError(f"max_seq={self.mcfg.max_seq} shorter than longest sample {longest}")
        self.data = [materialize(s) for s in self.stream.specs]
        if cfg.backbone_mode == "pretrain":
            pcfg = PretrainConfig(steps=cfg.pretrain_steps, batch_size=cfg.pretrain_batch,
                                  lr=cfg.pretrain_lr)
            cache = Path(cfg.output_dir) / "_cache" if cfg.output_dir else None
            self.backbone = pretrained_backbone(self.mcfg, self.vocab, pcfg, seed, cache)
        else:
            self.backbone = Backbone(self.mcfg, seed)
        self.store = AdapterStore(self.mcfg.d_model, self.mcfg.adapter_dim, self.mcfg.n_layers,
                                  self.mcfg.adapter_init_std)
        self.R = RMatrix(cfg.n_tasks)
        self.decisions = []
        self.train_log = []
        self.replay_log = []
        self.shared_route = None

    # -- training configs -------------------------------------------------

    def _train_cfg(self):
        c = self.cfg
        return TrainConfig(lr=c.lr, weight_decay=c.weight_decay, batch_size=c.batch_size,
                           w_gen=c.w_gen)

    def _tune_cfg(self, epochs, w_lw):
        c = self.cfg
        return TuneConfig(epochs=epochs, w_lw=w_lw, w_gen=c.w_gen, lr=c.lr,
                          batch_size=c.batch_size, weight_decay=c.weight_decay)

    def _rng(self, task, phase):
        return np.random.default_rng([self.seed, task, phase])

    # -- per task ---------------------------------------------------------

    def step(self, task):
        cfg = self.cfg
        if cfg.backbone_mode == "first_task":
            self.backbone.set_trainable(task == 0)
        train = self.data[task]["train"]
        total_epochs = cfg.warmup_epochs + cfg.search_epochs + cfg.tune_epochs
        if cfg.method in ("safm", "safm_no_lw", "acm"):
            route, fusion = run_decision_stage(
                self.backbone, self.store, task, train, self.vocab, self._train_cfg(),
                self._rng(task, 1), alpha=cfg.alpha, beta=cfg.beta,
                warmup_epochs=cfg.warmup_epochs, search_epochs=cfg.search_epochs,
                no_as=cfg.no_as(self.mcfg.n_layers), include_empty=cfg.method != "acm",
                strict=cfg.strict_alpha_beta, arch_lr=cfg.arch_lr, seed=self.seed,
            )
            self.decisions += decision_rows(fusion, route)
            plan = plan_replay(route, self.store.prior_routes(task), len(train),
                               cfg.replay_ratio, cfg.replay_scope)
            sampling = Sampling(top_k=cfg.replay_top_k, temperature=1.0, greedy_after_sep=True)
            rng = self._rng(task, 2)
            pseudo = {
                t: generate_pseudo_samples(self.backbone, self.store, self.vocab, t, plan.count,
                                           rng, sampling)
                for t in plan.targets
            }
            self.replay_log.append({"task": task, "targets": plan.targets, "count": plan.count,
                                    "generated": {t: len(v) for t, v in pseudo.items()}})
            history = tune(self.backbone, self.store, route, train, pseudo, self.vocab,
                           self._tune_cfg(cfg.tune_epochs, cfg.layerwise_weight), self._rng(task, 3))
        else:
            if cfg.method == "adaptercl" or self.shared_route is None:
                ids = tuple(self.store.new_adapter(l, self.seed, task)
                            for l in range(self.mcfg.n_layers))
                kind = "new"
                if cfg.method == "finetune":
                    self.shared_route = ids
            else:
                ids, kind = self.shared_route, "reuse"
            route = Route(task, ids)
            self.store.register_route(route)
            self.decisions += _baseline_rows(task, route, kind)
            history = tune(self.backbone, self.store, route, train, {}, self.vocab,
                           self._tune_cfg(total_epochs, 0.0), self._rng(task, 3))
        for row in history:
            self.train_log.append(dict(row, phase="tune"))
        self.R.set_row(task, [self.evaluate(j) for j in range(task + 1)])
        if self.out_dir is not None:
            self.persist(task)

    def evaluate(self, task, split="test"):
        route = self.store.routes[task]
        return evaluate_task(self.backbone, self.store, route, self.data[task][split], self.vocab)

    def learnable_params(self):
        bb = self.backbone.param_count() if self.cfg.backbone_mode == "first_task" else 0
        return self.store.count_learnable_params(backbone_params=bb)

    def report(self):
        return EvalReport.from_rmatrix(self.cfg.method, self.seed, self.R,
                                       self.learnable_params(), self.cfg.scenario)

    # -- persistence ------------------------------------------------------

    def persist(self, task):
        d = self.out_dir
        d.mkdir(parents=True, exist_ok=True)
        (d / "r_matrix.csv").write_text(self.R.to_csv())
        (d / "decision_log.csv").write_text(_csv_text(self.decisions, DECISION_FIELDS))
        (d / "train_log.csv").write_text(_csv_text(self.train_log, TRAIN_FIELDS))
        if self.cfg.save_checkpoints:
            ck = d / "checkpoints"
            ck.mkdir(exist_ok=True)
            (ck / f"task_{task}.json").write_text(json.dumps(self.checkpoint(task)))

    def checkpoint(self, task):
        return {
            "version": CHECKPOINT_VERSION,
            "task": task,
            "model": self.mcfg.to_dict(),
            "backbone": self.backbone.state_dict(),
            "store": self.store.to_dict(),
            "shared_route": None if self.shared_route is None else [a.uid for a in self.shared_route],
        }

    def restore(self, blob):
        if blob.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {blob.get('version')}")
        self.backbone.load_state_dict(blob["backbone"])
        self.store = AdapterStore.from_dict(blob["store"])
        if blob["shared_route"] is not None:
            by_uid = {a.uid: a for a in self.store.adapters}
            self.shared_route = tuple(by_uid[u] for u in blob["shared_route"])

    def resume(self):
        """Reload the newest checkpoint with matching logs; returns next task index."""
        d = self.out_dir
        if d is None or not (d / "r_matrix.csv").exists():
            return 0
        R = RMatrix.from_csv((d / "r_matrix.csv").read_text())
        done = R.completed_rows
        ck = d / "checkpoints" / f"task_{done - 1}.json"
        if done == 0 or not ck.exists():
            return 0
        self.restore(json.loads(ck.read_text()))
        self.R = R
        self.decisions = [r for r in _read_csv(d / "decision_log.csv") if int(r["task"]) < done]
        self.train_log = [r for r in _read_csv(d / "train_log.csv") if int(r["task"]) < done]
        for rows in (self.decisions, self.train_log):
            for r in rows:
                for k in ("task", "layer", "epoch", "replay_samples"):
                    if k in r:
                        r[k] = int(r[k])
                for k in ("ce_loss", "layerwise_loss"):
                    if k in r:
                        r[k] = float(r[k])
        return done


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_seed(cfg, seed, out_dir=None, resume=False):
    run = SeedRun(cfg, seed, out_dir)
    start = run.resume() if resume else 0
    for task in range(start, cfg.n_tasks):
        log.info("%s seed=%d task %d/%d", cfg.method, seed, task + 1, cfg.n_tasks)
        try:
            run.step(task)
        except Exception as exc:
            raise RuntimeError(f"{cfg.method} seed={seed} failed at task {task}: {exc}") from exc
    report = run.report()
    if run.out_dir is not None:
        (run.out_dir / "report.json").write_text(report.to_json() + "\n")
        (run.out_dir / "report.md").write_text(compare_methods([report])[1])
    return report, run


def run_dir(cfg, seed):
    return Path(cfg.output_dir) / cfg.scenario / cfg.method / f"seed_{seed}"


def run(cfg, resume=False):
    """Every seed of ``cfg``; artifacts land under ``output_dir``."""
    reports = []
    for seed in cfg.seeds:
        out = run_dir(cfg, seed)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        report, _ = run_seed(cfg, seed, out, resume)
        reports.append(report)
    return reports


# ---------------------------------------------------------------------------
# aggregation


def _fmt(v):
    return "N/A" if v is None else f"{100 * v:.2f}"


def report(directory):
    """Aggregate every run below ``directory`` into report.md and CSVs.

    The output is a pure function of the run artifacts.
    """
    directory = Path(directory)
    paths = sorted(p for p in directory.rglob("report.json"))
    if not paths:
        raise ContractError(f"no completed runs under {directory}")
    groups = defaultdict(list)
    selections = defaultdict(lambda: defaultdict(lambda: defaultdict(int)))
    for p in paths:
        rep = EvalReport(**json.loads(p.read_text()))
        groups[(rep.scenario, rep.method)].append(rep)
        dl = p.parent / "decision_log.csv"
        if dl.exists():
            for row in _read_csv(dl):
                selections[(rep.scenario, rep.method)][int(row["layer"])][row["kind"]] += 1

    summary = []
    for (scenario, method), reps in sorted(groups.items()):
        scores = np.array([r.score for r in reps])
        bwts = [r.bwt for r in reps if r.bwt is not None]
        summary.append(
            {
                "scenario": scenario,
                "method": method,
                "n_seeds": len(reps),
                "score_mean": float(scores.mean()),
                "score_std": float(scores.std()),
                "bwt_mean": float(np.mean(bwts)) if bwts else None,
                "bwt_std": float(np.std(bwts)) if bwts else None,
                "learnable_params_mean": float(np.mean([r.learnable_params for r in reps])),
            }
        )
    kinds = ["empty", "reuse", "new", "no_as"]
    freq = []
    for (scenario, method), layers in sorted(selections.items()):
        for layer in sorted(layers):
            counts = layers[layer]
            total = sum(counts.values())
            freq.append({"scenario": scenario, "method": method, "layer": layer,
                         **{k: counts.get(k, 0) / total for k in kinds}})

    md = ["# Continual-learning report", "",
          "| scenario | method | seeds | Score (%) | BWT (%) | Learn. Param. |",
          "|---|---|---|---|---|---|"]
    for s in summary:
        bwt = "N/A" if s["bwt_mean"] is None else f"{_fmt(s['bwt_mean'])} ± {_fmt(s['bwt_std'])}"
        md.append(f"| {s['scenario']} | {s['method']} | {s['n_seeds']} | "
                  f"{_fmt(s['score_mean'])} ± {_fmt(s['score_std'])} | {bwt} | "
                  f"{s['learnable_params_mean']:.0f} |")
    md += ["", "## Per-layer selection frequencies", "",
           "| scenario | method | layer | empty | reuse | new | no_as |", "|---|---|---|---|---|---|---|"]
    for f in freq:
        md.append(f"| {f['scenario']} | {f['method']} | {f['layer']} | "
                  + " | ".join(f"{f[k]:.2f}" for k in kinds) + " |")
    (directory / "report.md").write_text("\n".join(md) + "\n")
    (directory / "report_summary.csv").write_text(_csv_text(summary, list(summary[0])))
    (directory / "selection_frequencies.csv").write_text(
        _csv_text(freq, ["scenario", "method", "layer", *kinds]) if freq else ""
    )
    return summary, freq
