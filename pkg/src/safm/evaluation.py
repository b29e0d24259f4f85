"""R-matrix bookkeeping, Score/BWT and method comparison tables."""

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from .tasks import EOS, SEP
from .tensor import ContractError


def evaluate_task(backbone, store, route, samples, vocab):
    """Fraction of samples whose greedy answer matches ``y`` exactly."""
    if not samples:
        return 0.0
    groups = defaultdict(list)
    for s in samples:
        groups[len(s.x)].append(s)
    correct = 0
    for _, group in sorted(groups.items()):
        prefixes = [[vocab.task_token(s.task), *s.x, SEP] for s in group]
        budget = max(len(s.y) for s in group) + 1
        outs = backbone.generate_batch(prefixes, route, store, budget)
        for s, out in zip(group, outs):
            correct += out == [*s.y, EOS]
    return correct / len(samples)


class RMatrix:
    """Lower-triangular accuracies; row i is the model after task i."""

    def __init__(self, n_tasks):
        self.n = n_tasks
        self.values = np.full((n_tasks, n_tasks), np.nan)

    def set_row(self, i, accs):
        accs = list(accs)
        if len(accs) != i + 1:
            raise ContractError(f"row {i} needs {i + 1} entries, got {len(accs)}")
        for j, a in enumerate(accs):
            if not 0.0 <= a <= 1.0:
                raise ContractError(f"accuracy {a} outside [0, 1]")
            self.values[i, j] = a

    def row(self, i):
        return [float(v) for v in self.values[i, : i + 1]]

    @property
    def completed_rows(self):
        return int(sum(not np.isnan(self.values[i, i]) for i in range(self.n)))

    @classmethod
    def from_rows(cls, rows):
        r = cls(len(rows))
        for i, row in enumerate(rows):
            r.set_row(i, row)
        return r

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task"] + [f"task_{j}" for j in range(self.n)])
        for i in range(self.completed_rows):
            w.writerow([i] + [repr(v) for v in self.row(i)] + [""] * (self.n - i - 1))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        rows = list(csv.reader(io.StringIO(text)))
        n = len(rows[0]) - 1
        r = cls(n)
        for line in rows[1:]:
            i = int(line[0])
            r.set_row(i, [float(v) for v in line[1 : i + 2]])
        return r


def _final_row(R):
    values = R.values if isinstance(R, RMatrix) else np.asarray(R, dtype=float)
    t = values.shape[0]
    last = values[t - 1, :t]
    if np.isnan(last).any():
        raise ContractError("final row of the R-matrix is incomplete")
    return values, last


def score(R):
    """Mean accuracy over all tasks after the final task."""
    _, last = _final_row(R)
    return float(np.mean(last))


def bwt(R):
    """Mean of R[N, i] - R[i, i] over earlier tasks; None when t = 1."""
    values, last = _final_row(R)
    t = values.shape[0]
    if t < 2:
        return None
    return float(sum(last[i] - values[i, i] for i in range(t - 1)) / (t - 1))


@dataclass
class EvalReport:
    method: str
    seed: int
    score: float
    bwt: object
    learnable_params: int
    diagonal: list
    r_matrix: list = field(default_factory=list)
    scenario: str = ""

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_rmatrix(cls, method, seed, R, learnable_params, scenario=""):
        rows = [R.row(i) for i in range(R.n)]
        return cls(
            method=method,
            seed=seed,
            score=score(R),
            bwt=bwt(R),
            learnable_params=int(learnable_params),
            diagonal=[float(R.values[i, i]) for i in range(R.n)],
            r_matrix=rows,
            scenario=scenario,
        )


def compare_methods(reports):
    """Rank reports by Score; returns (rows, markdown, csv_text).

    All reports must come from the same scenario and seed. Ties keep a stable
    order by method tag.
    """
    reports = list(reports)
    keys = {(r.scenario, r.seed) for r in reports}
    if len(keys) > 1:
        raise ContractError(f"reports come from different streams: {sorted(keys)}")
    ranked = sorted(reports, key=lambda r: (-r.score, r.method))
    rows = [
        {
            "rank": i + 1,
            "method": r.method,
            "score": r.score,
            "bwt": r.bwt,
            "learnable_params": r.learnable_params,
        }
        for i, r in enumerate(ranked)
    ]
    md = ["| rank | method | Score (%) | BWT (%) | Learn. Param. |", "|---|---|---|---|---|"]
    for row in rows:
        b = "N/A" if row["bwt"] is None else f"{100 * row['bwt']:.2f}"
        md.append(
            f"| {row['rank']} | {row['method']} | {100 * row['score']:.2f} | {b} | {row['learnable_params']} |"
        )
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]) if rows else ["rank"], lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return rows, "\n".join(md) + "\n", buf.getvalue()
