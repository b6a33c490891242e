"""Filtered ranking metrics per query structure."""
from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import torch

from .query import EPFO_TEMPLATES, NEGATION_TEMPLATES, TEMPLATES

HITS_AT = (1, 3, 10)


def rank_answer(answer: int, distances, filter_out=()) -> int:
    """Pessimistic filtered rank: ties with the answer count against it."""
    filter_out = set(filter_out)
    if answer in filter_out:
        raise ValueError(f"answer {answer} is in the filter set")
    d = torch.as_tensor(distances)
    mask = torch.ones_like(d, dtype=torch.bool)
    drop = list(filter_out | {answer})
    mask[drop] = False
    return 1 + int((d[mask] <= d[answer]).sum())


def batch_ranks(distances: torch.Tensor, targets: list[int], known: set) -> list[int]:
    """Ranks for several targets of one query, each filtered against all other known answers."""
    d = distances
    keep = torch.ones_like(d, dtype=torch.bool)
    if known:
        keep[list(known)] = False
    ranks = []
    for a in targets:
        ranks.append(1 + int(((d <= d[a]) & keep).sum()))
    return ranks


@dataclass
class MetricsReport:
    per_structure: dict = field(default_factory=dict)   # name -> {"mrr", "hits@1", ..., "count"}

    @property
    def A_p(self) -> float | None:
        return _mean([self.per_structure[s]["mrr"] for s in EPFO_TEMPLATES if s in self.per_structure])

    @property
    def A_n(self) -> float | None:
        return _mean([self.per_structure[s]["mrr"] for s in NEGATION_TEMPLATES if s in self.per_structure])

    def to_dict(self) -> dict:
        return {"per_structure": self.per_structure, "A_p": self.A_p, "A_n": self.A_n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """Structures as columns (table layout), A_p/A_n appended; one row per metric."""
        cols = [s for s in TEMPLATES if s in self.per_structure]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *cols, "A_p", "A_n"])
        for metric in ("mrr", *(f"hits@{k}" for k in HITS_AT)):
            row = [metric, *(f"{self.per_structure[s][metric]:.6f}" for s in cols)]
            if metric == "mrr":
                row += [_fmt(self.A_p), _fmt(self.A_n)]
            else:
                row += ["", ""]
            w.writerow(row)
        w.writerow(["count", *(self.per_structure[s]["count"] for s in cols), "", ""])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, obj) -> "MetricsReport":
        return cls(dict(obj["per_structure"]))


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def _mean(xs):
    return sum(xs) / len(xs) if xs else None


def summarize(ranks_by_structure: dict[str, list[int]]) -> MetricsReport:
    report = MetricsReport()
    for s, ranks in ranks_by_structure.items():
        n = len(ranks)
        entry = {"mrr": sum(1.0 / r for r in ranks) / n, "count": n}
        for k in HITS_AT:
            entry[f"hits@{k}"] = sum(r <= k for r in ranks) / n
        report.per_structure[s] = entry
    return report


@torch.no_grad()
def collect_ranks(samples, scorer, target: str = "hard", batch_size: int = 256) -> dict[str, list[int]]:
    """Rank each target answer with every other known answer of its query filtered out.

    ``target="hard"`` ranks hard answers (filter: easy + other hard); ``"easy"`` ranks easy
    answers of training-style samples (filter: other easy).
    """
    by_structure = defaultdict(list)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        dist = scorer.distances([s.query.dag for s in chunk])
        for s, row in zip(chunk, dist):
            targets = sorted(s.hard_answers if target == "hard" else s.easy_answers)
            known = set(s.easy_answers) | set(s.hard_answers)
            by_structure[s.structure].extend(batch_ranks(row, targets, known))
    return dict(by_structure)


def evaluate(samples, scorer, target: str = "hard", batch_size: int = 256) -> MetricsReport:
    if not samples:
        raise ValueError("evaluate: empty dataset")
    ranks = collect_ranks(samples, scorer, target, batch_size)
    ranks = {s: r for s, r in ranks.items() if r}
    if not ranks:
        raise ValueError(f"evaluate: no {target} answers to rank")
    return summarize(ranks)


def random_ranking_expectation(candidate_counts: list[int]) -> tuple[float, float]:
    """Mean and standard error of MRR when each answer's rank is uniform on 1..n_i (independent)."""
    means, variances = [], []
    for n in candidate_counts:
        m = sum(1.0 / r for r in range(1, n + 1)) / n
        second = sum(1.0 / r ** 2 for r in range(1, n + 1)) / n
        means.append(m)
        variances.append(second - m * m)
    N = len(candidate_counts)
    return sum(means) / N, (sum(variances) ** 0.5) / N
