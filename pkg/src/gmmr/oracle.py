"""Symbolic answering, template grounding and query-answer dataset generation."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
from collections import defaultdict
from dataclasses import dataclass, field

from .kg import Graph, Splits, verify_containment
from .query import (Anchor, Intersection, Negation, Projection, QueryNode, StructureTemplate,
                    Union, EVAL_ONLY_TEMPLATES, TEMPLATES, get_template, parse, serialize)

logger = logging.getLogger(__name__)

RETRY_BUDGET = 128


class GenerationError(RuntimeError):
    def __init__(self, message: str, exhausted: dict | None = None):
        super().__init__(message)
        self.exhausted = exhausted or {}


def answer(q: QueryNode, g: Graph) -> frozenset:
    """Exact answer set by post-order evaluation. Complement is taken over all of g's entities."""
    if isinstance(q, Anchor):
        return frozenset((q.entity,))
    if isinstance(q, Projection):
        out = set()
        for s in answer(q.child, g):
            out.update(g.fwd_index.get((s, q.relation), ()))
        return frozenset(out)
    if isinstance(q, Intersection):
        sets = [answer(c, g) for c in q.children]
        return frozenset.intersection(*sets)
    if isinstance(q, Union):
        return frozenset().union(*(answer(c, g) for c in q.children))
    if isinstance(q, Negation):
        return frozenset(range(g.num_entities)) - answer(q.child, g)
    raise TypeError(f"not a query node: {q!r}")


@dataclass(frozen=True)
class GroundedQuery:
    dag: QueryNode
    structure: str


@dataclass
class QuerySample:
    query: GroundedQuery
    easy_answers: frozenset
    hard_answers: frozenset = frozenset()

    @property
    def structure(self) -> str:
        return self.query.structure

    def to_json(self) -> str:
        return json.dumps({
            "structure": self.query.structure,
            "query": serialize(self.query.dag),
            "easy_answers": sorted(self.easy_answers),
            "hard_answers": sorted(self.hard_answers),
        })

    @classmethod
    def from_json(cls, line: str, num_entities=None, num_relations=None) -> "QuerySample":
        obj = json.loads(line)
        dag = parse(obj["query"], num_entities, num_relations)
        return cls(GroundedQuery(dag, obj["structure"]), frozenset(obj["easy_answers"]),
                   frozenset(obj["hard_answers"]))


class _Reject(Exception):
    pass


class Sampler:
    """Top-down template grounding against one graph."""

    def __init__(self, g: Graph):
        self.g = g
        incoming: dict[int, dict[int, list[int]]] = defaultdict(lambda: defaultdict(list))
        for h, r, t in g.sorted_triples():
            incoming[t][r].append(h)
        self.incoming = {t: {r: hs for r, hs in sorted(by_rel.items())} for t, by_rel in incoming.items()}
        self.targets = sorted(self.incoming)

    def sample(self, t: StructureTemplate | str, rng: random.Random,
               retries: int = RETRY_BUDGET) -> GroundedQuery | None:
        if isinstance(t, str):
            t = get_template(t)
        if not self.targets:
            return None
        for _ in range(retries):
            try:
                root = rng.choice(self.targets)
                dag = self._assign(t.shape, root, rng)
            except _Reject:
                continue
            if root in answer(dag, self.g):
                return GroundedQuery(dag, t.name)
        return None

    def _assign(self, shape, target: int, rng: random.Random) -> QueryNode:
        tag = shape[0]
        if tag == "a":
            return Anchor(target)
        if tag == "p":
            by_rel = self.incoming.get(target)
            if not by_rel:
                raise _Reject
            rel = rng.choice(list(by_rel))
            head = rng.choice(by_rel[rel])
            return Projection(rel, self._assign(shape[1], head, rng))
        if tag == "n":
            # the negated branch is grounded around some other entity; the final
            # membership check rejects groundings whose complement drops the target
            other = rng.choice(self.targets)
            return Negation(self._assign(shape[1], other, rng))
        kids = [self._assign(c, target, rng) for c in shape[1:]]
        if len(set(kids)) < len(kids):
            raise _Reject
        return Intersection(kids) if tag == "i" else Union(kids)


def sample_query(t: StructureTemplate | str, g: Graph, rng: random.Random) -> GroundedQuery | None:
    """Returns None (rejection) when no consistent grounding is found within the retry budget."""
    return Sampler(g).sample(t, rng)


def template_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class GenerationStats:
    accepted: int = 0
    rejected: int = 0
    empty_hard: int = 0
    duplicates: int = 0
    non_monotone: int = 0


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        return getattr(self, name)


def _generate_split(template: StructureTemplate, count: int, small: Graph, large: Graph,
                    rng: random.Random, budget: int, require_hard: bool):
    sampler = Sampler(large)
    stats = GenerationStats()
    out, seen = [], set()
    attempts = 0
    while len(out) < count:
        if attempts >= budget:
            return out, stats, False
        attempts += 1
        gq = sampler.sample(template, rng)
        if gq is None:
            stats.rejected += 1
            continue
        if gq.dag in seen:
            stats.duplicates += 1
            continue
        full = answer(gq.dag, large)
        easy = answer(gq.dag, small) if require_hard else full
        hard = full - easy
        if require_hard and not hard:
            stats.empty_hard += 1
            continue
        if not easy <= full:
            # negation can drop an answer when edges are added; such a sample has no
            # consistent easy/hard partition, so it is skipped
            stats.non_monotone += 1
            continue
        seen.add(gq.dag)
        out.append(QuerySample(gq, easy, hard))
        stats.accepted += 1
    return out, stats, True


def generate_dataset(templates, counts, splits: Splits, seed: int,
                     retry_budget: int = RETRY_BUDGET) -> Dataset:
    """Sample train/valid/test query-answer sets.

    ``counts`` is an int or a per-template dict. Training samples are grounded and answered on
    the training graph; valid (test) samples are grounded on the validation (test) graph with
    easy answers from the next smaller graph and a non-empty hard remainder.
    Eval-only structures (ip, pi, 2u, up) are not emitted for training.
    """
    if not verify_containment(splits.train, splits.valid, splits.test):
        raise GenerationError("splits violate train <= valid <= test")
    unknown = [t for t in templates if t not in TEMPLATES]
    if unknown:
        raise GenerationError(f"unknown template {unknown[0]!r}")
    if isinstance(counts, int):
        counts = {t: counts for t in templates}
    ds = Dataset()
    exhausted = {}
    plan = (
        ("train", splits.train, splits.train, False),
        ("valid", splits.train, splits.valid, True),
        ("test", splits.valid, splits.test, True),
    )
    for name in templates:
        template = get_template(name)
        count = counts.get(name, 0)
        rng = random.Random(template_seed(seed, name))
        for split_name, small, large, require_hard in plan:
            if split_name == "train" and name in EVAL_ONLY_TEMPLATES:
                continue
            budget = retry_budget * max(count, 1)
            samples, stats, ok = _generate_split(template, count, small, large, rng, budget, require_hard)
            ds.stats[f"{split_name}/{name}"] = stats.__dict__.copy()
            if not ok:
                exhausted[f"{split_name}/{name}"] = len(samples)
            ds.split(split_name).extend(samples)
    if exhausted:
        detail = ", ".join(f"{k} ({v} of {counts.get(k.split('/')[1], 0)})" for k, v in exhausted.items())
        raise GenerationError(f"retry budget exhausted for {detail}", exhausted)
    return ds


def sample_training_set(templates, counts, g: Graph, seed: int,
                        retry_budget: int = RETRY_BUDGET) -> list[QuerySample]:
    """Training-style samples (easy answers only) grounded and answered on a single graph."""
    if isinstance(counts, int):
        counts = {t: counts for t in templates}
    out, exhausted = [], {}
    for name in templates:
        count = counts.get(name, 0)
        rng = random.Random(template_seed(seed, name))
        samples, _, ok = _generate_split(get_template(name), count, g, g, rng,
                                         retry_budget * max(count, 1), require_hard=False)
        if not ok:
            exhausted[name] = len(samples)
        out.extend(samples)
    if exhausted:
        raise GenerationError(f"retry budget exhausted for {exhausted}", exhausted)
    return out


def write_dataset(ds: Dataset, out_dir, manifest: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for split_name in ("train", "valid", "test"):
        with open(os.path.join(out_dir, f"{split_name}.jsonl"), "w", encoding="utf-8") as f:
            for s in ds.split(split_name):
                f.write(s.to_json() + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(dict(manifest, statistics=ds.stats), f, indent=2, sort_keys=True)
        f.write("\n")


def read_samples(path, num_entities=None, num_relations=None) -> list[QuerySample]:
    with open(path, encoding="utf-8") as f:
        return [QuerySample.from_json(line, num_entities, num_relations) for line in f if line.strip()]


def load_dataset(data_dir, num_entities=None, num_relations=None) -> Dataset:
    ds = Dataset()
    for split_name in ("train", "valid", "test"):
        path = os.path.join(data_dir, f"{split_name}.jsonl")
        if os.path.exists(path):
            ds.split(split_name).extend(read_samples(path, num_entities, num_relations))
    return ds


def revalidate(samples, small: Graph, large: Graph) -> list[str]:
    """Return serialized queries whose stored answers disagree with the oracle."""
    bad = []
    for s in samples:
        full = answer(s.query.dag, large)
        easy = answer(s.query.dag, small)
        if s.easy_answers != easy or (s.easy_answers | s.hard_answers) != full or (s.easy_answers & s.hard_answers):
            bad.append(serialize(s.query.dag))
    return bad


# ---------------------------------------------------------------- synthetic graphs

def planted_graph(num_entities: int = 64, num_relations: int = 4, num_clusters: int = 8,
                  modes: int = 2, density: float = 0.5, seed: int = 0) -> Graph:
    """Synthetic KG with multi-modal relations.

    Entities are split into equal clusters. Relation r sends head cluster c to ``modes`` disjoint
    tail clusters, so each (head, r) answer set splits into separate groups. Each head links to
    every entity of its tail clusters independently with probability ``density``
    (at least one per tail cluster).
    """
    rng = random.Random(seed)
    size = num_entities // num_clusters
    if size * num_clusters != num_entities:
        raise ValueError("num_entities must be a multiple of num_clusters")
    if modes > num_clusters:
        raise ValueError("modes cannot exceed num_clusters")
    members = [list(range(c * size, (c + 1) * size)) for c in range(num_clusters)]
    cluster_maps = {}
    for r in range(num_relations):
        for c in range(num_clusters):
            cluster_maps[r, c] = rng.sample(range(num_clusters), modes)
    triples = set()
    for r in range(num_relations):
        for c in range(num_clusters):
            for h in members[c]:
                for tc in cluster_maps[r, c]:
                    tails = [t for t in members[tc] if rng.random() < density]
                    if not tails:
                        tails = [rng.choice(members[tc])]
                    triples.update((h, r, t) for t in tails)
    return Graph.from_triples(triples, num_entities, num_relations)


def random_graph(num_entities: int, num_relations: int, num_triples: int, seed: int) -> Graph:
    rng = random.Random(seed)
    triples = set()
    limit = num_entities * num_entities * num_relations
    while len(triples) < min(num_triples, limit):
        triples.add((rng.randrange(num_entities), rng.randrange(num_relations), rng.randrange(num_entities)))
    return Graph.from_triples(triples, num_entities, num_relations)
