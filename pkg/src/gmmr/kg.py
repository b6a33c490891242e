"""Knowledge graph storage: vocabularies, triple sets, forward adjacency and splits."""
from __future__ import annotations

import json
import logging
import os
import random
from bisect import insort
from dataclasses import dataclass, field
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

LEVELS = ("training", "validation", "test")


class GraphError(ValueError):
    pass


class Vocab:
    """Bijective label <-> dense id mapping. Ids are assigned in insertion order."""

    def __init__(self, labels: Iterable[str] = ()):
        self._labels: list[str] = []
        self._index: dict[str, int] = {}
        for label in labels:
            self.add(label)

    def add(self, label: str) -> int:
        idx = self._index.get(label)
        if idx is None:
            idx = len(self._labels)
            self._labels.append(label)
            self._index[label] = idx
        return idx

    def id(self, label: str) -> int:
        return self._index[label]

    def label(self, idx: int) -> str:
        return self._labels[idx]

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def __len__(self) -> int:
        return len(self._labels)

    def __iter__(self):
        return iter(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._labels == other._labels

    def copy(self) -> "Vocab":
        return Vocab(self._labels)

    @classmethod
    def numbered(cls, prefix: str, n: int) -> "Vocab":
        return cls(f"{prefix}{i}" for i in range(n))


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass
class Graph:
    """Immutable-after-construction triple store with a (head, relation) -> tails index."""

    entities: Vocab
    relations: Vocab
    triples: frozenset
    level: str = "training"
    fwd_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise GraphError(f"unknown graph level {self.level!r}")
        n_ent, n_rel = len(self.entities), len(self.relations)
        index: dict[tuple[int, int], list[int]] = {}
        for h, r, t in self.triples:
            if not (0 <= h < n_ent and 0 <= t < n_ent and 0 <= r < n_rel):
                raise GraphError(f"triple {(h, r, t)} outside vocabularies")
            insort(index.setdefault((h, r), []), t)
        self.fwd_index = index

    @classmethod
    def from_triples(cls, triples: Iterable[Sequence[int]], num_entities: int,
                     num_relations: int, level: str = "training") -> "Graph":
        return cls(Vocab.numbered("e", num_entities), Vocab.numbered("r", num_relations),
                   frozenset(tuple(t) for t in triples), level)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.triples)

    def with_triples(self, triples: Iterable[tuple[int, int, int]], level: str | None = None) -> "Graph":
        return Graph(self.entities, self.relations, frozenset(triples), level or self.level)

    def sorted_triples(self) -> list[tuple[int, int, int]]:
        return sorted(self.triples)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for h, r, t in self.sorted_triples():
                f.write(f"{self.entities.label(h)}\t{self.relations.label(r)}\t{self.entities.label(t)}\n")


def load_triples(path, existing_vocab: tuple[Vocab, Vocab] | None = None,
                 level: str = "training") -> Graph:
    """Read a ``head<TAB>relation<TAB>tail`` file.

    With ``existing_vocab`` the vocabularies are fixed and unknown labels raise.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"triples file not found: {path}")
    if existing_vocab is None:
        entities, relations = Vocab(), Vocab()
    else:
        entities, relations = existing_vocab
    fixed = existing_vocab is not None
    triples = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(parts):
                raise GraphError(f"{path}:{lineno}: expected 3 tab-separated tokens")
            h, r, t = parts
            if fixed:
                for label, vocab, kind in ((h, entities, "entity"), (r, relations, "relation"),
                                           (t, entities, "entity")):
                    if label not in vocab:
                        raise GraphError(f"{path}:{lineno}: unknown {kind} label {label!r}")
                triples.add((entities.id(h), relations.id(r), entities.id(t)))
            else:
                triples.add((entities.add(h), relations.add(r), entities.add(t)))
    return Graph(entities, relations, frozenset(triples), level)


def neighbors(g: Graph, head: int, relation: int) -> list[int]:
    if not 0 <= head < g.num_entities:
        raise GraphError(f"invalid entity id {head}")
    if not 0 <= relation < g.num_relations:
        raise GraphError(f"invalid relation id {relation}")
    return list(g.fwd_index.get((head, relation), ()))


def hide_edges(g: Graph, fraction: float, seed: int) -> Graph:
    """Drop floor(fraction * |triples|) uniformly chosen triples."""
    if not 0.0 <= fraction <= 1.0:
        raise GraphError(f"fraction must lie in [0, 1], got {fraction}")
    ordered = g.sorted_triples()
    n_hide = int(fraction * len(ordered))
    hidden = set(random.Random(seed).sample(ordered, n_hide))
    return g.with_triples(t for t in ordered if t not in hidden)


def verify_containment(train: Graph, valid: Graph, test: Graph) -> bool:
    return train.triples <= valid.triples and valid.triples <= test.triples


@dataclass
class Splits:
    train: Graph
    valid: Graph
    test: Graph

    def graph(self, level: str) -> Graph:
        return {"training": self.train, "validation": self.valid, "test": self.test}[level]


def make_splits(g: Graph, seed: int, hidden_fraction: float = 0.1,
                ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> Splits:
    """Partition edges 80/10/10 and build nested graphs.

    training = train edges with ``hidden_fraction`` of them removed,
    validation = all train edges + valid edges, test = everything.
    """
    ordered = g.sorted_triples()
    random.Random(seed).shuffle(ordered)
    n = len(ordered)
    n_train = int(round(ratios[0] * n))
    n_valid = int(round(ratios[1] * n))
    train_edges = ordered[:n_train]
    valid_edges = ordered[n_train:n_train + n_valid]
    full_train = g.with_triples(train_edges, "training")
    train = hide_edges(full_train, hidden_fraction, seed)
    valid = g.with_triples(train_edges + valid_edges, "validation")
    test = g.with_triples(ordered, "test")
    return Splits(train, valid, test)


def write_splits(splits: Splits, out_dir, seed: int, hidden_fraction: float) -> str:
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for key, level in (("train", "training"), ("valid", "validation"), ("test", "test")):
        path = os.path.join(out_dir, f"{key}.txt")
        splits.graph(level).to_file(path)
        paths[key] = f"{key}.txt"   # relative to the manifest, so outputs are location independent
    manifest = dict(paths, seed=seed, hidden_fraction=hidden_fraction)
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


def load_splits(manifest_path) -> Splits:
    """Load the three split graphs under one shared vocabulary (taken from the test graph)."""
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(manifest_path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    test = load_triples(resolve(manifest["test"]), level="test")
    # label order in the test file fixes ids; re-sort so ids follow label order
    entities = Vocab(sorted(test.entities, key=_label_key))
    relations = Vocab(sorted(test.relations, key=_label_key))
    vocab = (entities, relations)
    test = load_triples(resolve(manifest["test"]), vocab, level="test")
    valid = load_triples(resolve(manifest["valid"]), vocab, level="validation")
    train = load_triples(resolve(manifest["train"]), vocab, level="training")
    splits = Splits(train, valid, test)
    if not verify_containment(train, valid, test):
        raise GraphError(f"{manifest_path}: splits violate train <= valid <= test")
    return splits


def _label_key(label: str):
    # "e12" sorts after "e2"; plain labels fall back to string order
    prefix = label.rstrip("0123456789")
    digits = label[len(prefix):]
    return (prefix, int(digits) if digits else -1, label)
