"""Query embedding model: parameter tables, operators and batched DAG evaluation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn

from . import query as Q
from .distance import (DistanceBreakdown, DistanceConfig, aggregate_branches, distance_matrix,
                       entity_view, mixed_distance, query_view)
from .embeddings import AnchorLift, GaussianEmbedding, GaussianTable, GmmEmbedding, lift_anchor
from .numerics import load_checkpoint, save_checkpoint
from .operators import Intersection, Negation, Projection


@dataclass
class ModelConfig:
    num_entities: int
    num_relations: int
    d: int = 32
    k: int = 3
    hidden: int | None = None
    no_cardinality: bool = False
    no_dispersion: bool = False
    mwd_distance: bool = False
    union: str = "min"
    init_range: float = 1.0
    seed: int = 0

    @property
    def distance(self) -> DistanceConfig:
        return DistanceConfig(self.no_cardinality, self.no_dispersion, self.mwd_distance, self.union)


class GmmReasoner(nn.Module):
    """Entity/relation Gaussian tables, anchor lift and the three operator networks.

    Parameter names follow the checkpoint convention: ``entity.*``, ``relation.*``, ``lift.*``,
    ``proj.*``, ``inter.*``, ``neg.*``.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        k, d = config.k, config.d
        self.entity = GaussianTable(config.num_entities, d, config.init_range)
        self.relation = GaussianTable(config.num_relations, d, config.init_range)
        self.lift = AnchorLift(k, d)
        self.proj = Projection(k, d)
        self.inter = Intersection(k, d, config.hidden)
        self.neg = Negation(k, d)

    @property
    def dist_cfg(self) -> DistanceConfig:
        return self.config.distance

    # ---------------------------------------------------------------- embedding

    def embed_branch(self, branch: Q.QueryNode) -> GmmEmbedding:
        """Embed one union-free branch; result raw shape (k, 3d)."""
        return GmmEmbedding(self.embed_branches([branch])[0])

    def embed_branches(self, branches: list[Q.QueryNode]) -> torch.Tensor:
        """Embed union-free branches, batching those with identical computation shape. Returns (N, k, 3d)."""
        groups = defaultdict(list)
        for i, b in enumerate(branches):
            if Q.has_union(b):
                raise ValueError(f"embed_branches: branch contains a union: {b}")
            groups[Q.skeleton(b)].append(i)
        out = [None] * len(branches)
        for idx in groups.values():
            raw = self._embed_same_shape([branches[i] for i in idx]).raw
            for j, i in enumerate(idx):
                out[i] = raw[j]
        return torch.stack(out)

    def _embed_same_shape(self, nodes: list) -> GmmEmbedding:
        head = nodes[0]
        if isinstance(head, Q.Anchor):
            ids = torch.tensor([n.entity for n in nodes])
            return lift_anchor(self.entity(ids), self.lift)
        if isinstance(head, Q.Projection):
            child = self._embed_same_shape([n.child for n in nodes])
            rel = self.relation(torch.tensor([n.relation for n in nodes]))
            return self.proj(child, rel)
        if isinstance(head, Q.Negation):
            return self.neg(self._embed_same_shape([n.child for n in nodes]))
        if isinstance(head, Q.Intersection):
            inputs = [self._embed_same_shape([n.children[j] for n in nodes])
                      for j in range(len(head.children))]
            return self.inter(inputs)
        raise TypeError(f"cannot embed {type(head).__name__}")

    # ---------------------------------------------------------------- scoring

    def entity_params(self):
        return entity_view(GaussianEmbedding(self.entity.mu, self.entity.sigma_raw), self.dist_cfg)

    def branch_distances(self, branches: list[Q.QueryNode]) -> torch.Tensor:
        raw = self.embed_branches(branches)
        alpha, mu, sigma = query_view(raw, self.dist_cfg)
        e_mu, e_sigma = self.entity_params()
        return distance_matrix(e_mu, e_sigma, alpha, mu, sigma, mwd=self.config.mwd_distance)

    def distances(self, queries: list[Q.QueryNode]) -> torch.Tensor:
        """Distance of every entity to every query, (B, V). Unions are scored per DNF branch and min-reduced."""
        branches, groups = [], []
        for q in queries:
            dnf = Q.to_dnf(q)
            groups.append(list(range(len(branches), len(branches) + len(dnf))))
            branches.extend(dnf)
        return aggregate_branches(self.branch_distances(branches), groups, self.config.union)

    def explain(self, q: Q.QueryNode, entity: int) -> tuple[DistanceBreakdown, Q.QueryNode]:
        """Breakdown against the closest DNF branch for one entity."""
        e = self.entity(entity)
        best = None
        for b in Q.to_dnf(q):
            bd = mixed_distance(e, self.embed_branch(b), self.dist_cfg, per_dimension=True)
            if best is None or bd.total < best[0].total:
                best = (bd, b)
        return best

    # ---------------------------------------------------------------- persistence

    def save(self, path, extra_tensors: dict | None = None, extra_meta: dict | None = None) -> None:
        tensors = dict(self.state_dict())
        tensors.update(extra_tensors or {})
        meta = {"model": asdict(self.config)}
        meta.update(extra_meta or {})
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["GmmReasoner", dict, dict]:
        tensors, meta = load_checkpoint(path)
        known = {f.name for f in fields(ModelConfig)}
        config = ModelConfig(**{k: v for k, v in meta["model"].items() if k in known})
        model = cls(config)
        own = {n: t for n, t in tensors.items() if n in model.state_dict()}
        model.load_state_dict(own)
        rest = {n: t for n, t in tensors.items() if n not in own}
        return model, meta, rest


class OracleScorer:
    """Perfect stub: distance 0 for symbolic answers on a graph, 1 otherwise."""

    def __init__(self, graph):
        self.graph = graph

    def distances(self, queries) -> torch.Tensor:
        from .oracle import answer
        out = torch.ones(len(queries), self.graph.num_entities, dtype=torch.float64)
        for i, q in enumerate(queries):
            ans = sorted(answer(q, self.graph))
            if ans:
                out[i, ans] = 0.0
        return out
