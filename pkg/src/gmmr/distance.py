"""Mixed Wasserstein distance between entity Gaussians and query GMMs."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .embeddings import GaussianEmbedding, GmmEmbedding, canonicalize, positive_sigma
from .numerics import ShapeError, note_branch

ALPHA_FLOOR = 1e-6
SIMILARITY_FLOOR = 1e-10


@dataclass
class DistanceBreakdown:
    cardinality_term: float
    transport_term: float
    total: float
    per_dimension: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def w2_gauss(mu1: float, sigma1: float, mu2: float, sigma2: float) -> float:
    """2-Wasserstein distance between N(mu1, sigma1^2) and N(mu2, sigma2^2)."""
    if sigma1 <= 0 or sigma2 <= 0:
        raise ValueError(f"sigmas must be positive, got {sigma1} and {sigma2}")
    return math.hypot(mu1 - mu2, sigma1 - sigma2)


def safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # d/dx sqrt(x) at 0 is taken as 0 rather than inf
    positive = x > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, x, torch.ones_like(x))), torch.zeros_like(x))


def w2_tensor(mu1, sigma1, mu2, sigma2):
    return safe_sqrt((mu1 - mu2) ** 2 + (sigma1 - sigma2) ** 2)


def cardinality_terms(alpha: torch.Tensor) -> torch.Tensor:
    """KL(u || alpha) + KL(alpha || u) per dimension, alpha of shape (..., k, d) -> (..., d)."""
    k = alpha.shape[-2]
    a = alpha.clamp(ALPHA_FLOOR, 1.0)
    u = 1.0 / k
    log_ratio = torch.log(a) - math.log(u)
    return (-u * log_ratio + a * log_ratio).sum(dim=-2)


def transport_terms(e_mu, e_sigma, q_mu, q_sigma) -> torch.Tensor:
    """Uniform-flow transport per dimension; entity (..., d) against query (..., k, d) -> (..., d)."""
    w = w2_tensor(e_mu.unsqueeze(-2), e_sigma.unsqueeze(-2), q_mu, q_sigma)
    return w.mean(dim=-2)


@dataclass
class DistanceConfig:
    no_cardinality: bool = False
    no_dispersion: bool = False
    mwd_distance: bool = False
    union: str = "min"
    softmin_temperature: float = 0.1


def query_view(q: GmmEmbedding | torch.Tensor, cfg: DistanceConfig | None = None):
    cfg = cfg or DistanceConfig()
    return canonicalize(q, cfg.no_cardinality, cfg.no_dispersion)


def entity_view(e: GaussianEmbedding, cfg: DistanceConfig | None = None):
    cfg = cfg or DistanceConfig()
    sigma = torch.ones_like(e.sigma_raw) if cfg.no_dispersion else positive_sigma(e.sigma_raw)
    return e.mu, sigma


def mixed_distance(e: GaussianEmbedding, q: GmmEmbedding, cfg: DistanceConfig | None = None,
                   per_dimension: bool = False) -> DistanceBreakdown:
    """Single entity vs single query GMM (q.raw of shape (k, 3d))."""
    cfg = cfg or DistanceConfig()
    alpha, q_mu, q_sigma = query_view(q, cfg)
    e_mu, e_sigma = entity_view(e, cfg)
    if e_mu.shape[-1] != q_mu.shape[-1]:
        raise ShapeError(f"mixed_distance: entity width {e_mu.shape[-1]} vs query width {q_mu.shape[-1]}")
    card = torch.zeros_like(q_mu[..., 0, :]) if cfg.mwd_distance else cardinality_terms(alpha)
    trans = transport_terms(e_mu, e_sigma, q_mu, q_sigma)
    per_dim = (card + trans).detach()
    card, trans = card.detach(), trans.detach()
    return DistanceBreakdown(
        cardinality_term=float(card.sum()),
        transport_term=float(trans.sum()),
        total=float(per_dim.sum()),
        per_dimension=per_dim.tolist() if per_dimension else None,
    )


def mwd_variant(e: GaussianEmbedding, q: GmmEmbedding, cfg: DistanceConfig | None = None) -> float:
    cfg = cfg or DistanceConfig()
    alpha, q_mu, q_sigma = query_view(q, cfg)
    e_mu, e_sigma = entity_view(e, cfg)
    return float(transport_terms(e_mu, e_sigma, q_mu, q_sigma).sum().detach())


def distance_matrix(entity_mu, entity_sigma, alpha, q_mu, q_sigma, mwd: bool = False) -> torch.Tensor:
    """Distances of every entity to every query: entities (V, d), queries (B, k, d) -> (B, V)."""
    if entity_mu.shape[-1] != q_mu.shape[-1]:
        raise ShapeError(f"distance_matrix: entity width {entity_mu.shape[-1]} vs query width {q_mu.shape[-1]}")
    e_mu = entity_mu[None, :, None, :]                  # (1, V, 1, d)
    e_sigma = entity_sigma[None, :, None, :]
    w = w2_tensor(e_mu, e_sigma, q_mu[:, None], q_sigma[:, None])   # (B, V, k, d)
    transport = w.mean(dim=2).sum(dim=-1)
    if mwd:
        return transport
    return transport + cardinality_terms(alpha).sum(dim=-1)[:, None]


def aggregate_branches(branch_distances: torch.Tensor, groups: list[list[int]],
                       mode: str = "min", temperature: float = 0.1) -> torch.Tensor:
    """Reduce (NB, V) branch distances to (B, V); ``groups[q]`` lists the branch rows of query q."""
    if any(not g for g in groups):
        raise ValueError("aggregate_branches: query without branches")
    if all(len(g) == 1 for g in groups):
        return branch_distances[[g[0] for g in groups]]
    width = max(len(g) for g in groups)
    pad = branch_distances.shape[0]
    padded = torch.cat([branch_distances, torch.full_like(branch_distances[:1], math.inf)])
    index = torch.tensor([g + [pad] * (width - len(g)) for g in groups])
    stacked = padded[index]                              # (B, width, V)
    if mode == "min":
        best = stacked.min(dim=1)
        note_branch(best.indices)
        return best.values
    if mode == "softmin":
        return -temperature * torch.logsumexp(-stacked / temperature, dim=1)
    raise ValueError(f"unknown union aggregation {mode!r}")


def query_distance(e: GaussianEmbedding, branches: list[GmmEmbedding], cfg: DistanceConfig | None = None) -> float:
    if not branches:
        raise ValueError("query_distance: empty branch list")
    cfg = cfg or DistanceConfig()
    totals = [mixed_distance(e, b, cfg).total for b in branches]
    if cfg.union == "softmin":
        t = torch.tensor(totals)
        return float(-cfg.softmin_temperature * torch.logsumexp(-t / cfg.softmin_temperature, dim=0))
    return min(totals)


def similarity_from_distance(distance):
    if isinstance(distance, torch.Tensor):
        return 1.0 / distance.clamp(min=SIMILARITY_FLOOR)
    return 1.0 / max(distance, SIMILARITY_FLOOR)


def similarity(e: GaussianEmbedding, branches: list[GmmEmbedding], cfg: DistanceConfig | None = None) -> float:
    return similarity_from_distance(query_distance(e, branches, cfg))
