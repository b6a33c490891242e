"""Gaussian entity/relation embeddings, GMM query embeddings and the anchor lift.

A GMM query embedding is held raw as a ``(..., k, 3d)`` tensor whose rows are
``[alpha_logits ; mu ; sigma_raw]``. The canonical view normalises it: alpha is a softmax over
the k components (per dimension) and sigma = softplus(sigma_raw).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .numerics import DTYPE, ShapeError, broadcast_row, concat_cols, row_softmax, softplus

SIGMA_RAW_FLOOR = -40.0


@dataclass
class GmmEmbedding:
    """Raw GMM embedding; ``raw`` has shape (..., k, 3d)."""

    raw: torch.Tensor

    @property
    def k(self) -> int:
        return self.raw.shape[-2]

    @property
    def d(self) -> int:
        return self.raw.shape[-1] // 3

    def parts(self):
        return split_raw(self.raw)

    @classmethod
    def from_parts(cls, alpha_logits, mu, sigma_raw) -> "GmmEmbedding":
        return cls(concat_cols([alpha_logits, mu, sigma_raw]))


@dataclass
class GaussianEmbedding:
    mu: torch.Tensor
    sigma_raw: torch.Tensor

    @property
    def sigma(self) -> torch.Tensor:
        return positive_sigma(self.sigma_raw)


def split_raw(raw: torch.Tensor):
    if raw.shape[-1] % 3:
        raise ShapeError(f"GMM row width must be a multiple of 3, got {raw.shape[-1]}")
    return torch.chunk(raw, 3, dim=-1)


def positive_sigma(sigma_raw: torch.Tensor) -> torch.Tensor:
    return softplus(sigma_raw.clamp(min=SIGMA_RAW_FLOOR))


def canonicalize(g: GmmEmbedding | torch.Tensor, no_cardinality: bool = False,
                 no_dispersion: bool = False):
    """Return (alpha, mu, sigma), each (..., k, d); alpha sums to 1 over k, sigma > 0.

    The ablation switches freeze alpha at 1/k and sigma at 1.
    """
    raw = g.raw if isinstance(g, GmmEmbedding) else g
    logits, mu, sigma_raw = split_raw(raw)
    if no_cardinality:
        alpha = torch.full_like(logits, 1.0 / logits.shape[-2])
    else:
        alpha = row_softmax(logits, dim=-2)
    if no_dispersion:
        sigma = torch.ones_like(sigma_raw)
    else:
        sigma = positive_sigma(sigma_raw)
    return alpha, mu, sigma


class GaussianTable(nn.Module):
    """Per-row (mu, sigma_raw) parameters for entities or relations."""

    def __init__(self, rows: int, d: int, init_range: float = 1.0):
        super().__init__()
        self.mu = nn.Parameter(torch.empty(rows, d, dtype=DTYPE).uniform_(-init_range, init_range))
        self.sigma_raw = nn.Parameter(torch.empty(rows, d, dtype=DTYPE).uniform_(-init_range, init_range))

    def __len__(self):
        return self.mu.shape[0]

    def forward(self, ids) -> GaussianEmbedding:
        return GaussianEmbedding(self.mu[ids], self.sigma_raw[ids])


class AnchorLift(nn.Module):
    """Expand an entity Gaussian into k components via learnable offsets O_alpha, O_mu, O_sigma."""

    def __init__(self, k: int, d: int):
        super().__init__()
        bound = 1.0 / d ** 0.5
        self.O_alpha = nn.Parameter(torch.empty(k, d, dtype=DTYPE).uniform_(-bound, bound))
        self.O_mu = nn.Parameter(torch.empty(k, d, dtype=DTYPE).uniform_(-bound, bound))
        self.O_sigma = nn.Parameter(torch.empty(k, d, dtype=DTYPE).uniform_(-bound, bound))

    def forward(self, e: GaussianEmbedding) -> GmmEmbedding:
        return lift_anchor(e, self)


def lift_anchor(e: GaussianEmbedding, lift: AnchorLift) -> GmmEmbedding:
    k, d = lift.O_mu.shape
    if e.mu.shape[-1] != d or e.sigma_raw.shape[-1] != d:
        raise ShapeError(f"lift_anchor: entity width {e.mu.shape[-1]} vs lift width {d}")
    batch = e.mu.shape[:-1]
    alpha_logits = lift.O_alpha.expand(*batch, k, d)
    mu = broadcast_row(e.mu, k) + lift.O_mu
    sigma_raw = broadcast_row(e.sigma_raw, k) + lift.O_sigma
    return GmmEmbedding.from_parts(alpha_logits, mu, sigma_raw)
