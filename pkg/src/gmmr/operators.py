"""Neural logical operators over raw GMM embeddings of shape (..., k, 3d)."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .embeddings import GaussianEmbedding, GmmEmbedding
from .numerics import (DTYPE, LayerNorm, ShapeError, attention, broadcast_row, concat_cols, linear,
                       relu, row_softmax, sigmoid)


class Attention(nn.Module):
    """Single-head attention softmax(XW_Q (YW_K)^T / sqrt(3d)) YW_V."""

    def __init__(self, width: int):
        super().__init__()
        self.W_Q = linear(width, width, bias=False)
        self.W_K = linear(width, width, bias=False)
        self.W_V = linear(width, width, bias=False)
        self.scale = math.sqrt(width)

    def forward(self, x, y=None):
        y = x if y is None else y
        return attention(self.W_Q(x), self.W_K(y), self.W_V(y), self.scale)


class RowFF(nn.Module):
    """Row-wise feed-forward: one affine map followed by ReLU."""

    def __init__(self, width: int):
        super().__init__()
        self.fc = linear(width, width)

    def forward(self, x):
        return relu(self.fc(x))


def _check_rows(op, raw, width):
    if raw.shape[-1] != width:
        raise ShapeError(f"{op}: expected row width {width}, got shape {tuple(raw.shape)}")


class Projection(nn.Module):
    """Distributed-gate update of the k head subsets by a relation, then self-attention across them."""

    def __init__(self, k: int, d: int):
        super().__init__()
        w = 3 * d
        self.k, self.d = k, d
        self.alpha_r_aug = nn.Parameter(torch.empty(d, dtype=DTYPE).uniform_(-1 / math.sqrt(d), 1 / math.sqrt(d)))
        self.W_g = linear(w, w)
        self.U_g = linear(w, w)
        self.W_h = linear(w, w)
        self.U_h = linear(w, w)
        self.ln_g = LayerNorm(w)
        self.ln_h = LayerNorm(w)
        self.attn = Attention(w)

    def forward(self, head: GmmEmbedding, rel: GaussianEmbedding) -> GmmEmbedding:
        G_h = head.raw
        _check_rows("project", G_h, 3 * self.d)
        if rel.mu.shape[-1] != self.d:
            raise ShapeError(f"project: relation width {rel.mu.shape[-1]} vs d={self.d}")
        alpha = self.alpha_r_aug.expand_as(rel.mu)
        r_aug = concat_cols([alpha, rel.mu, rel.sigma_raw])
        k = G_h.shape[-2]
        gate = sigmoid(self.ln_g(broadcast_row(self.W_g(r_aug), k) + self.U_g(G_h)))
        cand = relu(broadcast_row(self.ln_h(self.W_h(r_aug)), k) + self.U_h(G_h))
        mixed = gate * G_h + (1 - gate) * cand
        return GmmEmbedding(self.attn(mixed))


class Intersection(nn.Module):
    """Permutation-invariant m-way intersection.

    Inter-query level: elementwise softmax-weighted sum of the inputs. Inter-subset level:
    self-attention over all m*k rows pooled onto k learnable seeds. A sigmoid gate fuses the two.
    """

    def __init__(self, k: int, d: int, hidden: int | None = None):
        super().__init__()
        w = 3 * d
        hidden = hidden or w
        self.k, self.d = k, d
        self.mlp1 = linear(w, hidden)
        self.mlp2 = linear(hidden, w)
        self.self_attn = Attention(w)
        self.pre_ff = RowFF(w)
        self.seeds = nn.Parameter(torch.empty(k, w, dtype=DTYPE).uniform_(-1 / math.sqrt(w), 1 / math.sqrt(w)))
        self.pool_attn = Attention(w)
        self.ln_1 = LayerNorm(w)
        self.ln_2 = LayerNorm(w)
        self.block_ff = RowFF(w)
        self.W_gt = linear(2 * w, w)

    def forward(self, inputs: list[GmmEmbedding]) -> GmmEmbedding:
        if len(inputs) < 2:
            raise ShapeError(f"intersect: needs at least 2 inputs, got {len(inputs)}")
        shape = inputs[0].raw.shape
        for g in inputs[1:]:
            if g.raw.shape != shape:
                raise ShapeError(f"intersect: input shapes {tuple(shape)} and {tuple(g.raw.shape)} differ")
        _check_rows("intersect", inputs[0].raw, 3 * self.d)
        stacked = torch.stack([g.raw for g in inputs], dim=-3)            # (..., m, k, 3d)
        inter_query = self.inter_query_level(stacked)
        pooled = self.subset_level(stacked)
        gate = sigmoid(self.W_gt(concat_cols([inter_query, pooled])))
        return GmmEmbedding(gate * inter_query + (1 - gate) * pooled)

    def inter_query_level(self, stacked):
        """Elementwise softmax over the m inputs, (..., m, k, 3d) -> (..., k, 3d)."""
        scores = self.mlp2(relu(self.mlp1(stacked)))
        weights = row_softmax(scores, dim=-3)
        return (weights * stacked).sum(dim=-3)

    def subset_level(self, stacked):
        """Self-attention over all m*k rows, pooled onto the k seeds."""
        rows = stacked.flatten(-3, -2)                                     # (..., m*k, 3d)
        mixed = self.self_attn(rows)
        seeds = self.seeds.expand(*rows.shape[:-2], *self.seeds.shape)
        return self._block(seeds, self.pre_ff(mixed))

    def _block(self, x, y):
        h = self.ln_1(x + self.pool_attn(x, y))
        return self.ln_2(h + self.block_ff(h))


class Negation(nn.Module):
    """Self-attention block (no positional encoding) mapping a set embedding to its complement."""

    def __init__(self, k: int, d: int):
        super().__init__()
        w = 3 * d
        self.d = d
        self.attn = Attention(w)
        self.ln_1 = LayerNorm(w)
        self.ln_2 = LayerNorm(w)
        self.ff = RowFF(w)

    def forward(self, q: GmmEmbedding) -> GmmEmbedding:
        G = q.raw
        _check_rows("negate", G, 3 * self.d)
        h = self.ln_1(G + self.attn(G))
        return GmmEmbedding(self.ln_2(h + self.ff(h)))


def project(head: GmmEmbedding, rel: GaussianEmbedding, p: Projection) -> GmmEmbedding:
    return p(head, rel)


def intersect(inputs: list[GmmEmbedding], p: Intersection) -> GmmEmbedding:
    return p(inputs)


def negate(q: GmmEmbedding, p: Negation) -> GmmEmbedding:
    return p(q)
