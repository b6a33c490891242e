"""Finite-difference certification of every differentiable piece of the model.

Each case builds a scalar function of some named float64 tensors; non-scalar outputs are reduced
with a fixed random weighting so that every output entry contributes to the checked gradient.
"""
from __future__ import annotations

import numpy as np
import torch

from . import numerics as N
from . import query as Q
from .distance import distance_matrix, query_view
from .embeddings import AnchorLift, GaussianEmbedding, GmmEmbedding, lift_anchor
from .model import GmmReasoner, ModelConfig
from .operators import Intersection, Negation, Projection
from .training import batch_loss
from .oracle import GroundedQuery, QuerySample


def _leaf(gen, *shape, low=-1.0, high=1.0):
    x = torch.rand(*shape, generator=gen, dtype=N.DTYPE) * (high - low) + low
    return x.requires_grad_(True)


def _case(fn_out, params, gen):
    """Freeze the reduction weights once, then expose fn() -> scalar."""
    w = torch.rand(fn_out().shape, generator=gen, dtype=N.DTYPE) + 0.5
    return (lambda: (fn_out() * w).sum()), params


def primitive_cases(d: int, gen) -> dict:
    a, b = _leaf(gen, 3, d), _leaf(gen, d, 2)
    c = _leaf(gen, 3, d)
    pos = _leaf(gen, 3, d, low=0.5, high=2.0)
    row = _leaf(gen, d)
    gain, bias = _leaf(gen, d, low=0.5, high=1.5), _leaf(gen, d)
    q, k, v = _leaf(gen, 2, d), _leaf(gen, 3, d), _leaf(gen, 3, d)
    cases = {
        "matmul": (lambda: N.matmul(a, b), {"a": a, "b": b}),
        "add": (lambda: N.add(a, c), {"a": a, "c": c}),
        "sub": (lambda: N.sub(a, c), {"a": a, "c": c}),
        "mul": (lambda: N.mul(a, c), {"a": a, "c": c}),
        "concat_rows": (lambda: N.concat_rows([a, c]), {"a": a, "c": c}),
        "concat_cols": (lambda: N.concat_cols([a, c]), {"a": a, "c": c}),
        "broadcast_row": (lambda: N.broadcast_row(row, 3), {"row": row}),
        "sigmoid": (lambda: N.sigmoid(a), {"a": a}),
        "relu": (lambda: N.relu(a), {"a": a}),
        "exp": (lambda: N.exp(a), {"a": a}),
        "log": (lambda: N.log(pos), {"x": pos}),
        "sqrt": (lambda: N.sqrt(pos), {"x": pos}),
        "softplus": (lambda: N.softplus(a), {"a": a}),
        "row_softmax": (lambda: N.row_softmax(a), {"a": a}),
        "layer_norm": (lambda: N.layer_norm(a, gain, bias), {"x": a, "gain": gain, "bias": bias}),
        "attention": (lambda: N.attention(q, k, v), {"q": q, "k": k, "v": v}),
    }
    return {name: _case(fn, params, gen) for name, (fn, params) in cases.items()}


def _module_params(prefix, module):
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def operator_cases(d: int, k: int, gen) -> dict:
    w = 3 * d
    cases = {}

    lift = AnchorLift(k, d)
    e_mu, e_sr = _leaf(gen, 2, d), _leaf(gen, 2, d)
    cases["lift_anchor"] = _case(lambda: lift_anchor(GaussianEmbedding(e_mu, e_sr), lift).raw,
                                 {"mu": e_mu, "sigma_raw": e_sr, **_module_params("lift", lift)}, gen)

    proj = Projection(k, d)
    head = _leaf(gen, 2, k, w)
    r_mu, r_sr = _leaf(gen, 2, d), _leaf(gen, 2, d)
    cases["project"] = _case(lambda: proj(GmmEmbedding(head), GaussianEmbedding(r_mu, r_sr)).raw,
                             {"head": head, "rel_mu": r_mu, "rel_sigma_raw": r_sr, **_module_params("proj", proj)}, gen)

    inter = Intersection(k, d)
    for m in (2, 3):
        xs = [_leaf(gen, 2, k, w) for _ in range(m)]
        cases[f"intersect_m{m}"] = _case(
            lambda xs=xs: inter([GmmEmbedding(x) for x in xs]).raw,
            {**{f"in{i}": x for i, x in enumerate(xs)}, **_module_params("inter", inter)}, gen)

    neg = Negation(k, d)
    g = _leaf(gen, 2, k, w)
    cases["negate"] = _case(lambda: neg(GmmEmbedding(g)).raw, {"in": g, **_module_params("neg", neg)}, gen)
    return cases


def distance_cases(d: int, k: int, num_entities: int, gen) -> dict:
    from .embeddings import positive_sigma
    raw = _leaf(gen, 3, k, 3 * d)
    e_mu, e_sr = _leaf(gen, num_entities, d), _leaf(gen, num_entities, d)

    def fn():
        alpha, mu, sigma = query_view(raw)
        return distance_matrix(e_mu, positive_sigma(e_sr), alpha, mu, sigma)
    return {"distance": _case(fn, {"query": raw, "entity_mu": e_mu, "entity_sigma_raw": e_sr}, gen)}


def loss_samples(num_entities: int) -> list:
    """A fixed mixed batch touching every operator and a union."""
    texts = [
        "(p r0 e1)",
        "(p r1 (p r0 e2))",
        "(i (p r0 e3) (p r1 e4))",
        "(i (p r1 e5) (n (p r0 e6)))",
        "(u (p r0 e7) (p r1 e0))",
    ]
    out = []
    for i, t in enumerate(texts):
        dag = Q.parse(t)
        answers = frozenset({i % num_entities, (3 * i + 1) % num_entities})
        out.append(QuerySample(GroundedQuery(dag, "check"), answers))
    return out


def loss_case(d: int, k: int, num_entities: int, seed: int) -> tuple:
    model = GmmReasoner(ModelConfig(num_entities, 2, d=d, k=k, seed=seed))
    samples = loss_samples(num_entities)
    return (lambda: batch_loss(samples, model)), dict(model.named_parameters())


def all_cases(d: int, k: int, seed: int = 0, num_entities: int = 8) -> dict:
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    cases = {}
    cases.update({f"primitive/{n}": c for n, c in primitive_cases(d, gen).items()})
    cases.update({f"operator/{n}": c for n, c in operator_cases(d, k, gen).items()})
    cases.update({f"distance/{n}": c for n, c in distance_cases(d, k, num_entities, gen).items()})
    cases["loss/full"] = loss_case(d, k, num_entities, seed)
    return cases


def run_gradcheck(d: int = 4, k: int = 2, seed: int = 0, num_entities: int = 8,
                  max_entries: int | None = 8, loss_entries: int | None = 3,
                  h: float = 1e-3) -> dict[str, float]:
    """Max relative error per ``case:parameter``.

    ``max_entries`` caps probed coordinates per tensor; the end-to-end loss (whose pieces are
    checked individually) probes ``loss_entries`` per tensor to keep the sweep fast.

    Uses the fourth-order central stencil: some attention-pooling gradients are ~1e-6, where
    the roundoff of a two-point difference at small h alone approaches the 1e-4 budget.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name, (fn, params) in all_cases(d, k, seed, num_entities).items():
        cap = loss_entries if name.startswith("loss/") else max_entries
        errs = N.gradcheck(fn, params, h=h, max_entries=cap, rng=rng, points=4)
        for p, e in errs.items():
            results[f"{name}:{p}"] = e
    return results
