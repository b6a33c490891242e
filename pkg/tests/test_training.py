import csv
import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gmmr import query as Q
from gmmr.distance import mixed_distance, query_view
from gmmr.model import GmmReasoner, ModelConfig
from gmmr.numerics import DTYPE, load_checkpoint
from gmmr.kg import make_splits
from gmmr.oracle import generate_dataset, planted_graph
from gmmr.training import (ADAM_EPS, BETAS, LOG_COLUMNS, TrainConfig, TrainingError, apply_ablation, batch_loss,
                           loss_from_distances, make_optimizer, train)

from oracles import adamw_step, loss_reference


def test_single_entity_loss_zero():
    assert loss_from_distances(torch.tensor([[0.7]], dtype=DTYPE), [{0}]).item() == 0.0


def test_two_equidistant_entities_ln2():
    loss = loss_from_distances(torch.tensor([[1.3, 1.3]], dtype=DTYPE), [{1}])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


@pytest.mark.parametrize("V", [3, 8, 64, 500])
def test_uniform_distances_give_ln_vocab(V):
    loss = loss_from_distances(torch.full((4, V), 2.5, dtype=DTYPE), [{0}, {1, 2}, {V - 1}, {0, V - 1}])
    assert abs(loss.item() - math.log(V)) <= 1e-9


@given(arrays(np.float64, (3, 6), elements=st.floats(1e-3, 1e3)), st.integers(0, 5))
def test_loss_nonnegative(D, a):
    assert loss_from_distances(torch.tensor(D), [{a}, {0, a}, {5}]).item() >= 0


def test_toy_loss_matches_reference():
    model = GmmReasoner(ModelConfig(3, 2, d=4, k=3, seed=5))
    samples = [Q.parse(t) for t in ("(p r0 e1)", "(i (p r0 e0) (p r1 e2))", "(u (p r1 e0) (p r0 e2))")]
    answers = [{2}, {0, 1}, {1}]
    from gmmr.oracle import GroundedQuery, QuerySample
    batch = [QuerySample(GroundedQuery(q, "x"), frozenset(a)) for q, a in zip(samples, answers)]
    loss = batch_loss(batch, model).item()
    # distances recomputed pair by pair with the scalar distance, then the objective in plain floats
    rows = []
    for q in samples:
        row = []
        for e in range(3):
            branches = Q.to_dnf(q)
            row.append(min(mixed_distance(model.entity(e), model.embed_branch(b)).total for b in branches))
        rows.append(row)
    assert loss == pytest.approx(loss_reference(rows, answers), abs=1e-10)


def test_adamw_single_step_matches_formula():
    for wd in (0.0, 0.1):
        p = torch.tensor([1.7], dtype=DTYPE, requires_grad=True)
        opt = torch.optim.AdamW([p], lr=0.05, betas=BETAS, eps=ADAM_EPS, weight_decay=wd)
        ref, m, v = 1.7, 0.0, 0.0
        for t in range(1, 4):
            opt.zero_grad()
            ((p - 0.3) ** 2).sum().backward()
            g = 2 * (ref - 0.3)
            opt.step()
            ref, m, v = adamw_step(ref, g, m, v, t, 0.05, weight_decay=wd)
            assert abs(p.item() - ref) <= 1e-12


def test_weight_decay_is_decoupled():
    p = torch.tensor([2.0], dtype=DTYPE, requires_grad=True)
    opt = torch.optim.AdamW([p], lr=0.1, betas=BETAS, eps=ADAM_EPS, weight_decay=0.5)
    p.grad = torch.zeros_like(p)
    opt.step()
    # zero gradient: moments stay 0, only the lr-scaled shrink applies
    assert p.item() == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)
    q = torch.tensor([2.0], dtype=DTYPE, requires_grad=True)
    opt = torch.optim.AdamW([q], lr=0.0, weight_decay=0.5)
    q.grad = torch.ones_like(q)
    opt.step()
    assert q.item() == 2.0


def test_make_optimizer_constants():
    model = GmmReasoner(ModelConfig(4, 2, d=2, k=1))
    opt = make_optimizer(model, TrainConfig(d=2, k=1))
    group = opt.param_groups[0]
    assert group["betas"] == (0.9, 0.999) and group["eps"] == 1e-8 and group["weight_decay"] == 1e-2


def test_apply_ablation():
    model = GmmReasoner(ModelConfig(6, 2, d=3, k=3))
    q = Q.parse("(p r0 e1)")
    before = model.distances([q])
    assert torch.equal(apply_ablation(model).distances([q]), before)
    apply_ablation(model, no_cardinality=True)
    alpha, _, _ = query_view(model.embed_branch(q), model.dist_cfg)
    assert torch.equal(alpha, torch.full((3, 3), 1 / 3, dtype=DTYPE))
    apply_ablation(model, mwd_distance=True)
    for e in range(6):
        bd, _ = model.explain(q, e)
        assert bd.cardinality_term == 0.0


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(d=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1)
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"d": 8, "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_json(path)
    path.write_text(json.dumps({"d": 8, "k": 2}))
    assert TrainConfig.from_json(path).k == 2


@pytest.fixture(scope="module")
def small_data():
    g = planted_graph(num_entities=16, num_relations=2, num_clusters=4, seed=0, density=0.7)
    ds = generate_dataset(["1p", "2i"], 12, make_splits(g, seed=0), seed=0)
    return g, ds.train, ds.valid


def small_config(**kw):
    base = dict(d=4, k=2, learning_rate=1e-2, batch_size=8, epochs=3, weight_decay=0.0, init_range=0.1)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_checkpoint_is_initialization(small_data, tmp_path):
    g, samples, valid = small_data
    cfg = small_config(epochs=0)
    train(cfg, samples, g.num_entities, g.num_relations, out_dir=tmp_path)
    tensors, meta = load_checkpoint(tmp_path / "best.ckpt")
    init = GmmReasoner(cfg.model_config(g.num_entities, g.num_relations))
    for n, t in init.state_dict().items():
        assert torch.equal(tensors[n], t)
    assert meta["epoch"] == 0


def test_training_is_deterministic(small_data, tmp_path):
    g, samples, valid = small_data
    runs = []
    for sub in ("a", "b"):
        res = train(small_config(), samples, g.num_entities, g.num_relations, valid, out_dir=tmp_path / sub)
        runs.append([row["train_loss"] for row in res.history])
    assert runs[0] == runs[1]
    for name in ("best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_training_reduces_loss(small_data):
    g, samples, valid = small_data
    res = train(small_config(epochs=15), samples, g.num_entities, g.num_relations)
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]


def test_resume_is_bit_exact(small_data, tmp_path):
    g, samples, valid = small_data
    full = train(small_config(epochs=4), samples, g.num_entities, g.num_relations, out_dir=tmp_path / "full")
    train(small_config(epochs=2), samples, g.num_entities, g.num_relations, out_dir=tmp_path / "half")
    resumed = train(small_config(epochs=4), samples, g.num_entities, g.num_relations,
                    out_dir=tmp_path / "resumed", resume_from=tmp_path / "half" / "last.ckpt")
    assert [r["epoch"] for r in resumed.history] == [3, 4]
    assert [r["train_loss"] for r in resumed.history] == [r["train_loss"] for r in full.history[2:]]
    for n, t in full.model.state_dict().items():
        assert torch.equal(resumed.model.state_dict()[n], t), n


def test_metrics_log_columns(small_data, tmp_path):
    g, samples, valid = small_data
    train(small_config(eval_every=1), samples, g.num_entities, g.num_relations, valid, out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 4
    assert all(float(r[1]) > 0 for r in rows[1:])


def test_non_finite_loss_aborts(small_data, monkeypatch):
    g, samples, valid = small_data
    import gmmr.training as T
    monkeypatch.setattr(T, "batch_loss", lambda batch, model: torch.tensor(float("nan"), requires_grad=True))
    with pytest.raises(TrainingError, match="batch 0"):
        train(small_config(), samples, g.num_entities, g.num_relations)


def test_no_samples_rejected():
    with pytest.raises(TrainingError):
        train(small_config(), [], 4, 1)
