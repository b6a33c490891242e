"""Cross-entropy training of the query embedding model."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

from .evaluation import evaluate
from .model import GmmReasoner, ModelConfig
from .numerics import backward

logger = logging.getLogger(__name__)

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_COLUMNS = ("epoch", "train_loss", "valid_mrr_Ap", "valid_mrr_An", "wall_seconds")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int = 32
    k: int = 3
    learning_rate: float = 5e-4
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    weight_decay: float = 1e-2
    no_cardinality: bool = False
    no_dispersion: bool = False
    mwd_distance: bool = False
    union: str = "min"
    hidden: int | None = None
    init_range: float = 1.0
    eval_every: int = 10
    patience: int = 20

    def __post_init__(self):
        for name in ("d", "k", "batch_size", "eval_every", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.learning_rate <= 0 or self.epochs < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive; epochs and weight_decay non-negative")
        if not 1e-4 <= self.learning_rate <= 1e-3:
            logger.info("learning rate %g lies outside the usual 1e-4..1e-3 grid", self.learning_rate)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    def model_config(self, num_entities: int, num_relations: int) -> ModelConfig:
        return ModelConfig(num_entities, num_relations, d=self.d, k=self.k, hidden=self.hidden,
                           no_cardinality=self.no_cardinality, no_dispersion=self.no_dispersion,
                           mwd_distance=self.mwd_distance, union=self.union,
                           init_range=self.init_range, seed=self.seed)


def apply_ablation(model: GmmReasoner, no_cardinality=False, no_dispersion=False, mwd_distance=False) -> GmmReasoner:
    """Switch the model's distance view; flags are frozen views, shapes are unchanged."""
    model.config.no_cardinality = no_cardinality
    model.config.no_dispersion = no_dispersion
    model.config.mwd_distance = mwd_distance
    return model


def log_probabilities(distances: torch.Tensor) -> torch.Tensor:
    """log softmax over entities of the similarity 1/D, (B, V)."""
    logits = 1.0 / distances.clamp(min=1e-10)
    return logits - torch.logsumexp(logits, dim=-1, keepdim=True)


def loss_from_distances(distances: torch.Tensor, answers: list) -> torch.Tensor:
    logp = log_probabilities(distances)
    rows, cols = [], []
    for i, ans in enumerate(answers):
        if not ans:
            raise ValueError(f"sample {i} has no answers")
        for a in sorted(ans):
            rows.append(i)
            cols.append(a)
    return -logp[rows, cols].sum() / len(rows)


def batch_loss(samples, model) -> torch.Tensor:
    """Mean negative log-probability over every (query, training answer) pair in the batch."""
    distances = model.distances([s.query.dag for s in samples])
    return loss_from_distances(distances, [s.easy_answers for s in samples])


def make_optimizer(model: GmmReasoner, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=config.learning_rate, betas=BETAS,
                             eps=ADAM_EPS, weight_decay=config.weight_decay)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def optimizer_tensors(model, optimizer) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, state in optimizer.state.items():
        n = names[id(p)]
        out[f"optim.{n}.exp_avg"] = state["exp_avg"]
        out[f"optim.{n}.exp_avg_sq"] = state["exp_avg_sq"]
        out[f"optim.{n}.step"] = torch.as_tensor(float(state["step"]), dtype=torch.float64)
    return out


def restore_optimizer(model, optimizer, tensors: dict) -> None:
    for n, p in model.named_parameters():
        key = f"optim.{n}.exp_avg"
        if key in tensors:
            optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"optim.{n}.step"])),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"optim.{n}.exp_avg_sq"].clone(),
            }


@dataclass
class TrainResult:
    model: GmmReasoner
    history: list
    best_epoch: int
    best_valid_ap: float | None


def train(config: TrainConfig, train_samples, num_entities: int, num_relations: int,
          valid_samples=None, out_dir=None, resume_from=None, log_every: int = 0) -> TrainResult:
    """Shuffled mini-batch AdamW on the full-vocabulary cross-entropy.

    Validation A_p is computed every ``eval_every`` epochs; the best model is kept and training
    stops after ``patience`` evaluations without improvement. With ``out_dir`` writes
    ``best.ckpt``, ``last.ckpt`` (with optimizer state) and ``metrics.csv``.
    """
    torch.set_num_threads(1)
    if not train_samples and config.epochs > 0:
        raise TrainingError("no training samples")
    start_epoch = 0
    if resume_from is not None:
        model, meta, rest = GmmReasoner.load(resume_from)
        optimizer = make_optimizer(model, config)
        restore_optimizer(model, optimizer, rest)
        start_epoch = int(meta.get("epoch", 0))
    else:
        model = GmmReasoner(config.model_config(num_entities, num_relations))
        optimizer = make_optimizer(model, config)

    history = []
    best_state = {n: t.detach().clone() for n, t in model.state_dict().items()}
    best_ap, best_epoch, stale = None, start_epoch, 0
    t0 = time.perf_counter()
    n = len(train_samples)
    for epoch in range(start_epoch + 1, config.epochs + 1):
        model.train()
        order = epoch_order(n, config.seed, epoch)
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, n, config.batch_size)):
            batch = [train_samples[i] for i in order[start:start + config.batch_size]]
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(batch, model)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}: "
                                    f"max|grad| {_max_grad(model):.3g}")
            backward(loss)
            if not math.isfinite(_max_grad(model)):
                raise TrainingError(f"non-finite gradient at epoch {epoch} batch {b}")
            optimizer.step()
            total += loss.item()
            batches += 1
        row = {"epoch": epoch, "train_loss": total / max(batches, 1), "valid_mrr_Ap": None,
               "valid_mrr_An": None, "wall_seconds": time.perf_counter() - t0}
        if valid_samples and (epoch % config.eval_every == 0 or epoch == config.epochs):
            model.eval()
            report = evaluate(valid_samples, model)
            row["valid_mrr_Ap"], row["valid_mrr_An"] = report.A_p, report.A_n
            score = report.A_p if report.A_p is not None else report.A_n
            if best_ap is None or score > best_ap:
                best_ap, best_epoch, stale = score, epoch, 0
                best_state = {n_: t.detach().clone() for n_, t in model.state_dict().items()}
            else:
                stale += 1
        history.append(row)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d loss %.5f valid A_p %s", epoch, row["train_loss"], row["valid_mrr_Ap"])
        if stale >= config.patience:
            logger.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break
    last_epoch = history[-1]["epoch"] if history else start_epoch

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        meta = {"train": asdict(config), "epoch": last_epoch}
        model.save(os.path.join(out_dir, "last.ckpt"), optimizer_tensors(model, optimizer), meta)
        write_metrics_log(os.path.join(out_dir, "metrics.csv"), history)
    if valid_samples and best_ap is not None:
        model.load_state_dict(best_state)
    else:
        best_epoch = last_epoch
    if out_dir is not None:
        model.save(os.path.join(out_dir, "best.ckpt"), extra_meta={"train": asdict(config), "epoch": best_epoch})
    return TrainResult(model, history, best_epoch, best_ap)


def _max_grad(model) -> float:
    grads = [p.grad.abs().max().item() for p in model.parameters() if p.grad is not None]
    return max(grads) if grads else 0.0


def write_metrics_log(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in history:
            w.writerow([row["epoch"], repr(row["train_loss"]), _cell(row["valid_mrr_Ap"]),
                        _cell(row["valid_mrr_An"]), f"{row['wall_seconds']:.3f}"])


def _cell(x):
    return "" if x is None else repr(x)
