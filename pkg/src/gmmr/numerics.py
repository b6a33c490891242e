"""Dense float64 tensor primitives, finite-difference gradient checking and checkpoint I/O.

Reverse-mode differentiation is torch autograd; everything here runs in float64.
"""
from __future__ import annotations

import json
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
LN_EPS = 1e-5
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def _need(cond: bool, op: str, *tensors):
    if not cond:
        shapes = " and ".join(str(tuple(t.shape)) for t in tensors)
        raise ShapeError(f"{op}: incompatible shapes {shapes}")


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a, b):
    _need(a.dim() >= 1 and b.dim() >= 1 and a.shape[-1] == b.shape[-2 if b.dim() > 1 else 0], "matmul", a, b)
    return a @ b


def _same_or_broadcast(op, a, b):
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        _need(False, op, a, b)


def add(a, b):
    _same_or_broadcast("add", a, b)
    return a + b


def sub(a, b):
    _same_or_broadcast("sub", a, b)
    return a - b


def mul(a, b):
    _same_or_broadcast("mul", a, b)
    return a * b


def concat(tensors, dim: int = -1):
    tensors = list(tensors)
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        ok = len(other) == len(ref) and all(x == y for i, (x, y) in enumerate(zip(ref, other))
                                            if i != dim % len(ref))
        _need(ok, "concat", tensors[0], t)
    return torch.cat(tensors, dim=dim)


def concat_rows(tensors):
    return concat(tensors, dim=-2)


def concat_cols(tensors):
    return concat(tensors, dim=-1)


def broadcast_row(v, n: int):
    """Repeat a (..., c) row n times along a new second-to-last axis."""
    return v.unsqueeze(-2).expand(*v.shape[:-1], n, v.shape[-1])


# When set, nonsmooth ops append their branch choice here so finite differences can tell
# whether a stencil stayed on one smooth piece.
_kink_trace: list | None = None


def note_branch(choice: torch.Tensor) -> None:
    if _kink_trace is not None:
        _kink_trace.append(choice.detach().clone())


@contextmanager
def kink_trace():
    global _kink_trace
    prev, _kink_trace = _kink_trace, []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


def relu(x):
    note_branch(x > 0)
    return torch.relu(x)


sigmoid = torch.sigmoid
exp = torch.exp
log = torch.log
sqrt = torch.sqrt


def softplus(x):
    return F.softplus(x)


def row_softmax(x, dim: int = -1):
    shifted = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS):
    """Normalize the last axis to zero mean / unit (biased) variance, then scale and shift."""
    if gain is not None:
        _need(gain.shape[-1] == x.shape[-1], "layer_norm", x, gain)
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def attention(q, k, v, scale: float | None = None):
    """softmax(Q K^T / scale) V over the row axis; scale defaults to sqrt(width)."""
    _need(q.shape[-1] == k.shape[-1], "attention", q, k)
    _need(k.shape[-2] == v.shape[-2], "attention", k, v)
    scale = math.sqrt(q.shape[-1]) if scale is None else scale
    weights = row_softmax(q @ k.transpose(-1, -2) / scale, dim=-1)
    return weights @ v


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = LN_EPS):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(width, dtype=DTYPE))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


def linear(in_features: int, out_features: int, bias: bool = True) -> nn.Linear:
    """Affine map initialised uniformly on [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    layer = nn.Linear(in_features, out_features, bias=bias, dtype=DTYPE)
    bound = 1.0 / math.sqrt(in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    if bias:
        nn.init.uniform_(layer.bias, -bound, bound)
    return layer


def backward(root: torch.Tensor) -> None:
    if root.numel() != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {tuple(root.shape)}")
    root.backward()


# ---------------------------------------------------------------- finite differences

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _probe(fn):
    with kink_trace() as trace:
        value = fn().item()
    return value, trace


def _same_piece(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and torch.equal(x, y) for x, y in zip(a, b))


def finite_difference(fn: Callable[[], torch.Tensor], param: torch.Tensor, index, h: float = 1e-5,
                      points: int = 2, min_h: float = 1e-9, base: list | None = None) -> float:
    """Central difference of scalar fn() w.r.t. one entry of ``param`` (perturbed in place).

    ``points=4`` uses the fourth-order stencil (f(-2h) - 8f(-h) + 8f(h) - f(2h)) / 12h.
    If a stencil point lands on another piece of a piecewise op (relu sign, min choice) than
    the base point, h shrinks tenfold until all points agree or ``min_h`` is reached.
    """
    if points not in (2, 4):
        raise ValueError(f"points must be 2 or 4, got {points}")
    offsets = (1, -1) if points == 2 else (2, 1, -1, -2)
    with torch.no_grad():
        orig = param[index].item()
        if base is None:
            _, base = _probe(fn)
        while True:
            values, smooth = {}, True
            for o in offsets:
                param[index] = orig + o * h
                values[o], trace = _probe(fn)
                smooth = smooth and _same_piece(base, trace)
            param[index] = orig
            if smooth or h / 10 < min_h:
                break
            h /= 10
    if points == 2:
        return (values[1] - values[-1]) / (2 * h)
    return (values[-2] - 8 * values[-1] + 8 * values[1] - values[2]) / (12 * h)


def gradcheck(fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor], h: float = 1e-5,
              max_entries: int | None = None, rng: np.random.Generator | None = None,
              floor: float = 1e-6, points: int = 2) -> dict[str, float]:
    """Compare autograd gradients of scalar fn() with central differences.

    Returns the maximum relative error per named parameter. With ``max_entries`` only that many
    randomly chosen coordinates of each tensor are probed.
    """
    for p in params.values():
        p.grad = None
    out = fn()
    backward(out)
    analytic = {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                for name, p in params.items()}
    rng = rng or np.random.default_rng(0)
    with torch.no_grad():
        _, base = _probe(fn)
    errors = {}
    for name, p in params.items():
        coords = list(np.ndindex(*p.shape)) if p.dim() else [()]
        if max_entries is not None and len(coords) > max_entries:
            picks = rng.choice(len(coords), size=max_entries, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        worst = 0.0
        for idx in coords:
            num = finite_difference(fn, p, idx, h, points, base=base)
            err = float(relative_error(analytic[name][idx].item(), num, floor))
            worst = max(worst, err)
        errors[name] = worst
    return errors


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, tensors: Mapping[str, torch.Tensor], meta: dict | None = None) -> None:
    """One JSON header line (names, shapes, version, meta) then little-endian float64 payloads."""
    names = list(tensors)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
        "meta": meta or {},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            arr = tensors[n].detach().cpu().to(DTYPE).contiguous().numpy()
            f.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated payload for {entry['name']}")
            out[entry["name"]] = torch.from_numpy(np.frombuffer(buf, dtype="<f8").copy().reshape(shape))
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return out, header["meta"]


def named_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters()}


def iter_params(modules: Iterable[nn.Module]):
    for m in modules:
        yield from m.parameters()
