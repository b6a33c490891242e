import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gmmr import numerics as N
from gmmr.gradcheck import run_gradcheck

from oracles import matmul_loops

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def test_layer_norm_zero_row():
    assert torch.equal(N.layer_norm(torch.zeros(1, 6, dtype=N.DTYPE)), torch.zeros(1, 6, dtype=N.DTYPE))


def test_row_softmax_uniform():
    out = N.row_softmax(torch.zeros(1, 3, dtype=N.DTYPE))
    assert torch.allclose(out, torch.full((1, 3), 1 / 3, dtype=N.DTYPE), atol=1e-15)


def test_matmul_against_loops():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    ref = np.array(matmul_loops(a.tolist(), b.tolist()))
    assert np.allclose(N.matmul(torch.tensor(a), torch.tensor(b)).numpy(), ref, atol=1e-14)


@pytest.mark.parametrize("op,a,b", [
    (N.matmul, (2, 3), (2, 3)),
    (N.add, (2, 3), (3, 2)),
    (N.mul, (4,), (3,)),
])
def test_shape_errors(op, a, b):
    with pytest.raises(N.ShapeError, match=op.__name__):
        op(torch.zeros(a, dtype=N.DTYPE), torch.zeros(b, dtype=N.DTYPE))


def test_concat_shape_error():
    with pytest.raises(N.ShapeError):
        N.concat_rows([torch.zeros(2, 3), torch.zeros(2, 4)])
    assert N.concat_cols([torch.zeros(2, 3), torch.zeros(2, 4)]).shape == (2, 7)


def test_broadcast_row():
    v = torch.arange(3.0)
    assert torch.equal(N.broadcast_row(v, 2), torch.stack([v, v]))


def test_backward_sum_gives_ones():
    W = torch.randn(3, 4, dtype=N.DTYPE, requires_grad=True)
    N.backward(W.sum())
    assert torch.equal(W.grad, torch.ones_like(W))


def test_sigmoid_gradient_at_zero():
    x = torch.zeros((), dtype=N.DTYPE, requires_grad=True)
    N.backward(N.sigmoid(x))
    assert x.grad.item() == 0.25


def test_backward_rejects_non_scalar():
    with pytest.raises(N.ShapeError):
        N.backward(torch.ones(2, requires_grad=True) * 2)


@given(arrays(np.float64, (3, 5), elements=finite), finite)
def test_row_softmax_sums_to_one_and_shift_invariant(x, c):
    t = torch.tensor(x)
    out = N.row_softmax(t)
    assert torch.allclose(out.sum(-1), torch.ones(3, dtype=N.DTYPE), atol=1e-12)
    assert torch.allclose(N.row_softmax(t + c), out, atol=1e-12)


@given(arrays(np.float64, (4, 6), elements=finite))
def test_layer_norm_moments(x):
    t = torch.tensor(x)
    centered = t - t.mean(-1, keepdim=True)
    var = (centered ** 2).mean(-1)
    out = N.layer_norm(t)
    # centering leaves roundoff of order ulp(|x|), which the 1/sqrt(var + eps) scale amplifies
    slack = 64 * np.finfo(np.float64).eps * t.abs().amax(-1) / torch.sqrt(var + N.LN_EPS)
    assert (out.mean(-1).abs() <= 1e-12 + slack).all()
    # with eps inside the root the variance is var / (var + eps); exactly 1 when eps = 0
    assert torch.allclose((out ** 2).mean(-1), var / (var + N.LN_EPS), atol=1e-9)
    big = var >= 1e-3
    if big.any():
        raw = N.layer_norm(t, eps=0.0)[big]
        assert torch.allclose((raw ** 2).mean(-1), torch.ones_like(raw[:, 0]), atol=1e-9)


def test_attention_single_row_returns_values():
    q, k, v = torch.randn(2, 4, dtype=N.DTYPE), torch.randn(1, 4, dtype=N.DTYPE), torch.randn(1, 4, dtype=N.DTYPE)
    assert torch.allclose(N.attention(q, k, v), v.expand(2, 4))


def test_linear_init_bounds():
    lin = N.linear(16, 5)
    assert lin.weight.dtype == torch.float64
    assert lin.weight.abs().max() <= 0.25 and lin.bias.abs().max() <= 0.25


def test_finite_difference_quadratic():
    x = torch.tensor([1.5, -2.0], dtype=N.DTYPE)
    fn = lambda: (x ** 3).sum()
    for points in (2, 4):
        assert N.finite_difference(fn, x, (0,), 1e-4, points) == pytest.approx(3 * 1.5 ** 2, rel=1e-7)
    assert torch.equal(x, torch.tensor([1.5, -2.0], dtype=N.DTYPE))


def test_finite_difference_avoids_relu_kink():
    # base point sits 1e-4 right of the kink; a 1e-3 stencil would straddle it
    x = torch.tensor([1e-4], dtype=N.DTYPE)
    fn = lambda: N.relu(x).sum() * 3.0
    assert N.finite_difference(fn, x, (0,), h=1e-3, points=4) == pytest.approx(3.0, rel=1e-9)


def test_gradcheck_catches_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x   # should be 2x

    x = torch.tensor([0.7, -1.2], dtype=N.DTYPE, requires_grad=True)
    errs = N.gradcheck(lambda: Bad.apply(x).sum(), {"x": x})
    assert errs["x"] > 0.1


def test_relative_error_floor():
    assert N.relative_error(0.0, 1e-9) == pytest.approx(1e-3)
    assert N.relative_error(2.0, 1.0) == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_all_pieces_random_draws(seed):
    # five independent parameter draws of every primitive, operator, distance and loss
    errs = run_gradcheck(d=4, k=2, seed=100 + seed)
    worst = max(errs, key=errs.get)
    assert errs[worst] <= 1e-4, (worst, errs[worst])
    assert any(k.startswith("primitive/layer_norm") for k in errs)
    assert any(k.startswith("loss/full") for k in errs)


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a": torch.randn(2, 3, dtype=N.DTYPE), "b": torch.tensor(1.5, dtype=N.DTYPE)}
    path = tmp_path / "x.ckpt"
    N.save_checkpoint(path, tensors, {"note": "hi"})
    back, meta = N.load_checkpoint(path)
    assert meta == {"note": "hi"}
    assert all(torch.equal(back[n], tensors[n]) for n in tensors)
    header = path.read_bytes().split(b"\n", 1)[0]
    assert b'"format_version": 1' in header


def test_checkpoint_rejects_truncation_and_trailing(tmp_path):
    path = tmp_path / "x.ckpt"
    N.save_checkpoint(path, {"a": torch.zeros(4, dtype=N.DTYPE)})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        N.load_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        N.load_checkpoint(path)
