import io
import math
import struct

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dyngrain import tensor as T

shapes = st.lists(st.integers(1, 4), min_size=0, max_size=4).map(tuple)


@given(shapes, shapes)
def test_broadcast_shape_matches_numpy(a, b):
    try:
        expected = np.broadcast_shapes(a, b)
    except ValueError:
        with pytest.raises(T.ShapeError):
            T.broadcast_shape(a, b)
    else:
        assert T.broadcast_shape(a, b) == expected


def test_shape_error_carries_shapes():
    with pytest.raises(T.ShapeError) as err:
        T.elementwise("add", torch.ones(2, 3), torch.ones(4, 3))
    assert (2, 3) in err.value.shapes and (4, 3) in err.value.shapes


@pytest.mark.parametrize("op,ref", [("add", np.add), ("sub", np.subtract), ("mul", np.multiply),
                                    ("div", np.divide), ("max", np.maximum), ("min", np.minimum)])
def test_binary_ops_match_numpy(op, ref):
    gen = np.random.default_rng(0)
    a, b = gen.random((3, 1, 4)) + 0.5, gen.random((5, 1)) + 0.5
    out = T.elementwise(op, torch.from_numpy(a), torch.from_numpy(b))
    np.testing.assert_allclose(out.numpy(), ref(a, b), rtol=1e-12)


@pytest.mark.parametrize("op,ref", [
    ("neg", np.negative), ("exp", np.exp), ("log", np.log), ("sqrt", np.sqrt), ("square", np.square),
    ("tanh", np.tanh), ("sigmoid", lambda x: 1 / (1 + np.exp(-x))), ("relu", lambda x: np.maximum(x, 0)),
    ("silu", lambda x: x / (1 + np.exp(-x))), ("abs", np.abs),
])
def test_unary_ops_match_numpy(op, ref):
    x = np.random.default_rng(1).random((4, 5)) + 0.1
    np.testing.assert_allclose(T.elementwise(op, torch.from_numpy(x)).numpy(), ref(x), rtol=1e-12)


def test_unknown_op():
    with pytest.raises(ValueError):
        T.elementwise("pow", torch.ones(1), torch.ones(1))


def test_matmul_counts_macs_and_checks_inner_dim():
    a, b = torch.randn(2, 3, 4), torch.randn(2, 4, 5)
    with T.count_macs() as macs:
        out = T.matmul(a, b, tag="x")
    assert macs["x"] == 2 * 3 * 4 * 5
    torch.testing.assert_close(out, a @ b)
    with pytest.raises(T.ShapeError):
        T.matmul(a, torch.randn(2, 3, 5))


def test_linear_counts_rows_times_in_out():
    layer = torch.nn.Linear(6, 7)
    with T.count_macs() as macs:
        T.linear(torch.randn(2, 5, 6), layer, "lin")
    assert macs["lin"] == 10 * 6 * 7


def test_no_counting_outside_context():
    with T.count_macs() as macs:
        pass
    T.matmul(torch.ones(2, 2), torch.ones(2, 2))
    assert sum(macs.values()) == 0


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
def test_softmax_matches_oracle(values):
    x = np.array(values, dtype=np.float64)
    e = np.exp(x - x.max())
    np.testing.assert_allclose(T.softmax(torch.from_numpy(x)).numpy(), e / e.sum(), rtol=1e-10, atol=1e-300)


def test_softmax_is_stable_for_large_logits():
    out = T.softmax(torch.tensor([1000.0, 1000.0]))
    assert torch.equal(out, torch.tensor([0.5, 0.5]))


def test_softmax_rejects_non_finite():
    with pytest.raises(T.NonFiniteError):
        T.softmax(torch.tensor([0.0, float("nan")]))


def test_log_softmax_consistent():
    x = torch.randn(3, 6, dtype=torch.float64)
    torch.testing.assert_close(T.log_softmax(x).exp(), T.softmax(x))


def test_layer_norm_oracle():
    x = np.random.default_rng(2).standard_normal((3, 16))
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6)
    np.testing.assert_allclose(T.layer_norm(torch.from_numpy(x)).numpy(), ref, rtol=1e-9, atol=1e-12)


def test_gelu_tanh_formula():
    x = np.linspace(-4, 4, 33)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(T.gelu(torch.from_numpy(x)).numpy(), ref, rtol=1e-10, atol=1e-15)


def test_backward_requires_scalar_root():
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(x * 2)
    T.backward((x * 2).sum())
    assert torch.equal(x.grad, torch.full((3,), 2.0))


def test_gather_scatter_roundtrip():
    x = torch.arange(12.0).reshape(6, 2)
    idx = torch.tensor([4, 1, 3])
    g = T.gather(x, idx)
    assert torch.equal(g, x[idx])
    s = T.scatter(g, idx, 6)
    assert torch.equal(s[idx], g) and s[[0, 2, 5]].abs().sum() == 0


def test_rng_reproducible_and_streams_independent():
    a = T.Rng(7, "train").normal(4, 4)
    assert torch.equal(a, T.Rng(7, "train").normal(4, 4))
    assert not torch.equal(a, T.Rng(7, "eval").normal(4, 4))
    assert not torch.equal(a, T.Rng(8, "train").normal(4, 4))
    assert torch.equal(T.Rng(1, 0).child("x", 3).uniform(5), T.Rng(1, 0).child("x", 3).uniform(5))


def test_rng_dtypes_and_ranges():
    r = T.Rng(0, 1)
    assert r.normal(2).dtype == torch.float32
    u = r.uniform(1000)
    assert (u >= 0).all() and (u < 1).all()
    i = r.integers(3, 5, 1000)
    assert set(i.tolist()) == {3, 4}


@given(st.lists(st.integers(0, 5), min_size=0, max_size=4))
def test_gft1_roundtrip(shape):
    x = torch.from_numpy(np.random.default_rng(len(shape)).standard_normal(shape).astype(np.float32))
    y = T.from_gft1_bytes(T.to_gft1_bytes(x))
    assert y.shape == x.shape and torch.equal(y, x)


def test_gft1_byte_layout():
    data = T.to_gft1_bytes(torch.tensor([[1.0, 2.0, 3.0]]))
    expected = b"GFT1" + struct.pack("<I", 2) + struct.pack("<2Q", 1, 3) + struct.pack("<3f", 1, 2, 3)
    assert data == expected


def test_gft1_errors():
    with pytest.raises(ValueError, match="magic"):
        T.from_gft1_bytes(b"XXXX" + bytes(8))
    good = T.to_gft1_bytes(torch.ones(4))
    with pytest.raises(ValueError, match="truncated"):
        T.from_gft1_bytes(good[:-2])


def test_save_load_many(tmp_path):
    ts = [torch.randn(2, 3), torch.tensor(5.0), torch.zeros(0, 4)]
    T.save_tensors(tmp_path / "x.gft1", ts)
    back = T.load_tensors(tmp_path / "x.gft1")
    assert [t.shape for t in back] == [t.shape for t in ts]
    assert all(torch.equal(a, b) for a, b in zip(ts, back))
