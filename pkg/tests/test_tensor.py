import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from lstm_stn.tensor import (DTYPE, NonFiniteError, ShapeError, child_rng, ew_add, ew_map,
                             ew_mul, init_fan_scaled, make_rng, matmul, read_tensor, sigmoid,
                             write_tensor)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_matmul_matches_loops():
    rng = make_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    ref = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    np.testing.assert_allclose(matmul(a, b), ref, rtol=1e-14)


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_shape_and_finiteness():
    with pytest.raises(ShapeError):
        ew_add(np.ones(3), np.ones(4))
    with pytest.raises(NonFiniteError):
        ew_mul(np.array([1e308]), 10.0)
    with pytest.raises(NonFiniteError):
        ew_map(np.log, np.array([-1.0]))


def test_same_seed_same_stream():
    assert np.array_equal(make_rng(7).normal(size=5), make_rng(7).normal(size=5))
    assert not np.array_equal(child_rng(7, 0).normal(size=5), child_rng(7, 1).normal(size=5))


def test_init_bounds_and_determinism():
    w = init_fan_scaled(make_rng(3), (50, 40), 40, 50)
    assert w.dtype == DTYPE and w.shape == (50, 40)
    assert np.abs(w).max() <= np.sqrt(6 / 90)
    assert np.array_equal(w, init_fan_scaled(make_rng(3), (50, 40), 40, 50))


@given(arrays(np.float64, array_shapes(max_dims=3, max_side=4), elements=finite))
def test_sigmoid_stable_and_bounded(x):
    y = sigmoid(x * 1e3)
    assert np.all(np.isfinite(y)) and np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-12)


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=3), elements=finite))
def test_tensor_roundtrip(x):
    buf = io.BytesIO()
    write_tensor(buf, x)
    back = read_tensor(io.BytesIO(buf.getvalue()))
    assert back.shape == x.shape and np.array_equal(back, x)
    again = io.BytesIO()
    write_tensor(again, back)
    assert again.getvalue() == buf.getvalue()


def test_truncated_tensor_rejected():
    buf = io.BytesIO()
    write_tensor(buf, np.ones((2, 2)))
    with pytest.raises(ValueError):
        read_tensor(io.BytesIO(buf.getvalue()[:-3]))
