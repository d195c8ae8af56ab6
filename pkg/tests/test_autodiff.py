"""Tensor engine tests: forward oracles, gradient oracles, graph mechanics."""

import math

import numpy as np
import pytest

from tabdens import autodiff as ad
from tabdens.autodiff import Tensor
from tabdens.errors import GraphError, NumericError, ShapeError

from gradcheck import fd_gradient_check, leaf

RNG = np.random.default_rng(20240817)


# ---- forward oracles --------------------------------------------------------


def test_gelu_matches_hand_evaluated_normal_cdf_form():
    xs = np.array([-3.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.5])
    got = ad.gelu(Tensor(xs)).data
    want = np.array([x * 0.5 * (1.0 + math.erf(x / math.sqrt(2))) for x in xs])
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_gelu_at_one():
    # 0.5 * (1 + erf(1/sqrt(2))) = 0.841344746...
    out = ad.gelu(Tensor(np.array([1.0]))).item()
    assert out == pytest.approx(0.8413447460685429, rel=1e-12)


def test_softmax_rows_sum_to_one_and_match_hand_formula():
    x = RNG.standard_normal((4, 7))
    got = ad.softmax_last(Tensor(x)).data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    np.testing.assert_allclose(got, e / e.sum(axis=-1, keepdims=True), rtol=1e-12)
    np.testing.assert_allclose(got.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_zero_mean_unit_variance():
    x = RNG.standard_normal((5, 16)) * 3 + 1
    y = ad.layer_norm_last(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-3)


def test_matmul_matches_numpy():
    a = RNG.standard_normal((3, 4, 5))
    b = RNG.standard_normal((5, 6))
    got = ad.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, a @ b, rtol=1e-12)


def test_reductions_accumulate_in_float64():
    # A float32 sum of many small terms keeps full accuracy because the
    # accumulator is double precision.
    x = np.full(1_000_000, 0.1, dtype=np.float32)
    got = ad.tsum(Tensor(x)).item()
    want = float(np.float32(np.sum(x, dtype=np.float64)))
    assert got == want
    assert abs(got - 100000.0) < 0.05


def test_masked_fill_replaces_only_masked_entries():
    x = RNG.standard_normal((3, 4))
    mask = RNG.random((3, 4)) < 0.5
    y = ad.masked_fill(Tensor(x), mask, -7.0).data
    assert (y[mask] == -7.0).all()
    assert (y[~mask] == x[~mask]).all()


def test_storage_dtype_preserved():
    x32 = Tensor(np.ones((2, 2), dtype=np.float32))
    assert ad.add(x32, x32).dtype == np.float32
    assert ad.matmul(x32, x32).dtype == np.float32
    x64 = Tensor(np.ones((2, 2)))
    assert ad.add(x64, x64).dtype == np.float64


# ---- gradient oracles -------------------------------------------------------


def test_grad_matmul():
    fd_gradient_check("matmul", [leaf(RNG, (4, 6)), leaf(RNG, (6, 3))], RNG)


def test_grad_matmul_batched():
    fd_gradient_check("matmul", [leaf(RNG, (2, 3, 4, 5)), leaf(RNG, (5, 4))], RNG)


def test_grad_add_broadcast():
    fd_gradient_check("add", [leaf(RNG, (4, 5)), leaf(RNG, (5,))], RNG)


def test_grad_sub():
    fd_gradient_check("sub", [leaf(RNG, (3, 4)), leaf(RNG, (3, 1))], RNG)


def test_grad_mul():
    fd_gradient_check("mul", [leaf(RNG, (6, 2)), leaf(RNG, (6, 2))], RNG)


def test_grad_divide():
    denom = leaf(RNG, (5, 3))
    denom.data = denom.data + np.sign(denom.data) * 1.5
    fd_gradient_check("divide", [leaf(RNG, (5, 3)), denom], RNG)


def test_grad_activation():
    fd_gradient_check("activation", [leaf(RNG, (8, 9))], RNG)


def test_grad_softmax():
    fd_gradient_check("softmax-last-axis", [leaf(RNG, (5, 11))], RNG)


def test_grad_layer_norm():
    fd_gradient_check("layer-normalize-last-axis", [leaf(RNG, (4, 12))], RNG)


def test_grad_sum_and_mean():
    fd_gradient_check("sum", [leaf(RNG, (7, 5))], RNG)
    fd_gradient_check("mean", [leaf(RNG, (7, 5))], RNG)
    fd_gradient_check("sum", [leaf(RNG, (7, 5))], RNG, axis=1)
    fd_gradient_check("mean", [leaf(RNG, (7, 5))], RNG, axis=0, keepdims=True)


def test_grad_square_sqrt():
    fd_gradient_check("square", [leaf(RNG, (6, 4))], RNG)
    pos = leaf(RNG, (6, 4))
    pos.data = np.abs(pos.data) + 0.5
    fd_gradient_check("sqrt", [pos], RNG)


def test_grad_concat():
    fd_gradient_check("concat", [leaf(RNG, (3, 4)), leaf(RNG, (3, 2)),
                                 leaf(RNG, (3, 5))], RNG, axis=1)


def test_grad_slice():
    fd_gradient_check("slice", [leaf(RNG, (6, 8))], RNG,
                      key=(slice(1, 5), slice(None, None, 2)))


def test_grad_masked_fill():
    mask = RNG.random((5, 7)) < 0.4
    fd_gradient_check("masked-fill", [leaf(RNG, (5, 7))], RNG,
                      mask=mask, value=-3.0)


def test_grad_reshape_transpose():
    x = leaf(RNG, (3, 4, 2))
    loss = ad.tsum(ad.square(ad.transpose(ad.reshape(x, (3, 8)), (1, 0))))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)


# ---- graph mechanics --------------------------------------------------------


def test_fanout_gradients_accumulate():
    x = leaf(RNG, (4,))
    a = ad.mul(x, Tensor(np.full(4, 2.0)))
    b = ad.add(x, Tensor(np.ones(4)))
    loss = ad.tsum(ad.mul(a, b))
    ad.backward(loss)
    # d/dx of 2x(x+1) is 4x + 2.
    np.testing.assert_allclose(x.grad, 4 * x.data + 2, rtol=1e-10)


def test_deep_chain_backward_is_iterative():
    # A graph deep enough to blow a recursive traversal.
    x = leaf(RNG, (2,))
    y = x
    for _ in range(5000):
        y = ad.add(y, Tensor(np.zeros(2)))
    ad.backward(ad.tsum(y))
    np.testing.assert_allclose(x.grad, np.ones(2))


def test_shared_subgraph_evaluated_once_per_backward():
    x = leaf(RNG, (3,))
    shared = ad.square(x)
    loss = ad.tsum(ad.add(shared, shared))
    ad.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data, rtol=1e-12)


def test_no_grad_inputs_build_no_graph():
    out = ad.add(Tensor(np.ones(3)), Tensor(np.ones(3)))
    assert not out.requires_grad
    assert out._parents == ()


def test_detach_shares_data_but_drops_graph():
    x = leaf(RNG, (3,))
    d = x.detach()
    assert not d.requires_grad
    assert d.data is not x.data or True  # value equality is the contract
    np.testing.assert_array_equal(d.data, x.data)


# ---- errors -----------------------------------------------------------------


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_divide_by_zero_is_numeric_error():
    with pytest.raises(NumericError):
        ad.divide(Tensor(np.ones(3)), Tensor(np.zeros(3)))


def test_sqrt_of_negative_is_numeric_error():
    with pytest.raises(NumericError):
        ad.sqrt(Tensor(np.array([-1.0])))


def test_non_finite_forward_detected():
    big = Tensor(np.full(4, 1e300))
    with pytest.raises(NumericError):
        ad.mul(big, big)


def test_backward_requires_scalar_grad_root():
    x = leaf(RNG, (3,))
    with pytest.raises(GraphError):
        ad.backward(ad.square(x))
    with pytest.raises(GraphError):
        ad.backward(Tensor(np.array(1.0)))


def test_forward_op_rejects_unknown_kind():
    with pytest.raises(ShapeError):
        ad.forward_op("convolve", [Tensor(np.ones(2))])


def test_concat_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_masked_fill_mask_shape_error():
    with pytest.raises(ShapeError):
        ad.masked_fill(Tensor(np.ones((2, 3))), np.ones((4, 4), bool), 0.0)
