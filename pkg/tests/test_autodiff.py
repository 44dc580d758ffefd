import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dprnet import autodiff as ad
from dprnet.autodiff import Tape, Tensor
from dprnet.errors import ConfigError, ContractError, DimensionError, NumericError
from dprnet.invariants import gradient_check


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def grads_of(loss_fn, *tensors):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    ad.backward(loss, tape)
    return [t.grad for t in tensors]


# matmul


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [4.0]])


def test_matmul_hand_contraction():
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_inner_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 2\).*\(1, 2\)"):
        ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]))


def test_matmul_batched_matches_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 4, 5))
    b = rng.standard_normal((3, 5, 2))
    np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=1e-12)


# depthwise conv


def test_conv_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 9))
    kernel = np.tile([0.0, 1.0, 0.0], (3, 1))
    np.testing.assert_array_equal(ad.depthwise_conv1d(Tensor(x), Tensor(kernel)).data, x)


def test_conv_zero_padding_hand_example():
    out = ad.depthwise_conv1d(Tensor(np.ones((1, 1, 4))), Tensor([[1.0, 1.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[[2.0, 3.0, 3.0, 2.0]]])


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.depthwise_conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 4))))


def test_conv_matches_scipy_correlate():
    from scipy.signal import correlate

    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 13))
    k = rng.standard_normal((4, 7))
    out = ad.depthwise_conv1d(Tensor(x), Tensor(k)).data
    for b in range(2):
        for c in range(4):
            np.testing.assert_allclose(out[b, c], correlate(x[b, c], k[c], mode="same"), atol=1e-12)


# softmax / layer norm / gelu / l2


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax_lastdim(Tensor([math.log(2.0), 0.0])).data, [2 / 3, 1 / 3], atol=1e-15)
    big = ad.softmax_lastdim(Tensor([1000.0, 0.0])).data
    assert np.isfinite(big).all()
    np.testing.assert_allclose(big, [1.0, 0.0], atol=1e-300)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(ad.layer_norm(Tensor([5.0, 5.0, 5.0]), one, zero).data, [0.0, 0.0, 0.0])
    out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5), rtol=1e-14)
    out = ad.layer_norm(Tensor([1.0, 3.0]), Tensor(np.zeros(2)), Tensor([7.0, 7.0])).data
    np.testing.assert_array_equal(out, [7.0, 7.0])


def test_gelu_examples():
    assert ad.gelu(Tensor(0.0)).item() == 0.0
    assert abs(ad.gelu(Tensor(10.0)).item() - 10.0) < 1e-9
    assert abs(ad.gelu(Tensor(1.0)).item() - 0.8413447460685429) < 1e-12


def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize_lastdim(Tensor([3.0, 4.0])).data, [0.6, 0.8], rtol=1e-15)
    np.testing.assert_array_equal(ad.l2_normalize_lastdim(Tensor([0.0, 0.0])).data, [0.0, 0.0])
    u = np.array([0.0, 1.0, 0.0])
    np.testing.assert_allclose(ad.l2_normalize_lastdim(Tensor(u)).data, u, atol=1e-12)


def test_l2_normalize_zero_vector_gradient_is_finite():
    x = leaf([0.0, 0.0])
    (g,) = grads_of(lambda: ad.tsum(ad.l2_normalize_lastdim(x)), x)
    assert np.isfinite(g).all()


# backward


def test_backward_sum():
    x = leaf([1.0, 2.0, 3.0])
    (g,) = grads_of(lambda: ad.tsum(x), x)
    np.testing.assert_array_equal(g, [1.0, 1.0, 1.0])


def test_backward_square():
    x = leaf([1.0, 2.0])
    (g,) = grads_of(lambda: ad.tsum(x * x), x)
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_gradient_accumulates_across_backward_calls():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        with Tape() as tape:
            loss = ad.tsum(x * 3.0)
        ad.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        ad.backward(y, tape)


def test_backward_requires_recorded_loss():
    x = leaf([1.0, 2.0])
    loss = ad.tsum(x)  # no active tape
    with pytest.raises(ContractError):
        ad.backward(loss, Tape())


def test_no_tape_suspends_recording():
    x = leaf([1.0])
    with Tape() as tape:
        with ad.no_tape():
            ad.tsum(x * x)
        assert len(tape) == 0
        ad.tsum(x * x)
    assert len(tape) == 2


def test_detach_blocks_gradient():
    x = leaf([2.0])
    (g,) = grads_of(lambda: ad.tsum(x * ad.stop_gradient(x)), x)
    np.testing.assert_array_equal(g, [2.0])


def test_nonfinite_values_raise():
    with pytest.raises(NumericError):
        Tensor([np.nan])
    with pytest.raises(NumericError):
        ad.log(Tensor([0.0]))
    with pytest.raises(NumericError):
        ad.exp(Tensor([1000.0]))


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    w = leaf(rng.standard_normal((4, 3)))
    x = Tensor(rng.standard_normal((5, 4)))

    def loss():
        return ad.tsum(ad.gelu(ad.matmul(x, w)) * ad.matmul(x, w))

    first = grads_of(loss, w)[0].copy()
    second = grads_of(loss, w)[0]
    np.testing.assert_array_equal(first, second)


# finite-difference checks per op


RNG = np.random.default_rng(7)


def _fd_case(fn, *shapes, positive=False):
    params = {}
    for i, shape in enumerate(shapes):
        vals = RNG.standard_normal(shape)
        if positive:
            vals = np.abs(vals) + 0.5
        params[f"p{i}"] = leaf(vals)
    errs = gradient_check(lambda: fn(*params.values()), params)
    return max(errs.values())


FD_CASES = {
    "add_broadcast": (lambda a, b: ad.tsum((a + b) ** 2), (3, 4), (4,)),
    "sub": (lambda a, b: ad.tsum((a - b) * a), (3, 4), (3, 1)),
    "mul": (lambda a, b: ad.tsum(a * b * a), (2, 3), (2, 3)),
    "div": (lambda a, b: ad.tsum(a / b), (2, 3), (2, 3)),
    "exp_log": (lambda a: ad.tsum(ad.log(ad.exp(a) + 1.0)), (5,)),
    "sqrt": (lambda a: ad.tsum(ad.sqrt(a * a + 1.0)), (5,)),
    "power": (lambda a: ad.tsum(ad.power(a * a + 1.0, 1.5)), (5,)),
    "gelu": (lambda a: ad.tsum(ad.gelu(a) * a), (6,)),
    "mean_axis": (lambda a: ad.tsum(ad.tmean(a, axis=1) ** 2), (3, 4)),
    "reshape_transpose": (lambda a: ad.tsum(ad.transpose(ad.reshape(a, (2, 6)), (1, 0)) * np.arange(12.0).reshape(6, 2)), (3, 4)),
    "concat": (lambda a, b: ad.tsum(ad.concat([a, b], axis=1) ** 2 * np.arange(5.0)), (2, 2), (2, 3)),
    "take_lastdim": (lambda a: ad.tsum(ad.take_lastdim(a, np.array([[0, 1], [1, 3], [3, 3]])) ** 2), (2, 4)),
    "matmul_2d": (lambda a, b: ad.tsum(ad.gelu(ad.matmul(a, b))), (3, 4), (4, 2)),
    "matmul_batched": (lambda a, b: ad.tsum(ad.matmul(a, b) ** 2), (2, 3, 4), (2, 4, 2)),
    "conv": (lambda x, k: ad.tsum(ad.depthwise_conv1d(x, k) ** 2), (2, 3, 8), (3, 5)),
    "softmax": (lambda a: ad.tsum(ad.softmax_lastdim(a) * np.arange(4.0)), (3, 4)),
    "l2_normalize": (lambda a: ad.tsum(ad.l2_normalize_lastdim(a) * np.arange(4.0)), (3, 4)),
    "layer_norm": (lambda x, g, b: ad.tsum(ad.layer_norm(x, g, b) * np.arange(5.0)), (3, 5), (5,), (5,)),
}


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_finite_difference(name):
    fn, *shapes = FD_CASES[name]
    assert _fd_case(fn, *shapes) < 1e-5


def test_finite_difference_composed_graph():
    assert _fd_case(lambda a, b: ad.tsum(ad.sqrt(ad.exp(ad.matmul(a, b) * 0.1))) / ad.tsum(a * a + 1.0), (3, 4), (4, 2)) < 1e-5


# properties


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_is_a_distribution(x):
    p = ad.softmax_lastdim(Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_l2_normalize_has_unit_or_zero_norm(x):
    out = ad.l2_normalize_lastdim(Tensor(x)).data
    big = np.linalg.norm(x, axis=-1) > 1e-12
    np.testing.assert_allclose(np.linalg.norm(out[big], axis=-1), 1.0, atol=1e-12)
    # below the guard the input is only divided by eps
    np.testing.assert_array_equal(out[~big], x[~big] / 1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite), finite)
def test_softmax_shift_invariant(x, shift):
    a = ad.softmax_lastdim(Tensor(x)).data
    b = ad.softmax_lastdim(Tensor(x + shift)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite))
def test_sum_gradient_is_ones_for_any_input(x):
    t = leaf(x)
    (g,) = grads_of(lambda: ad.tsum(t), t)
    np.testing.assert_array_equal(g, np.ones_like(x))
