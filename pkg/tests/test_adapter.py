import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprnet import autodiff as ad
from dprnet.adapter import (
    DprConfig,
    context_dim,
    dpr_forward,
    init_dpr_params,
    lipschitz_bound,
    modulate,
    orth_penalty,
    perceive,
    route,
)
from dprnet.autodiff import Tape, Tensor
from dprnet.errors import ConfigError
from dprnet.invariants import gradient_check


def make(d=8, K=4, seed=0, **kw):
    cfg = DprConfig(d=d, K=K, **kw)
    return cfg, init_dpr_params(cfg, np.random.default_rng(seed))


def test_context_dim_rule():
    assert context_dim(8) == 16
    assert context_dim(256) == 64
    assert DprConfig(d=256).d_c == 64


@pytest.mark.parametrize(
    "kwargs",
    [dict(K=0), dict(kernels=(3, 4)), dict(lambda_orth=-1.0), dict(tau_init=0.0), dict(routing_mode="sparse")],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        DprConfig(**kwargs)


def test_init_shapes_and_identity_gain():
    cfg, p = make(d=8, K=4)
    assert p.M.shape == (4, 8)
    assert p.E.shape == (4, 16)
    assert p.W1.shape == (16, 16)
    assert [k.shape for k in p.conv_kernels] == [(8, 3), (8, 7)]
    assert float(p.gamma.data) == 0.0
    assert p.tau == pytest.approx(1.0)
    assert set(p.named_parameters()) == {"M", "E", "W1", "b1", "log_tau", "gamma", "conv0", "conv1"}


def test_random_init_draws_nonzero_gamma():
    _, p = make(identity_init=False)
    assert float(p.gamma.data) != 0.0


# perceive


def test_perceive_output_width():
    cfg, p = make(d=256, K=8)
    H = Tensor(np.random.default_rng(0).standard_normal((2, 11, 256)))
    assert perceive(H, p, cfg).shape == (2, 11, 512)


def test_perceive_pointwise_identity():
    cfg, p = make(multiscale=False)
    p.conv_kernels[0].data = np.ones((8, 1))
    H = np.random.default_rng(1).standard_normal((2, 5, 8))
    np.testing.assert_array_equal(perceive(Tensor(H), p, cfg).data, H)


def test_perceive_identity_kernels_concatenate():
    cfg, p = make()
    p.conv_kernels[0].data = np.tile([0.0, 1.0, 0.0], (8, 1))
    p.conv_kernels[1].data = np.tile([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], (8, 1))
    H = np.random.default_rng(2).standard_normal((2, 5, 8))
    np.testing.assert_array_equal(perceive(Tensor(H), p, cfg).data, np.concatenate([H, H], axis=-1))


def test_perceive_rejects_wrong_width():
    cfg, p = make()
    with pytest.raises(ConfigError):
        perceive(Tensor(np.zeros((1, 3, 9))), p, cfg)


# route


def test_identical_centroids_route_uniformly():
    cfg, p = make(K=5)
    p.E.data = np.tile(p.E.data[:1], (5, 1))
    Z = Tensor(np.random.default_rng(3).standard_normal((2, 6, cfg.perception_width)))
    _, pi = route(Z, p, cfg)
    np.testing.assert_allclose(pi.data, 0.2, atol=1e-15)


def test_large_temperature_aligned_centroid_is_one_hot():
    cfg, p = make(K=3)
    Z = Tensor(np.random.default_rng(4).standard_normal((1, 1, cfg.perception_width)))
    C, _ = route(Z, p, cfg)
    E = np.random.default_rng(5).standard_normal((3, cfg.d_c))
    E[0] = C.data[0, 0]
    p.E.data = E
    p.log_tau.data = np.asarray(20.0)
    _, pi = route(Z, p, cfg)
    np.testing.assert_allclose(pi.data[0, 0], [1.0, 0.0, 0.0], atol=1e-12)


def test_closed_form_softmax_over_cosines():
    # centroid 0 sits at angle acos(ln 2) from the query, centroid 1 is orthogonal to it
    cfg, p = make(K=2)
    Z = Tensor(np.random.default_rng(6).standard_normal((1, 1, cfg.perception_width)))
    C, _ = route(Z, p, cfg)
    c = C.data[0, 0] / np.linalg.norm(C.data[0, 0])
    other = np.random.default_rng(7).standard_normal(cfg.d_c)
    other -= other.dot(c) * c
    other /= np.linalg.norm(other)
    a = math.log(2.0)
    p.E.data = np.stack([a * c + math.sqrt(1 - a * a) * other, other])
    _, pi = route(Z, p, cfg)
    np.testing.assert_allclose(pi.data[0, 0], [2 / 3, 1 / 3], atol=1e-12)


def test_routing_simplex_and_hard_mode():
    cfg, p = make(K=6, seed=8)
    p.log_tau.data = np.asarray(1.5)
    Z = Tensor(np.random.default_rng(9).standard_normal((10, 100, cfg.perception_width)) * 5)
    _, soft = route(Z, p, cfg)
    assert soft.data.min() >= 0
    assert np.abs(soft.data.sum(-1) - 1).max() < 1e-9
    _, hard = route(Z, p, replace(cfg, routing_mode="hard"))
    assert set(np.unique(hard.data)) <= {0.0, 1.0}
    np.testing.assert_array_equal(hard.data.sum(-1), 1.0)
    np.testing.assert_array_equal(hard.data.argmax(-1), soft.data.argmax(-1))


def test_routing_invariant_to_centroid_scale():
    cfg, p = make(K=4, seed=10)
    Z = Tensor(np.random.default_rng(11).standard_normal((2, 7, cfg.perception_width)))
    _, before = route(Z, p, cfg)
    p.E.data = p.E.data * np.array([[0.1], [3.0], [7.0], [0.5]])
    _, after = route(Z, p, cfg)
    np.testing.assert_allclose(after.data, before.data, atol=1e-13)


# modulate


def test_modulate_hand_example():
    cfg, p = make(d=2, K=1)
    p.M.data = np.array([[0.5, -0.5]])
    p.gamma.data = np.asarray(1.0)
    out = modulate(Tensor([[[2.0, 3.0]]]), Tensor([[[1.0]]]), p)
    np.testing.assert_allclose(out.data, [[[3.0, 1.5]]])


def test_modulate_zero_basis_is_identity():
    cfg, p = make()
    p.M.data = np.zeros_like(p.M.data)
    p.gamma.data = np.asarray(3.7)
    H = np.random.default_rng(12).standard_normal((2, 3, 8))
    pi = ad.softmax_lastdim(Tensor(np.random.default_rng(13).standard_normal((2, 3, 4))))
    np.testing.assert_array_equal(modulate(Tensor(H), pi, p).data, H)


# orthogonal penalty


def test_orth_penalty_examples():
    assert abs(orth_penalty(Tensor(np.eye(2))).item()) < 1e-12
    assert abs(orth_penalty(Tensor([[1.0, 0.0], [1.0, 0.0]])).item() - 1.0) < 1e-12
    for seed in range(5):
        row = np.random.default_rng(seed).standard_normal((1, 6))
        assert orth_penalty(Tensor(row)).item() == pytest.approx(0.0, abs=1e-15)


def test_orth_penalty_is_row_scale_invariant():
    M = np.random.default_rng(14).standard_normal((4, 6))
    a = orth_penalty(Tensor(M)).item()
    b = orth_penalty(Tensor(M * np.array([[2.0], [0.1], [5.0], [1.0]]))).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_orth_penalty_descends_from_near_duplicate_rows():
    # exact duplicates are a stationary point, so start a hair away from them
    rng = np.random.default_rng(15)
    base = rng.standard_normal(6)
    M = Tensor(np.stack([base, base]) + 1e-3 * rng.standard_normal((2, 6)), requires_grad=True)
    values = []
    for _ in range(200):
        M.zero_grad()
        with Tape() as tape:
            loss = orth_penalty(M)
        ad.backward(loss, tape)
        values.append(loss.item())
        M.data = M.data - 0.5 * M.grad
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-3 < 0.9 < values[0]


# full forward


def test_forward_shape_and_identity_at_init():
    cfg, p = make(d=256, K=8)
    H = np.random.default_rng(16).standard_normal((2, 11, 256))
    out, penalty = dpr_forward(Tensor(H), p, cfg)
    assert out.shape == (2, 11, 256)
    np.testing.assert_array_equal(out.data, H)
    assert penalty.item() >= 0


def test_forward_trace_records_routing():
    cfg, p = make()
    trace = []
    dpr_forward(Tensor(np.ones((2, 5, 8))), p, cfg, trace=trace)
    assert len(trace) == 1 and trace[0].shape == (2, 5, 4)


def test_forward_gradients_match_finite_differences():
    cfg, p = make(d=4, K=3, seed=17)
    p.gamma.data = np.asarray(0.7)
    p.b1.data = np.random.default_rng(18).standard_normal(p.b1.shape) * 0.1
    H = Tensor(np.random.default_rng(19).standard_normal((2, 6, 4)), requires_grad=True)
    params = dict(p.named_parameters(), H=H)

    def loss():
        out, pen = dpr_forward(H, p, cfg)
        return ad.tsum(out * out) + pen

    errs = gradient_check(loss, params)
    assert max(errs.values()) < 1e-5, errs


@settings(max_examples=50, deadline=None)
@given(
    st.integers(0, 2**31),
    st.integers(1, 6),
    st.floats(-3, 3),
    st.floats(0.05, 4),
    st.floats(0.05, 20),
    st.sampled_from(["soft", "hard"]),
)
def test_lipschitz_bound_holds(seed, K, gamma, m_scale, h_scale, mode):
    rng = np.random.default_rng(seed)
    cfg = DprConfig(d=8, K=K, routing_mode=mode)
    p = init_dpr_params(cfg, rng)
    p.gamma.data = np.asarray(gamma)
    p.M.data = rng.standard_normal(p.M.shape) * m_scale
    H = rng.standard_normal((2, 5, 8)) * h_scale
    out, _ = dpr_forward(Tensor(H), p, cfg)
    lhs = np.linalg.norm(out.data, axis=-1)
    rhs = lipschitz_bound(p) * np.linalg.norm(H, axis=-1) + 1e-9
    assert (lhs <= rhs).all()
