import numpy as np
import pytest

from dprnet.autodiff import Tensor
from dprnet.invariants import (
    check_identity_at_init,
    numerical_gradient,
    relative_error,
    run_invariants,
)


def test_numerical_gradient_of_quadratic():
    t = Tensor(np.array([1.0, -2.0, 0.5]))
    g = numerical_gradient(lambda: float((t.data**2).sum()), t)
    np.testing.assert_allclose(g, 2 * t.data, atol=1e-9)


def test_relative_error_scale():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.1, 0.0]), np.array([1.0, 0.0])) == pytest.approx(0.1, rel=1e-7)


def test_battery_passes_and_names_each_invariant():
    results = run_invariants(seed=1)
    assert [r.name for r in results] == [
        "fd_gradients",
        "routing_simplex",
        "orth_penalty",
        "lipschitz_bound",
        "identity_at_init",
        "revin_roundtrip",
        "channel_independence",
    ]
    assert all(r.passed for r in results), [r.line() for r in results if not r.passed]
    assert all(r.line().startswith("PASS") for r in results)


def test_fault_injection_breaks_identity():
    result = check_identity_at_init(0, fault_gamma=0.5)
    assert not result.passed
    assert result.line().startswith("FAIL")
