"""Finite-difference gradient checks and the structural invariant battery."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapter import DprConfig, dpr_forward, init_dpr_params, lipschitz_bound, orth_penalty, route
from .autodiff import Tape, Tensor
from .backbone import DprNetModel, ModelConfig, RevIN, model_forward
from .training import total_loss

FD_STEP = 1e-5
FD_TOL = 1e-5


def numerical_gradient(fn: Callable[[], float], tensor: Tensor, h: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` with respect to every element of ``tensor``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn()
        flat[i] = orig - h
        minus = fn()
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / (||n|| + 1e-8)`` over one parameter tensor."""
    return float(np.linalg.norm(analytic - numeric) / (np.linalg.norm(numeric) + 1e-8))


def gradient_check(
    loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = FD_STEP
) -> dict[str, float]:
    """Relative error between tape gradients and central differences, per parameter."""
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    ad.backward(loss, tape)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    def scalar() -> float:
        with ad.no_tape():
            return float(loss_fn().data)

    # finite differences perturb .data in place, so they need a contiguous owner
    for p in params.values():
        p.data = np.ascontiguousarray(p.data)
    return {name: relative_error(analytic[name], numerical_gradient(scalar, p, h)) for name, p in params.items()}


def micro_model_config(**overrides) -> ModelConfig:
    base = dict(
        lookback=16, horizon=4, channels=2, patch_len=4, stride=2, d=8, d_c=16, K=3, n_blocks=1, dropout=0.0
    )
    base.update(overrides)
    return ModelConfig(**base)


def activate_adapters(model: DprNetModel, rng: np.random.Generator, gamma: float = 0.5) -> None:
    """Move adapters off the identity point so every adapter gradient is non-trivial."""
    for block in model.blocks:
        if block.adapter is not None:
            a = block.adapter
            a.gamma.data = np.asarray(gamma + 0.1 * rng.standard_normal(), dtype=a.gamma.dtype)
            a.log_tau.data = np.asarray(0.3, dtype=a.log_tau.dtype)
            a.b1.data = (0.1 * rng.standard_normal(a.b1.shape)).astype(a.b1.dtype)


def model_gradient_errors(seed: int = 0, lambda_orth: float = 0.1) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    model = DprNetModel(micro_model_config(), seed)
    activate_adapters(model, rng)
    cfg = model.config
    x = Tensor(rng.standard_normal((3, cfg.lookback, cfg.channels)))
    target = Tensor(rng.standard_normal((3, cfg.horizon, cfg.channels)))

    def loss_fn():
        pred, penalty = model_forward(x, model)
        return total_loss(pred, target, penalty, lambda_orth)

    return gradient_check(loss_fn, model.named_parameters())


# --------------------------------------------------------------------------- invariant battery


@dataclass
class InvariantResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail}"


def check_gradients(seed: int) -> InvariantResult:
    errors = model_gradient_errors(seed)
    worst = max(errors, key=errors.get)
    return InvariantResult(
        "fd_gradients", errors[worst] < FD_TOL, f"max rel err {errors[worst]:.2e} ({worst}), {len(errors)} tensors"
    )


def check_simplex(seed: int, n_tokens: int = 1000) -> InvariantResult:
    rng = np.random.default_rng(seed)
    cfg = DprConfig(d=8, K=5)
    params = init_dpr_params(cfg, rng)
    params.log_tau.data = np.asarray(2.0)
    Z = Tensor(rng.standard_normal((10, n_tokens // 10, cfg.perception_width)) * 10.0)
    _, pi = route(Z, params, cfg)
    dev = float(np.abs(pi.data.sum(axis=-1) - 1.0).max())
    _, hard = route(Z, params, replace(cfg, routing_mode="hard"))
    one_hot = bool(np.all((hard.data == 0) | (hard.data == 1)) and np.all(hard.data.sum(-1) == 1))
    ok = bool(pi.data.min() >= 0) and dev < 1e-9 and one_hot
    return InvariantResult("routing_simplex", ok, f"max |sum-1| {dev:.1e}, hard one-hot {one_hot}")


def check_orthogonality() -> InvariantResult:
    ortho = float(orth_penalty(Tensor(np.eye(2, 5))).data)
    dup = float(orth_penalty(Tensor([[0.6, 0.8], [0.6, 0.8]])).data)
    ok = abs(ortho) < 1e-12 and abs(dup - 1.0) < 1e-12
    return InvariantResult("orth_penalty", ok, f"orthonormal {ortho:.1e}, duplicated {dup:.15f}")


def check_lipschitz(seed: int, draws: int = 1000) -> InvariantResult:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for _ in range(draws // 50):
        cfg = DprConfig(d=8, K=int(rng.integers(1, 6)), kernels=(3, 7))
        params = init_dpr_params(cfg, rng)
        params.gamma.data = np.asarray(rng.uniform(-3, 3))
        params.M.data = rng.standard_normal(params.M.shape) * rng.uniform(0.1, 3)
        H = Tensor(rng.standard_normal((5, 10, 8)) * rng.uniform(0.1, 10))
        out, _ = dpr_forward(H, params, cfg)
        ratio_gap = np.linalg.norm(out.data, axis=-1) - lipschitz_bound(params) * np.linalg.norm(H.data, axis=-1)
        worst = max(worst, float(ratio_gap.max()))
    return InvariantResult("lipschitz_bound", worst <= 1e-9, f"max(||h_out|| - bound*||h||) = {worst:.3e}")


def check_identity_at_init(seed: int, fault_gamma: float | None = None, draws: int = 20) -> InvariantResult:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(lookback=32, horizon=8, channels=3, d=16, K=4, n_blocks=2, dropout=0.0)
    model = DprNetModel(cfg, seed)
    if fault_gamma is not None:
        for block in model.blocks:
            block.adapter.gamma.data = np.asarray(fault_gamma)
    bare = model.without_adapters()
    same = True
    for _ in range(draws):
        x = rng.standard_normal((2, cfg.lookback, cfg.channels)) * rng.uniform(0.1, 10)
        a, _ = model_forward(x, model)
        b, _ = model_forward(x, bare)
        same &= bool(np.array_equal(a.data, b.data))
    return InvariantResult("identity_at_init", same, f"{draws} inputs bit-exact vs adapter-free model: {same}")


def check_revin_roundtrip(seed: int, windows: int = 1000) -> InvariantResult:
    rng = np.random.default_rng(seed)
    revin = RevIN(3)
    x = rng.standard_normal((windows, 24, 3)) * rng.uniform(0.01, 100, (windows, 1, 3)) + rng.uniform(-50, 50, (windows, 1, 3))
    x[: windows // 4] = 5.0 + 1e-9 * rng.standard_normal((windows // 4, 24, 3))
    normed, state = revin.normalize(Tensor(x))
    back = revin.denormalize(normed, state)
    err = float(np.abs(back.data - x).max())
    return InvariantResult("revin_roundtrip", err < 1e-6, f"max abs err {err:.2e}")


def check_channel_independence(seed: int) -> InvariantResult:
    rng = np.random.default_rng(seed)
    model = DprNetModel(micro_model_config(channels=3), seed)
    activate_adapters(model, rng)
    x = rng.standard_normal((2, 16, 3))
    base, _ = model_forward(x, model)
    bumped = x.copy()
    bumped[:, :, 0] += rng.standard_normal((2, 16))
    out, _ = model_forward(bumped, model)
    leak = float(np.abs(out.data[:, :, 1:] - base.data[:, :, 1:]).max())
    moved = float(np.abs(out.data[:, :, 0] - base.data[:, :, 0]).max())
    return InvariantResult("channel_independence", leak == 0.0 and moved > 0, f"leak {leak:.1e}, own change {moved:.2e}")


def run_invariants(seed: int = 0, fault_gamma: float | None = None) -> list[InvariantResult]:
    """The full battery. ``fault_gamma`` injects a non-zero adapter gain (negative control)."""
    return [
        check_gradients(seed),
        check_simplex(seed),
        check_orthogonality(),
        check_lipschitz(seed),
        check_identity_at_init(seed, fault_gamma),
        check_revin_roundtrip(seed),
        check_channel_independence(seed),
    ]
