"""Perceive-Route-Modulate adapter for hidden tensors of shape ``[B, L, d]``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

ROUTING_MODES = ("soft", "hard")
NORM_EPS = 1e-12


def context_dim(d: int) -> int:
    return max(16, d // 4)


@dataclass
class DprConfig:
    d: int = 256
    K: int = 8
    d_c: int | None = None
    kernels: tuple[int, ...] = (3, 7)
    lambda_orth: float = 1e-4
    routing_mode: str = "soft"
    multiscale: bool = True
    identity_init: bool = True
    tau_init: float = 1.0

    def __post_init__(self):
        if self.d_c is None:
            self.d_c = context_dim(self.d)
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.d < 1 or self.d_c < 1:
            raise ConfigError(f"d and d_c must be positive, got d={self.d}, d_c={self.d_c}")
        if not self.kernels or any(k < 1 or k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.kernels}")
        if self.lambda_orth < 0:
            raise ConfigError(f"lambda_orth must be >= 0, got {self.lambda_orth}")
        if self.tau_init <= 0:
            raise ConfigError(f"tau_init must be > 0, got {self.tau_init}")
        if self.routing_mode not in ROUTING_MODES:
            raise ConfigError(f"routing_mode must be one of {ROUTING_MODES}, got {self.routing_mode!r}")

    @property
    def active_kernels(self) -> tuple[int, ...]:
        # multi-scale off collapses perception to one pointwise branch
        return self.kernels if self.multiscale else (1,)

    @property
    def perception_width(self) -> int:
        return self.d * len(self.active_kernels)


@dataclass
class DprParams:
    M: Tensor
    E: Tensor
    W1: Tensor
    b1: Tensor
    log_tau: Tensor
    gamma: Tensor
    conv_kernels: list[Tensor] = field(default_factory=list)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))

    def named_parameters(self) -> dict[str, Tensor]:
        named = {
            "M": self.M,
            "E": self.E,
            "W1": self.W1,
            "b1": self.b1,
            "log_tau": self.log_tau,
            "gamma": self.gamma,
        }
        for i, kern in enumerate(self.conv_kernels):
            named[f"conv{i}"] = kern
        return named


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_dpr_params(config: DprConfig, rng: np.random.Generator, dtype=np.float64) -> DprParams:
    d, K, d_c = config.d, config.K, config.d_c
    width = config.perception_width

    def param(values, name):
        return Tensor(values, requires_grad=True, name=name, dtype=dtype)

    convs = [param(_uniform(rng, (d, k), k, dtype), f"conv_k{k}") for k in config.active_kernels]
    M = param(_uniform(rng, (K, d), K, dtype), "M")
    E = param(_uniform(rng, (K, d_c), d_c, dtype), "E")
    W1 = param(_uniform(rng, (width, d_c), width, dtype), "W1")
    b1 = param(np.zeros(d_c, dtype=dtype), "b1")
    log_tau = param(np.asarray(math.log(config.tau_init), dtype=dtype), "log_tau")
    if config.identity_init:
        gamma = np.zeros((), dtype=dtype)
    else:
        gamma = np.asarray(rng.uniform(-1.0, 1.0), dtype=dtype)
    return DprParams(M, E, W1, b1, log_tau, param(gamma, "gamma"), convs)


def perceive(H: Tensor, params: DprParams, config: DprConfig) -> Tensor:
    """Multi-scale depthwise context: ``[B, L, d] -> [B, L, d * n_kernels]``."""
    if H.ndim != 3:
        raise ConfigError(f"expected hidden tensor [B, L, d], got shape {H.shape}")
    if H.shape[-1] != config.d:
        raise ConfigError(f"hidden width {H.shape[-1]} does not match adapter d={config.d}")
    if len(params.conv_kernels) != len(config.active_kernels):
        raise ConfigError(
            f"{len(params.conv_kernels)} conv kernels stored but config expects {config.active_kernels}"
        )
    channel_first = ad.transpose(H, (0, 2, 1))
    branches = [ad.depthwise_conv1d(channel_first, kern) for kern in params.conv_kernels]
    Z = branches[0] if len(branches) == 1 else ad.concat(branches, axis=1)
    return ad.transpose(Z, (0, 2, 1))


def routing_logits(Z: Tensor, params: DprParams) -> tuple[Tensor, Tensor]:
    if Z.shape[-1] != params.W1.shape[0]:
        raise ConfigError(f"context width {Z.shape[-1]} does not match W1 input width {params.W1.shape[0]}")
    C = ad.gelu(ad.matmul(Z, params.W1) + params.b1)
    c_hat = ad.l2_normalize_lastdim(C, NORM_EPS)
    e_hat = ad.l2_normalize_lastdim(params.E, NORM_EPS)
    cosine = ad.matmul(c_hat, ad.transpose(e_hat))
    return C, ad.exp(params.log_tau) * cosine


def route(Z: Tensor, params: DprParams, config: DprConfig) -> tuple[Tensor, Tensor]:
    """Context query ``C`` and routing weights ``Pi`` over the K patterns."""
    C, logits = routing_logits(Z, params)
    Pi = ad.softmax_lastdim(logits)
    if config.routing_mode == "hard":
        Pi = ad.one_hot_argmax(Pi)
    return C, Pi


def modulate(H: Tensor, Pi: Tensor, params: DprParams) -> Tensor:
    """``h * (1 + gamma * sum_k pi_k M_k)`` per token."""
    m = ad.matmul(Pi, params.M)
    return H * (1.0 + params.gamma * m)


def orth_penalty(M: Tensor) -> Tensor:
    K = M.shape[0]
    m_hat = ad.l2_normalize_lastdim(M, NORM_EPS)
    gram = ad.matmul(m_hat, ad.transpose(m_hat))
    resid = gram - np.eye(K, dtype=M.data.dtype)
    return ad.tsum(resid * resid) * (1.0 / K)


def dpr_forward(
    H: Tensor, params: DprParams, config: DprConfig, trace: list | None = None
) -> tuple[Tensor, Tensor]:
    Z = perceive(H, params, config)
    _, Pi = route(Z, params, config)
    if trace is not None:
        trace.append(Pi.data)
    return modulate(H, Pi, params), orth_penalty(params.M)


def lipschitz_bound(params: DprParams) -> float:
    """Upper bound on ``||h_out|| / ||h||`` for any token."""
    return 1.0 + abs(float(params.gamma.data)) * float(np.abs(params.M.data).max())
