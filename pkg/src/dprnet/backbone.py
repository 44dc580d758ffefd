"""Channel-independent DPRNet: RevIN, patch embedding, residual blocks, linear head."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .adapter import DprConfig, DprParams, dpr_forward, init_dpr_params
from .autodiff import Tensor
from .errors import ConfigError, ContractError

REVIN_EPS = 1e-5
LN_EPS = 1e-5

_DTYPES = {"double": np.float64, "single": np.float32}


@dataclass
class ModelConfig:
    lookback: int = 96
    horizon: int = 96
    channels: int = 1
    patch_len: int = 16
    stride: int = 8
    d: int = 256
    n_blocks: int = 2
    mlp_ratio: float = 2.0
    mlp_hidden: int | None = None
    dropout: float = 0.1
    revin_affine: bool = True
    use_adapter: bool = True
    K: int = 8
    d_c: int | None = None
    kernels: tuple[int, ...] = (3, 7)
    lambda_orth: float = 1e-4
    routing_mode: str = "soft"
    multiscale: bool = True
    identity_init: bool = True
    tau_init: float = 1.0
    precision: str = "double"

    def __post_init__(self):
        self.kernels = tuple(int(k) for k in self.kernels)
        if self.mlp_hidden is None:
            self.mlp_hidden = int(round(self.mlp_ratio * self.d))
        for name in ("lookback", "horizon", "channels", "patch_len", "stride", "d", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_blocks < 0:
            raise ConfigError(f"n_blocks must be >= 0, got {self.n_blocks}")
        if self.lookback < self.patch_len:
            raise ConfigError(f"lookback {self.lookback} shorter than patch length {self.patch_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.precision not in _DTYPES:
            raise ConfigError(f"precision must be one of {sorted(_DTYPES)}, got {self.precision!r}")
        self.dpr_config()  # validates adapter fields

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def n_patches(self) -> int:
        return patch_count(self.lookback, self.patch_len, self.stride)

    def dpr_config(self) -> DprConfig:
        return DprConfig(
            d=self.d,
            K=self.K,
            d_c=self.d_c,
            kernels=self.kernels,
            lambda_orth=self.lambda_orth,
            routing_mode=self.routing_mode,
            multiscale=self.multiscale,
            identity_init=self.identity_init,
            tau_init=self.tau_init,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# --------------------------------------------------------------------------- RevIN


@dataclass
class RevInState:
    mean: np.ndarray  # [B, 1, C]
    std: np.ndarray  # [B, 1, C]


class RevIN:
    def __init__(self, channels: int, affine: bool = True, eps: float = REVIN_EPS, dtype=np.float64):
        self.channels = channels
        self.affine = affine
        self.eps = eps
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=affine, name="revin.gain")
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=affine, name="revin.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias} if self.affine else {}

    def normalize(self, x: Tensor) -> tuple[Tensor, RevInState]:
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ConfigError(f"RevIN expects [B, T, {self.channels}], got {x.shape}")
        if x.shape[1] < 2:
            raise ConfigError(f"RevIN needs at least 2 time steps, got {x.shape[1]}")
        mean = x.data.mean(axis=1, keepdims=True)
        std = x.data.std(axis=1, keepdims=True)
        out = (x - mean) / (std + self.eps)
        if self.affine:
            out = out * self.gain + self.bias
        return out, RevInState(mean, std)

    def denormalize(self, y: Tensor, state: RevInState) -> Tensor:
        if y.ndim != 3 or state.mean.shape[0] != y.shape[0] or state.mean.shape[2] != y.shape[2]:
            raise ContractError(
                f"RevIN state for batch/channels {state.mean.shape[0]}/{state.mean.shape[2]} "
                f"cannot denormalize output of shape {y.shape}"
            )
        if self.affine:
            y = (y - self.bias) / (self.gain + self.eps * self.eps)
        return y * (state.std + self.eps) + state.mean


# --------------------------------------------------------------------------- patching


def patch_count(length: int, patch_len: int, stride: int) -> int:
    if length < patch_len:
        raise ConfigError(f"series length {length} shorter than patch length {patch_len}")
    remainder = (length - patch_len) % stride
    padded = length + (stride - remainder if remainder else 0)
    return (padded - patch_len) // stride + 1


def patch_index(length: int, patch_len: int, stride: int) -> np.ndarray:
    """Index array ``[L, P]``; the tail is replicate-padded with the last step."""
    n = patch_count(length, patch_len, stride)
    idx = np.arange(n)[:, None] * stride + np.arange(patch_len)[None, :]
    return np.minimum(idx, length - 1)


def patchify(x: Tensor, patch_len: int, stride: int) -> Tensor:
    """``[B, T] -> [B, L, P]`` overlapping windows."""
    return ad.take_lastdim(x, patch_index(x.shape[-1], patch_len, stride))


# --------------------------------------------------------------------------- layers


class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, dtype=np.float64):
        bound = 1.0 / math.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True, name=f"{name}.weight", dtype=dtype)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True, name=f"{name}.bias", dtype=dtype)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class LayerNorm:
    def __init__(self, d: int, name: str, dtype=np.float64):
        self.gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=f"{name}.gain")
        self.bias = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {"gain": self.gain, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, LN_EPS)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


class DprBlock:
    """``Z = H + MLP(LN(H))``; ``out = Z + (DPR(LN(Z)) - LN(Z))``.

    The adapter branch contributes only the recalibration delta, so a block
    with ``gamma == 0`` (or with the adapter removed) reduces to ``Z``.
    """

    def __init__(
        self,
        config: ModelConfig,
        index: int,
        rng: np.random.Generator,
        adapter_rng: np.random.Generator | None = None,
    ):
        dtype = config.dtype
        prefix = f"blocks.{index}"
        self.dropout_p = config.dropout
        self.ln1 = LayerNorm(config.d, f"{prefix}.ln1", dtype)
        self.fc1 = Linear(config.d, config.mlp_hidden, rng, f"{prefix}.mlp.fc1", dtype)
        self.fc2 = Linear(config.mlp_hidden, config.d, rng, f"{prefix}.mlp.fc2", dtype)
        self.dpr_config: DprConfig | None = None
        self.adapter: DprParams | None = None
        self.ln2: LayerNorm | None = None
        if config.use_adapter:
            self.ln2 = LayerNorm(config.d, f"{prefix}.ln2", dtype)
            self.dpr_config = config.dpr_config()
            self.adapter = init_dpr_params(self.dpr_config, adapter_rng or rng, dtype)

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for part, module in (("ln1", self.ln1), ("mlp.fc1", self.fc1), ("mlp.fc2", self.fc2), ("ln2", self.ln2)):
            if module is not None:
                named.update({f"{part}.{k}": v for k, v in module.parameters().items()})
        if self.adapter is not None:
            named.update({f"dpr.{k}": v for k, v in self.adapter.named_parameters().items()})
        return named

    def mlp(self, x: Tensor, rng: np.random.Generator | None) -> Tensor:
        hidden = dropout(ad.gelu(self.fc1(x)), self.dropout_p, rng)
        return self.fc2(hidden)

    def __call__(self, H: Tensor, rng: np.random.Generator | None = None, trace: list | None = None):
        Z = H + self.mlp(self.ln1(H), rng)
        if self.adapter is None:
            return Z, None
        u = self.ln2(Z)
        recalibrated, penalty = dpr_forward(u, self.adapter, self.dpr_config, trace)
        return Z + (recalibrated - u), penalty


def block_forward(H: Tensor, block: DprBlock, rng: np.random.Generator | None = None):
    return block(H, rng)


# --------------------------------------------------------------------------- model


class DprNetModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        dtype = config.dtype
        self.revin = RevIN(config.channels, config.revin_affine, dtype=dtype)
        self.embed = Linear(config.patch_len, config.d, rng, "embed", dtype)
        # blocks draw from a dedicated stream so deleting adapters leaves the
        # remaining weights unchanged for the same seed
        self.blocks = [
            DprBlock(config, i, np.random.default_rng([seed, 1, i]), np.random.default_rng([seed, 2, i]))
            for i in range(config.n_blocks)
        ]
        head_rng = np.random.default_rng([seed, 3])
        self.head = Linear(config.n_patches * config.d, config.horizon, head_rng, "head", dtype)

    def named_parameters(self) -> dict[str, Tensor]:
        named = {f"revin.{k}": v for k, v in self.revin.parameters().items()}
        named.update({f"embed.{k}": v for k, v in self.embed.parameters().items()})
        for i, block in enumerate(self.blocks):
            named.update({f"blocks.{i}.{k}": v for k, v in block.parameters().items()})
        named.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return named

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = set(named) - set(state)
        unexpected = set(state) - set(named)
        if missing or unexpected:
            raise ContractError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, tensor in named.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ContractError(f"{name}: expected shape {tensor.shape}, got {value.shape}")
            tensor.data = value.astype(tensor.dtype, copy=True)

    def copy(self) -> "DprNetModel":
        return copy.deepcopy(self)

    def without_adapters(self) -> "DprNetModel":
        """Same weights with every adapter branch removed."""
        clone = self.copy()
        clone.config = replace(clone.config, use_adapter=False)
        for block in clone.blocks:
            block.adapter = None
            block.dpr_config = None
            block.ln2 = None
        return clone

    def __call__(self, x: Tensor, rng: np.random.Generator | None = None, trace: list | None = None):
        return model_forward(x, self, rng=rng, trace=trace)


def model_forward(
    x: Tensor | np.ndarray,
    model: DprNetModel,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> tuple[Tensor, Tensor]:
    """Forecast ``[B, H_pred, C]`` from ``[B, T, C]``; also returns the summed orthogonal penalty.

    Pass ``rng`` to enable dropout (training mode).
    """
    cfg = model.config
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=cfg.dtype)
    if x.ndim != 3:
        raise ConfigError(f"input must be [B, T, C], got shape {x.shape}")
    B, T, C = x.shape
    if T != cfg.lookback:
        raise ConfigError(f"time axis: expected lookback {cfg.lookback}, got {T}")
    if C != cfg.channels:
        raise ConfigError(f"channel axis: expected {cfg.channels} channels, got {C}")

    normed, state = model.revin.normalize(x)
    series = ad.reshape(ad.transpose(normed, (0, 2, 1)), (B * C, T))
    H = model.embed(patchify(series, cfg.patch_len, cfg.stride))

    penalty = None
    for block in model.blocks:
        H, block_penalty = block(H, rng, trace)
        if block_penalty is not None:
            penalty = block_penalty if penalty is None else penalty + block_penalty
    if penalty is None:
        penalty = Tensor(0.0, dtype=cfg.dtype)

    flat = ad.reshape(H, (B * C, cfg.n_patches * cfg.d))
    out = model.head(flat)
    out = ad.transpose(ad.reshape(out, (B, C, cfg.horizon)), (0, 2, 1))
    return model.revin.denormalize(out, state), penalty


def adapter_parameter_count(config: ModelConfig) -> int:
    """Parameters one block spends on its adapter branch (including its LayerNorm)."""
    dc = config.dpr_config()
    kernels = sum(dc.active_kernels)
    return config.d * kernels + dc.perception_width * dc.d_c + dc.d_c + dc.K * (config.d + dc.d_c) + 2 + 2 * config.d


def matched_baseline_config(config: ModelConfig) -> ModelConfig:
    """Adapter-free config whose wider MLP matches the adapter's parameter budget."""
    extra = adapter_parameter_count(config)
    hidden = config.mlp_hidden + math.ceil(extra / (2 * config.d + 1))
    return replace(config, use_adapter=False, mlp_hidden=hidden)
