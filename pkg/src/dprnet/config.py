"""Flat ``key = value`` run configuration with sections.

Every key has a default; the defaults reproduce the reference DPRNet
hyperparameters. Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import ModelConfig
from .errors import ConfigError
from .training import TrainConfig

ABLATIONS = ("mscale", "ortho", "init", "route", "dpr")

# key -> (section, parser, default)
_BOOL = "bool"
SCHEMA: dict[str, tuple[str, str, object]] = {
    "lookback": ("model", "int", 96),
    "horizon": ("model", "int", 96),
    "patch_len": ("model", "int", 16),
    "stride": ("model", "int", 8),
    "d": ("model", "int", 256),
    "n_blocks": ("model", "int", 2),
    "mlp_ratio": ("model", "float", 2.0),
    "dropout": ("model", "float", 0.1),
    "revin_affine": ("model", _BOOL, True),
    "precision": ("model", "str", "double"),
    "K": ("dpr", "int", 8),
    "d_c": ("dpr", "optint", None),
    "kernels": ("dpr", "ints", (3, 7)),
    "lambda_orth": ("dpr", "float", 1e-4),
    "tau_init": ("dpr", "float", 1.0),
    "identity_init": ("dpr", _BOOL, True),
    "routing": ("dpr", "str", "soft"),
    "multiscale": ("dpr", _BOOL, True),
    "use_adapter": ("dpr", _BOOL, True),
    "lr": ("train", "float", 1e-3),
    "batch_size": ("train", "int", 32),
    "patience": ("train", "int", 10),
    "max_epochs": ("train", "int", 100),
    "seed": ("train", "int", 0),
    "grad_clip": ("train", "optfloat", None),
    "path": ("data", "str", ""),
    "split": ("data", "floats", (0.7, 0.1, 0.2)),
}
SECTIONS = ("model", "dpr", "train", "data")


def _parse(kind: str, text: str, key: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        if kind == _BOOL:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "optint":
            return None if text.lower() in ("", "auto", "none") else int(text)
        if kind == "optfloat":
            return None if text.lower() in ("", "none", "off") else float(text)
        if kind == "ints":
            return tuple(int(v) for v in text.replace(",", " ").split())
        if kind == "floats":
            return tuple(float(v) for v in text.replace(",", " ").replace(":", " ").split())
    except ValueError as exc:
        raise ConfigError(f"invalid value for {key}: {text!r}") from exc
    raise AssertionError(kind)


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[2] for k, v in SCHEMA.items()})

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value) -> "RunConfig":
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        values = dict(self.values)
        values[key] = value
        return RunConfig(values)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        values = {k: v[2] for k, v in SCHEMA.items()}
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in SCHEMA:
                    raise ConfigError(f"unknown config key {key!r} in [{section}]")
                expected = SCHEMA[key][0]
                if expected != section:
                    raise ConfigError(f"key {key!r} belongs in [{expected}], found in [{section}]")
                values[key] = _parse(SCHEMA[key][1], raw, key)
        return cls(values)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_text(path.read_text(encoding="utf-8"))

    def to_text(self) -> str:
        lines = []
        for section in SECTIONS:
            lines.append(f"[{section}]")
            for key, (sec, _, _) in SCHEMA.items():
                if sec == section:
                    lines.append(f"{key} = {_format(self.values[key])}")
            lines.append("")
        return "\n".join(lines)

    def model_config(self, channels: int) -> ModelConfig:
        v = self.values
        return ModelConfig(
            lookback=v["lookback"],
            horizon=v["horizon"],
            channels=channels,
            patch_len=v["patch_len"],
            stride=v["stride"],
            d=v["d"],
            n_blocks=v["n_blocks"],
            mlp_ratio=v["mlp_ratio"],
            dropout=v["dropout"],
            revin_affine=v["revin_affine"],
            use_adapter=v["use_adapter"],
            K=v["K"],
            d_c=v["d_c"],
            kernels=v["kernels"],
            lambda_orth=v["lambda_orth"],
            routing_mode=v["routing"],
            multiscale=v["multiscale"],
            identity_init=v["identity_init"],
            tau_init=v["tau_init"],
            precision=v["precision"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            lr=v["lr"],
            batch_size=v["batch_size"],
            patience=v["patience"],
            max_epochs=v["max_epochs"],
            lambda_orth=v["lambda_orth"],
            seed=v["seed"],
            grad_clip=v["grad_clip"],
        )


def apply_ablation(config: RunConfig, name: str) -> RunConfig:
    """Switch off one component, named after the ablation variants."""
    if name == "mscale":
        return config.set("multiscale", False)
    if name == "ortho":
        return config.set("lambda_orth", 0.0)
    if name == "init":
        return config.set("identity_init", False)
    if name == "route":
        return config.set("routing", "hard")
    if name == "dpr":
        return config.set("use_adapter", False)
    raise ConfigError(f"unknown ablation {name!r}; choose from {ABLATIONS}")


def config_digest(model_config: ModelConfig) -> bytes:
    canonical = json.dumps(model_config.to_dict(), sort_keys=True, default=list)
    return hashlib.sha256(canonical.encode("utf-8")).digest()
