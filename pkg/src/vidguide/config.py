"""Translation configuration: JSON loading, validation, defaults."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .featopt import OptimConfig


class ConfigError(ValueError):
    """Raised when a configuration document is invalid."""


DEFAULTS: dict = {
    "N": 6,
    "s_min": 2,
    "s_max": 4,
    "T": 50,
    "T_start": 38,
    "t_ref": 1,
    "beta_first": 1e-4,
    "beta_last": 0.02,
    "lambda_spat": 50.0,
    "lambda_s": 5.0,
    "lambda_t": 5.0,
    "K": 20,
    "lr": 0.4,
    "adam_beta1": 0.9,
    "adam_beta2": 0.999,
    "adam_eps": 1e-8,
    "tau": 1.0,
    "block": 4,
    "radius": 8,
    "seed": 0,
    "patch_size": 2,
    "feature_dim": 8,
    "weight_seed": 2024,
    "style": [0.8, -0.4, 0.5, 0.2],
    "cond_seed": 0,
    "enable_feature_optimization": True,
    "enable_guided_attention": True,
}


@dataclass(frozen=True)
class TranslationConfig:
    """Validated knobs for a full translation run."""

    batch_size: int
    s_min: int
    s_max: int
    num_steps: int
    start_step: int
    t_ref: int
    beta_first: float
    beta_last: float
    lambda_s: float
    lambda_t: float
    optim: OptimConfig
    tau: float
    block: int
    radius: int
    seed: int
    patch_size: int
    feature_dim: int
    weight_seed: int
    style: tuple[float, ...]
    cond_seed: int
    enable_feature_optimization: bool
    enable_guided_attention: bool

    def to_dict(self) -> dict:
        return {
            "N": self.batch_size,
            "s_min": self.s_min,
            "s_max": self.s_max,
            "T": self.num_steps,
            "T_start": self.start_step,
            "t_ref": self.t_ref,
            "beta_first": self.beta_first,
            "beta_last": self.beta_last,
            "lambda_spat": self.optim.lambda_spat,
            "lambda_s": self.lambda_s,
            "lambda_t": self.lambda_t,
            "K": self.optim.iterations,
            "lr": self.optim.lr,
            "adam_beta1": self.optim.beta1,
            "adam_beta2": self.optim.beta2,
            "adam_eps": self.optim.eps,
            "tau": self.tau,
            "block": self.block,
            "radius": self.radius,
            "seed": self.seed,
            "patch_size": self.patch_size,
            "feature_dim": self.feature_dim,
            "weight_seed": self.weight_seed,
            "style": list(self.style),
            "cond_seed": self.cond_seed,
            "enable_feature_optimization": self.enable_feature_optimization,
            "enable_guided_attention": self.enable_guided_attention,
        }

    def with_seed(self, seed: int) -> "TranslationConfig":
        merged = self.to_dict()
        merged["seed"] = seed
        return config_from_dict(merged)


def _require_int(values: dict, key: str, low=None, high=None) -> int:
    v = values[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config: {key}: must be an integer")
    if low is not None and v < low:
        raise ConfigError(f"config: {key}: must be >= {low}")
    if high is not None and v > high:
        raise ConfigError(f"config: {key}: must be <= {high}")
    return v


def _require_number(values: dict, key: str, low=None, low_open=False, high=None) -> float:
    v = values[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"config: {key}: must be a finite number")
    v = float(v)
    if low is not None and (v <= low if low_open else v < low):
        op = ">" if low_open else ">="
        raise ConfigError(f"config: {key}: must be {op} {low}")
    if high is not None and v > high:
        raise ConfigError(f"config: {key}: must be <= {high}")
    return v


def _require_bool(values: dict, key: str) -> bool:
    v = values[key]
    if not isinstance(v, bool):
        raise ConfigError(f"config: {key}: must be a boolean")
    return v


def config_from_dict(payload: dict) -> TranslationConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config: document must be a JSON object")
    unknown = sorted(set(payload) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"config: unknown key {unknown[0]!r}")
    values = dict(DEFAULTS)
    values.update(payload)

    n = _require_int(values, "N", low=3)
    s_min = _require_int(values, "s_min", low=1)
    s_max = _require_int(values, "s_max", low=1)
    if s_max < s_min:
        raise ConfigError("config: s_max: must be >= s_min")
    num_steps = _require_int(values, "T", low=1)
    start_step = _require_int(values, "T_start", low=1, high=num_steps)
    t_ref = _require_int(values, "t_ref", low=1, high=num_steps)
    beta_first = _require_number(values, "beta_first", low=0.0, low_open=True)
    beta_last = _require_number(values, "beta_last", low=0.0, low_open=True)
    if not beta_first <= beta_last or not beta_last < 1.0:
        raise ConfigError("config: beta_last: must satisfy beta_first <= beta_last < 1")
    lambda_spat = _require_number(values, "lambda_spat", low=0.0)
    lambda_s = _require_number(values, "lambda_s", low=0.0, low_open=True)
    lambda_t = _require_number(values, "lambda_t", low=0.0, low_open=True)
    iterations = _require_int(values, "K", low=0)
    lr = _require_number(values, "lr", low=0.0, low_open=True)
    beta1 = _require_number(values, "adam_beta1", low=0.0, low_open=True)
    beta2 = _require_number(values, "adam_beta2", low=0.0, low_open=True)
    if beta1 >= 1 or beta2 >= 1:
        raise ConfigError("config: adam_beta1/adam_beta2: must lie in (0, 1)")
    adam_eps = _require_number(values, "adam_eps", low=0.0, low_open=True)
    tau = _require_number(values, "tau", low=0.0, low_open=True)
    block = _require_int(values, "block", low=1)
    radius = _require_int(values, "radius", low=0)
    seed = _require_int(values, "seed", low=0, high=2**64 - 1)
    patch_size = _require_int(values, "patch_size", low=1)
    feature_dim = _require_int(values, "feature_dim", low=1)
    weight_seed = _require_int(values, "weight_seed", low=0)
    cond_seed = _require_int(values, "cond_seed", low=0)
    style = values["style"]
    if (
        not isinstance(style, (list, tuple))
        or not style
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in style)
        or not np.all(np.isfinite(np.asarray(style, dtype=np.float64)))
    ):
        raise ConfigError("config: style: must be a non-empty list of finite numbers")
    enable_opt = _require_bool(values, "enable_feature_optimization")
    enable_attn = _require_bool(values, "enable_guided_attention")

    return TranslationConfig(
        batch_size=n,
        s_min=s_min,
        s_max=s_max,
        num_steps=num_steps,
        start_step=start_step,
        t_ref=t_ref,
        beta_first=beta_first,
        beta_last=beta_last,
        lambda_s=lambda_s,
        lambda_t=lambda_t,
        optim=OptimConfig(
            lambda_spat=lambda_spat,
            iterations=iterations,
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=adam_eps,
        ),
        tau=tau,
        block=block,
        radius=radius,
        seed=seed,
        patch_size=patch_size,
        feature_dim=feature_dim,
        weight_seed=weight_seed,
        style=tuple(float(v) for v in style),
        cond_seed=cond_seed,
        enable_feature_optimization=enable_opt,
        enable_guided_attention=enable_attn,
    )


def load_config(path) -> TranslationConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: {path}: file not found")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path}: invalid JSON ({exc})")
    return config_from_dict(payload)


def default_config() -> TranslationConfig:
    return config_from_dict({})
