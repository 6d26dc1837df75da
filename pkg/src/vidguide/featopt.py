"""Feature optimization toward spatial-temporal consistency.

Features are stacked per-frame grids shaped (N, h, w, d).  The temporal
term penalizes masked L1 differences between each frame and its
flow-warped predecessor; the spatial term penalizes squared deviations
between the gram matrices of unit-normalized patch vectors and those of
constant reference features.  Gradients are exact: the warp contributes
its bilinear scatter adjoint, the L1 subgradient at 0 is taken as 0,
and the reference features are constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flow import FlowField, OcclusionMask, backward_warp, warp_adjoint

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class FeatureBatch:
    """Per-frame feature grids plus the flows/masks relating neighbors.

    ``flows[i]`` lives on frame i+1 and warps frame i onto it;
    ``masks[i]`` marks where that correspondence is valid.
    """

    features: np.ndarray
    flows: Sequence[FlowField]
    masks: Sequence[OcclusionMask]

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 4:
            raise ValueError("features must have shape (N, h, w, d)")
        if not np.all(np.isfinite(f)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "features", f)
        n, h, w, _ = f.shape
        if len(self.flows) != n - 1 or len(self.masks) != n - 1:
            raise ValueError("need exactly N-1 flows and masks")
        for i, (fl, mk) in enumerate(zip(self.flows, self.masks)):
            if (fl.height, fl.width) != (h, w) or (mk.height, mk.width) != (h, w):
                raise ValueError(f"flow/mask {i} does not match feature grid {(h, w)}")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]


@dataclass(frozen=True)
class ReferenceFeatures:
    """Constant per-frame feature grids from the reference pass."""

    features: np.ndarray

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 4:
            raise ValueError("reference features must have shape (N, h, w, d)")
        if not np.all(np.isfinite(f)):
            raise ValueError("reference features must be finite")
        object.__setattr__(self, "features", f)


@dataclass(frozen=True)
class OptimConfig:
    lambda_spat: float = 50.0
    iterations: int = 20
    lr: float = 0.4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_spat < 0:
            raise ValueError("lambda_spat must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamState":
        return cls(np.zeros(shape), np.zeros(shape), 0)


@dataclass(frozen=True)
class LossValues:
    temporal: float
    spatial: float

    @property
    def total(self) -> float:
        return self.temporal + self.spatial


@dataclass(frozen=True)
class LossRow:
    iteration: int
    temporal: float
    spatial: float
    total: float


@dataclass(frozen=True)
class OptimResult:
    features: np.ndarray
    history: list[LossRow]


def temporal_loss(batch: FeatureBatch) -> float:
    """Masked L1 mismatch between each frame and its warped predecessor."""
    f = batch.features
    total = 0.0
    for i in range(batch.num_frames - 1):
        warped = backward_warp(f[i], batch.flows[i])
        resid = (f[i + 1] - warped) * batch.masks[i].values[:, :, None]
        total += float(np.abs(resid).sum())
    return total


def _normalize_patches(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalize patch rows of (P, d); returns (unit rows, norms)."""
    norms = np.linalg.norm(x, axis=1)
    return x / np.maximum(norms, NORM_FLOOR)[:, None], norms


def gram_matrix(frame_features: np.ndarray) -> np.ndarray:
    """Gram matrix of unit-normalized patch vectors of one (h, w, d) frame."""
    flat = np.asarray(frame_features, dtype=np.float64).reshape(-1, frame_features.shape[-1])
    unit, _ = _normalize_patches(flat)
    return unit @ unit.T


def spatial_loss(features: np.ndarray, ref: ReferenceFeatures, lambda_spat: float) -> float:
    """Squared gram-matrix deviation from the reference, summed over frames."""
    f = np.asarray(features, dtype=np.float64)
    if f.shape != ref.features.shape:
        raise ValueError("features and reference shapes must match")
    total = 0.0
    for i in range(f.shape[0]):
        diff = gram_matrix(f[i]) - gram_matrix(ref.features[i])
        total += float((diff * diff).sum())
    return lambda_spat * total


def loss_and_grad(
    batch: FeatureBatch, ref: ReferenceFeatures, config: OptimConfig
) -> tuple[LossValues, np.ndarray]:
    """Total loss and its exact gradient w.r.t. every feature element."""
    f = batch.features
    if f.shape != ref.features.shape:
        raise ValueError("features and reference shapes must match")
    n, h, w, d = f.shape
    grad = np.zeros_like(f)

    l_temp = 0.0
    for i in range(n - 1):
        warped = backward_warp(f[i], batch.flows[i])
        mask = batch.masks[i].values[:, :, None]
        resid = (f[i + 1] - warped) * mask
        l_temp += float(np.abs(resid).sum())
        signs = np.sign(resid) * mask
        grad[i + 1] += signs
        grad[i] -= warp_adjoint(signs, batch.flows[i])

    l_spat = 0.0
    if config.lambda_spat > 0:
        for i in range(n):
            x = f[i].reshape(-1, d)
            unit, norms = _normalize_patches(x)
            diff = unit @ unit.T - gram_matrix(ref.features[i])
            l_spat += float((diff * diff).sum())
            # dL/dU for L = lambda * sum(D^2), G = U U^T
            g_unit = 2.0 * config.lambda_spat * (diff + diff.T) @ unit
            denom = np.maximum(norms, NORM_FLOOR)
            row_dot = (x * g_unit).sum(axis=1)
            g_x = g_unit / denom[:, None]
            live = norms > NORM_FLOOR
            scale = np.zeros_like(norms)
            scale[live] = row_dot[live] / (norms[live] * denom[live] ** 2)
            g_x -= x * scale[:, None]
            grad[i] += g_x.reshape(h, w, d)
        l_spat *= config.lambda_spat

    return LossValues(l_temp, l_spat), grad


def adam_update(
    state: AdamState, values: np.ndarray, grad: np.ndarray, config: OptimConfig
) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step; returns fresh state and values."""
    if values.shape != grad.shape or state.m.shape != values.shape:
        raise ValueError("state, values and gradient shapes must match")
    step = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**step)
    v_hat = v / (1.0 - config.beta2**step)
    updated = values - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return AdamState(m, v, step), updated


def optimize_features(
    batch: FeatureBatch,
    ref: ReferenceFeatures,
    config: OptimConfig,
    track_history: bool = False,
) -> OptimResult:
    """Run the configured number of Adam iterations on the features.

    With ``track_history`` the result carries one loss row per iteration
    (row 0 is the pre-update loss, row K the final loss).
    """
    features = batch.features.copy()
    history: list[LossRow] = []
    if config.iterations == 0:
        if track_history:
            values = LossValues(
                temporal_loss(batch), spatial_loss(features, ref, config.lambda_spat)
            )
            history.append(LossRow(0, values.temporal, values.spatial, values.total))
        return OptimResult(features, history)

    state = AdamState.zeros(features.shape)
    current = batch
    for k in range(config.iterations):
        values, grad = loss_and_grad(current, ref, config)
        if track_history:
            history.append(LossRow(k, values.temporal, values.spatial, values.total))
        state, features = adam_update(state, features, grad, config)
        current = FeatureBatch(features, batch.flows, batch.masks)
    if track_history:
        final = LossValues(
            temporal_loss(current), spatial_loss(features, ref, config.lambda_spat)
        )
        history.append(
            LossRow(config.iterations, final.temporal, final.spatial, final.total)
        )
    return OptimResult(features, history)


def history_to_csv(history: Sequence[LossRow]) -> str:
    """Render per-iteration losses as CSV (iteration, L_temp, L_spat, total)."""
    lines = ["iteration,L_temp,L_spat,total"]
    lines += [f"{r.iteration},{r.temporal!r},{r.spatial!r},{r.total!r}" for r in history]
    return "\n".join(lines) + "\n"
