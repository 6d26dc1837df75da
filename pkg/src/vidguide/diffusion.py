"""Desk-scale DDPM sandbox: schedule, forward/backward steps, a toy
invertible latent codec, and the pluggable denoiser interface.

All stochasticity is injected through explicit noise arguments, so every
operation is a pure function and bit-exact reproducibility follows from
the caller's seeding discipline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .attention import scaled_softmax_attention


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule with cached alpha and cumulative-alpha tables."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        a = np.asarray(self.alphas, dtype=np.float64)
        ab = np.asarray(self.alpha_bars, dtype=np.float64)
        if not (b.ndim == a.ndim == ab.ndim == 1 and len(b) == len(a) == len(ab) >= 1):
            raise ValueError("schedule tables must be equal-length 1-D arrays")
        if not ((b > 0) & (b < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        if len(ab) > 1 and not (np.diff(ab) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if not (ab > 0).all():
            raise ValueError("alpha_bar must stay positive")
        for name, arr in (("betas", b), ("alphas", a), ("alpha_bars", ab)):
            object.__setattr__(self, name, arr)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def _check_step(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside [1, {self.num_steps}]")

    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bars[t - 1])


def build_schedule(
    num_steps: int, beta_first: float = 1e-4, beta_last: float = 0.02
) -> NoiseSchedule:
    """Linear beta schedule; cumulative products run in extended precision."""
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0 < beta_first <= beta_last < 1):
        raise ValueError("betas must satisfy 0 < beta_first <= beta_last < 1")
    betas = np.linspace(beta_first, beta_last, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas.astype(np.longdouble)).astype(np.float64)
    return NoiseSchedule(betas, alphas, alpha_bars)


def forward_sample(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noising step: x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    schedule._check_step(t)
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError("x0 and noise shapes must match")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def predict_x0(x_t: np.ndarray, eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the noising step given a noise estimate."""
    schedule._check_step(t)
    ab = schedule.alpha_bar(t)
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - ab) * np.asarray(eps)) / np.sqrt(ab)


def backward_step(
    x_t: np.ndarray, x0_hat: np.ndarray, z: np.ndarray, t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """One posterior denoising step from level t to t-1.

    x_{t-1} = sqrt(abar_{t-1}) beta_t / (1 - abar_t) * x0_hat
              + (1 - abar_{t-1}) (sqrt(alpha_t) x_t + beta_t z) / (1 - abar_t)
    with z = 0 expected at t = 1.
    """
    schedule._check_step(t)
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta_t = schedule.beta(t)
    alpha_t = schedule.alpha(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    coef_x0 = np.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    rest = (1.0 - ab_prev) * (np.sqrt(alpha_t) * x_t + beta_t * np.asarray(z)) / (1.0 - ab_t)
    return coef_x0 * np.asarray(x0_hat) + rest


class ToyLatentCodec:
    """Invertible patchwise codec with a seeded orthogonal basis.

    A frame (H, W, 3) maps to a latent (H/p, W/p, 3 p^2); orthogonality
    makes decode(encode(x)) exact up to rounding and preserves energy.
    """

    def __init__(self, patch_size: int = 2, seed: int = 2024):
        if patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        self.patch_size = patch_size
        self.seed = seed
        m = 3 * patch_size * patch_size
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(100,)))
        q, r = np.linalg.qr(rng.normal(size=(m, m)))
        self.basis = q * np.sign(np.diag(r))

    @property
    def latent_channels(self) -> int:
        return self.basis.shape[0]

    def _check_dims(self, h: int, w: int) -> None:
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(
                f"frame dimensions {(h, w)} not divisible by patch size {self.patch_size}"
            )

    def encode(self, frame: np.ndarray) -> np.ndarray:
        f = np.asarray(frame, dtype=np.float64)
        if f.ndim != 3 or f.shape[2] != 3:
            raise ValueError("frame must have shape (H, W, 3)")
        h, w, _ = f.shape
        self._check_dims(h, w)
        p = self.patch_size
        blocks = f.reshape(h // p, p, w // p, p, 3).transpose(0, 2, 1, 3, 4)
        flat = blocks.reshape(h // p, w // p, 3 * p * p)
        return flat @ self.basis.T

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        if z.ndim != 3 or z.shape[2] != self.latent_channels:
            raise ValueError("latent has wrong channel count")
        p = self.patch_size
        hl, wl, _ = z.shape
        flat = z @ self.basis
        blocks = flat.reshape(hl, wl, p, p, 3).transpose(0, 2, 1, 3, 4)
        return blocks.reshape(hl * p, wl * p, 3)

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        self._check_dims(h, w)
        return h // self.patch_size, w // self.patch_size, self.latent_channels


@dataclass(frozen=True)
class DenoiseCondition:
    """Opaque conditioning payload: a style vector and a seed."""

    style: np.ndarray
    seed: int = 0

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.style, dtype=np.float64))
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ValueError("style must be a finite 1-D vector")
        object.__setattr__(self, "style", s)

    def as_dict(self) -> dict:
        return {"style": [float(v) for v in self.style], "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, payload: dict) -> "DenoiseCondition":
        return cls(np.asarray(payload["style"], dtype=np.float64), int(payload.get("seed", 0)))


@dataclass(frozen=True)
class DenoiserOutput:
    """Noise prediction plus the hooked layer's feature and attention tensors."""

    eps: np.ndarray
    features: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class ReferenceCapture:
    """Feature/query/key tensors captured during the reference pass."""

    features: np.ndarray
    q: np.ndarray
    k: np.ndarray


class Denoiser(Protocol):
    """Capability contract a denoising backend must satisfy.

    A backend predicts noise and exposes one hook point that yields the
    pre-attention feature grid and the layer's Q/K/V projections, and
    that accepts replacement features and a replacement attention output.
    Orchestration drives it in stages: ``features`` -> (optionally
    replace) -> ``project_qkv`` -> (optionally replace the attention
    output) -> ``predict_eps``; ``denoise`` runs the unmodified path.
    """

    def descriptor(self) -> dict: ...

    def features(self, x: np.ndarray, t: int, cond: DenoiseCondition) -> np.ndarray: ...

    def project_qkv(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]: ...

    def self_attention(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray: ...

    def predict_eps(
        self,
        x: np.ndarray,
        features: np.ndarray,
        attention_out: np.ndarray,
        t: int,
        cond: DenoiseCondition,
    ) -> np.ndarray: ...

    def denoise(self, x: np.ndarray, t: int, cond: DenoiseCondition) -> DenoiserOutput: ...


class ToyDenoiser:
    """Seeded encoder, one attention block, and a content-predicting head.

    The head forms a clean-content estimate from the hooked features plus
    the attention output and converts it to a noise prediction through
    the schedule identity eps = (x_t - sqrt(abar_t) content) /
    sqrt(1 - abar_t), so replacing features or the attention output
    steers the denoised result directly.  The key projection is tied to
    the query projection (plus a small independent part) so attention
    scores reflect feature similarity, as in a trained backbone.
    Deterministic in (x, t, cond); the condition's style vector and seed
    additively bias the head.  Q/K/V are (h*w, d) per the descriptor.
    """

    kind = "toy-linear-attention"

    _QK_SCALE = 3.0
    _QK_TIE = 0.8
    _CONTENT_ANCHOR = 0.65

    def __init__(
        self,
        latent_channels: int,
        schedule: NoiseSchedule,
        feature_dim: int = 8,
        style_dim: int = 4,
        weight_seed: int = 2024,
    ):
        if latent_channels < 1 or feature_dim < 1 or style_dim < 1:
            raise ValueError("dimensions must be >= 1")
        self.latent_channels = latent_channels
        self.schedule = schedule
        self.feature_dim = feature_dim
        self.style_dim = style_dim
        self.weight_seed = weight_seed

        def draw(idx: int, shape, scale: float) -> np.ndarray:
            rng = np.random.default_rng(np.random.SeedSequence(weight_seed, spawn_key=(idx,)))
            return scale * rng.normal(size=shape)

        c, d = latent_channels, feature_dim
        self.w_enc = draw(0, (c, d), 1.0 / np.sqrt(c))
        self.b_enc = draw(1, (d,), 0.2)
        self.b_time = draw(2, (d,), 0.5)
        self.w_q = draw(3, (d, d), self._QK_SCALE / np.sqrt(d))
        self.w_k = self._QK_TIE * self.w_q + (1.0 - self._QK_TIE) * draw(
            4, (d, d), self._QK_SCALE / np.sqrt(d)
        )
        self.w_v = draw(5, (d, d), 1.0 / np.sqrt(d))
        self.w_out = draw(6, (d, c), 1.0 / np.sqrt(d))
        self.b_out = draw(7, (c,), 0.1)
        self.w_style = draw(8, (style_dim, c), 1.0 / np.sqrt(style_dim))

    def descriptor(self) -> dict:
        return {
            "kind": self.kind,
            "version": 1,
            "latent_channels": self.latent_channels,
            "feature_dim": self.feature_dim,
            "style_dim": self.style_dim,
            "weight_seed": self.weight_seed,
        }

    @classmethod
    def from_descriptor(cls, payload: dict, schedule: NoiseSchedule) -> "ToyDenoiser":
        if payload.get("kind") != cls.kind:
            raise ValueError(f"descriptor kind {payload.get('kind')!r} not supported")
        return cls(
            latent_channels=int(payload["latent_channels"]),
            schedule=schedule,
            feature_dim=int(payload["feature_dim"]),
            style_dim=int(payload["style_dim"]),
            weight_seed=int(payload["weight_seed"]),
        )

    def _check_latent(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.latent_channels:
            raise ValueError("latent has wrong shape for this denoiser")
        return x

    def features(self, x: np.ndarray, t: int, cond: DenoiseCondition) -> np.ndarray:
        x = self._check_latent(x)
        tau = 1.0 / (1.0 + float(t))
        return np.tanh(x @ self.w_enc + tau * self.b_time + self.b_enc)

    def project_qkv(self, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat = np.asarray(features, dtype=np.float64).reshape(-1, self.feature_dim)
        return flat @ self.w_q, flat @ self.w_k, flat @ self.w_v

    def self_attention(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        return scaled_softmax_attention(q, k, v, 1.0)

    def _cond_bias(self, cond: DenoiseCondition) -> np.ndarray:
        if cond.style.shape != (self.style_dim,):
            raise ValueError(
                f"condition style length {cond.style.shape[0]} != descriptor {self.style_dim}"
            )
        rng = np.random.default_rng(np.random.SeedSequence(int(cond.seed), spawn_key=(9,)))
        return cond.style @ self.w_style + 0.05 * rng.normal(size=self.latent_channels)

    @staticmethod
    def _smooth_project(x: np.ndarray) -> np.ndarray:
        """Idempotent low-pass: block means over 2x2 cells (1x1 if odd)."""
        h, w, c = x.shape
        py = 2 if h % 2 == 0 else 1
        px = 2 if w % 2 == 0 else 1
        blocks = x.reshape(h // py, py, w // px, px, c).mean(axis=(1, 3), keepdims=True)
        return np.broadcast_to(blocks, (h // py, py, w // px, px, c)).reshape(h, w, c)

    def predict_content(
        self,
        x: np.ndarray,
        features: np.ndarray,
        attention_out: np.ndarray,
        t: int,
        cond: DenoiseCondition,
    ) -> np.ndarray:
        """Clean-content estimate from the hook tensors, anchored on x.

        The anchor is a low-pass projection of the naive clean-latent
        estimate x / sqrt(abar_t): it preserves the sample's own coarse
        structure while discarding fine noise, the way denoising toward a
        data manifold does.  The remainder comes from the hooked features
        plus attention output, which is the part guidance steers.
        """
        f = np.asarray(features, dtype=np.float64)
        h, w, _ = f.shape
        flat = f.reshape(-1, self.feature_dim) + np.asarray(attention_out, dtype=np.float64)
        transformed = flat @ self.w_out + self.b_out + self._cond_bias(cond)
        transformed = transformed.reshape(h, w, self.latent_channels)
        naive = np.asarray(x, dtype=np.float64) / np.sqrt(self.schedule.alpha_bar(t))
        a = self._CONTENT_ANCHOR
        return a * self._smooth_project(naive) + (1.0 - a) * transformed

    def predict_eps(
        self,
        x: np.ndarray,
        features: np.ndarray,
        attention_out: np.ndarray,
        t: int,
        cond: DenoiseCondition,
    ) -> np.ndarray:
        x = self._check_latent(x)
        content = self.predict_content(x, features, attention_out, t, cond)
        ab = self.schedule.alpha_bar(t)
        return (x - np.sqrt(ab) * content) / np.sqrt(1.0 - ab)

    def denoise(self, x: np.ndarray, t: int, cond: DenoiseCondition) -> DenoiserOutput:
        f = self.features(x, t, cond)
        q, k, v = self.project_qkv(f)
        attn = self.self_attention(q, k, v)
        eps = self.predict_eps(x, f, attn, t, cond)
        return DenoiserOutput(eps, f, q, k, v)


def single_step_reference(
    frame: np.ndarray,
    t_ref: int,
    cond: DenoiseCondition,
    codec: ToyLatentCodec,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    noise: np.ndarray,
) -> ReferenceCapture:
    """Encode, lightly noise, run the denoiser once, capture f, Q, K."""
    x0 = codec.encode(frame)
    x_t = forward_sample(x0, t_ref, noise, schedule)
    out = denoiser.denoise(x_t, t_ref, cond)
    return ReferenceCapture(out.features, out.q, out.k)
