"""Fast built-in diagnostics: gradient checks and attention oracles.

Each check recomputes its expected values through an independent route
(finite differences, explicit gather-then-dense attention, scalar
formula evaluation) so a pass certifies the implementation, not itself.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention, diffusion, featopt, flow


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def _max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def _fd_gradient(batch, ref, config, step=1e-4) -> np.ndarray:
    base = batch.features
    grad = np.zeros_like(base)
    it = np.nditer(base, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        for sign in (+1.0, -1.0):
            bumped = base.copy()
            bumped[idx] += sign * step
            nb = featopt.FeatureBatch(bumped, batch.flows, batch.masks)
            loss = featopt.temporal_loss(nb) + featopt.spatial_loss(
                bumped, ref, config.lambda_spat
            )
            grad[idx] += sign * loss
        grad[idx] /= 2.0 * step
        it.iternext()
    return grad


def check_gradient_fd() -> CheckResult:
    rng = np.random.default_rng(11)
    n, h, w, d = 2, 4, 4, 3
    feats = 2.0 * rng.normal(size=(n, h, w, d))
    flows = [flow.FlowField(0.8 * rng.normal(size=(h, w, 2)))]
    masks = [flow.OcclusionMask.from_bool(rng.random((h, w)) > 0.3)]
    batch = featopt.FeatureBatch(feats, flows, masks)
    ref = featopt.ReferenceFeatures(2.0 * rng.normal(size=(n, h, w, d)))
    config = featopt.OptimConfig(lambda_spat=5.0)
    _, analytic = featopt.loss_and_grad(batch, ref, config)
    numeric = _fd_gradient(batch, ref, config)
    err = _max_rel_err(analytic, numeric)
    return CheckResult("gradient-finite-difference", err < 1e-4, f"max rel err {err:.2e}")


def check_cross_frame_oracle() -> CheckResult:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(5):
        n, h, w, d = 2, 2, 3, 4
        q = rng.normal(size=(n, h, w, d))
        k = rng.normal(size=(n, h, w, d))
        v = rng.normal(size=(n, h, w, d))
        keep = rng.random(h * w) > 0.5
        triples = [(0, r, c) for r in range(h) for c in range(w)]
        triples += [
            (1, r, c) for r in range(h) for c in range(w) if keep[r * w + c]
        ]
        patches = attention.PatchIndexSet(np.array(triples), n, h, w)
        got = attention.efficient_cross_frame_attention(q, k, v, patches)
        ids = patches.flat_ids()
        k_sel = k.reshape(-1, d)[ids]
        v_sel = v.reshape(-1, d)[ids]
        scores = q.reshape(-1, d) @ k_sel.T / np.sqrt(d)
        weights = np.exp(scores - scores.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        expected = (weights @ v_sel).reshape(n, h, w, d)
        worst = max(worst, float(np.abs(got - expected).max()))
    return CheckResult("cross-frame-gather-oracle", worst < 1e-6, f"max abs err {worst:.2e}")


def check_guided_attention_scalars() -> CheckResult:
    # two patches, d = 2; compare against direct scalar softmax evaluation
    q = np.array([[[[1.0, 0.0], [0.0, 2.0]]]])
    k = np.array([[[[0.5, 1.0], [1.0, -1.0]]]])
    v = np.array([[[[2.0, 0.0], [0.0, 4.0]]]])
    lam = 3.0
    d = 2
    s = q.reshape(2, 2) @ k.reshape(2, 2).T / (lam * np.sqrt(d))
    e = np.exp(s - s.max(axis=1, keepdims=True))
    wts = e / e.sum(axis=1, keepdims=True)
    expected = wts @ q.reshape(2, 2)
    got = attention.spatial_guided_attention(q, q, k, lam).reshape(2, 2)
    err_spatial = float(np.abs(got - expected).max())

    traj = attention.TrajectorySet([np.array([[0, 0, 0], [1, 0, 0]])], 2, 1, 1)
    q2 = np.array([[[[1.0, 0.0]]], [[[0.0, 1.0]]]])
    k2 = np.array([[[[1.0, 1.0]]], [[[1.0, -1.0]]]])
    v2 = np.array([[[[2.0, 0.0]]], [[[0.0, 2.0]]]])
    s2 = q2.reshape(2, 2) @ k2.reshape(2, 2).T / (lam * np.sqrt(d))
    e2 = np.exp(s2 - s2.max(axis=1, keepdims=True))
    w2 = e2 / e2.sum(axis=1, keepdims=True)
    expected2 = w2 @ v2.reshape(2, 2)
    got2 = attention.temporal_guided_attention(q2, k2, v2, traj, lam).reshape(2, 2)
    err_temporal = float(np.abs(got2 - expected2).max())
    err = max(err_spatial, err_temporal)
    return CheckResult("guided-attention-scalar-oracle", err < 1e-8, f"max abs err {err:.2e}")


def check_ddpm_roundtrip() -> CheckResult:
    schedule = diffusion.build_schedule(50)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(20):
        x0 = rng.normal(size=(3, 3, 2))
        noise = rng.normal(size=(3, 3, 2))
        t = int(rng.integers(1, 51))
        x_t = diffusion.forward_sample(x0, t, noise, schedule)
        back = diffusion.predict_x0(x_t, noise, t, schedule)
        worst = max(worst, float(np.abs(back - x0).max()))
    return CheckResult("ddpm-roundtrip", worst < 1e-6, f"max abs err {worst:.2e}")


def check_warp_identity() -> CheckResult:
    rng = np.random.default_rng(5)
    src = rng.random((6, 5, 3))
    out = flow.backward_warp(src, flow.synth_flow("zero", 6, 5))
    ok = bool(np.array_equal(out, src))
    return CheckResult("zero-flow-warp-identity", ok, "bit-exact" if ok else "mismatch")


ALL_CHECKS = [
    check_warp_identity,
    check_ddpm_roundtrip,
    check_gradient_fd,
    check_cross_frame_oracle,
    check_guided_attention_scalars,
]


def run_selftest() -> list[CheckResult]:
    return [check() for check in ALL_CHECKS]
