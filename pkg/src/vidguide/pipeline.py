"""Video translation orchestration: keyframe planning, batched denoising
with correspondence guidance, anchor threading, non-keyframe
interpolation, and the flow-aligned consistency metric.

Frame indices exposed to users (keyframe lists, anchor ids) are 1-based
to match on-disk frame names; array indices in code are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionBundle,
    PatchIndexSet,
    ScaleParams,
    build_flow_trajectories,
    build_unique_patch_index,
    efficient_cross_frame_attention,
    guided_attention_layer,
)
from .config import TranslationConfig
from .diffusion import (
    DenoiseCondition,
    Denoiser,
    NoiseSchedule,
    ToyDenoiser,
    ToyLatentCodec,
    backward_step,
    build_schedule,
    forward_sample,
    predict_x0,
    single_step_reference,
)
from .featopt import FeatureBatch, OptimResult, ReferenceFeatures, optimize_features
from .flow import (
    FlowField,
    OcclusionMask,
    _bilinear,
    backward_warp,
    compute_occlusion_mask,
    downsample_to_latent,
    estimate_flow_block_matching,
)
from .frames import validate_frame

# Purpose indices for expanding the run seed into independent streams.
NOISE_INIT = 0  # initial noising of each frame's latent
NOISE_STEP = 1  # per-step posterior noise z_t
NOISE_REF = 2  # reference-pass noise


def noise_stream(seed: int, purpose: int, frame_id: int = 0, step: int = 0) -> np.random.Generator:
    """Deterministic per-purpose generator split from the run seed."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(purpose, frame_id, step))
    )


# ---------------------------------------------------------------------------
# keyframe selection


@dataclass(frozen=True)
class KeyframePlan:
    """Selected keyframes (1-based, ascending, containing 1 and M)."""

    indices: list[int]
    total_frames: int
    s_min: int
    s_max: int
    motion: list[float]


def select_keyframes(frames, s_min: int, s_max: int) -> KeyframePlan:
    """Gap-bounded keyframe selection driven by inter-frame motion.

    Starts from [1, M]; while some gap exceeds ``s_max``, inserts the
    frame with the largest motion score among candidates strictly inside
    an oversized gap (ties: smallest index; all-zero scores: the first
    oversized gap's midpoint), then zeroes scores within ``s_min`` of the
    insertion.
    """
    m = len(frames)
    if m < 2:
        raise ValueError("need at least two frames")
    if not (1 <= s_min <= s_max < m):
        raise ValueError(f"need 1 <= s_min <= s_max < M, got {(s_min, s_max, m)}")
    motion = np.zeros(m + 1)  # 1-based
    for i in range(s_min + 1, m - s_min + 1):
        diff = np.asarray(frames[i - 1], dtype=np.float64) - np.asarray(
            frames[i - 2], dtype=np.float64
        )
        motion[i] = float(np.sqrt((diff * diff).sum()))
    initial_motion = [float(v) for v in motion[1:]]

    selected = [1, m]
    scores = motion.copy()
    while True:
        gaps = [
            (selected[j], selected[j + 1])
            for j in range(len(selected) - 1)
            if selected[j + 1] - selected[j] > s_max
        ]
        if not gaps:
            break
        candidates = [i for lo, hi in gaps for i in range(lo + 1, hi)]
        best = max(candidates, key=lambda i: (scores[i], -i))
        if scores[best] <= 0.0:
            lo, hi = gaps[0]
            best = (lo + hi) // 2
        selected.append(best)
        selected.sort()
        for j in range(best - s_min + 1, best + s_min):
            if 1 <= j <= m:
                scores[j] = 0.0
    return KeyframePlan(selected, m, s_min, s_max, initial_motion)


# ---------------------------------------------------------------------------
# batch planning


@dataclass(frozen=True)
class BatchPlan:
    """Overlapping batches of 0-based positions into the keyframe list."""

    batches: list[list[int]]
    batch_size: int


def plan_batches(num_keyframes: int, batch_size: int) -> BatchPlan:
    """Split keyframe positions into batches of at most ``batch_size``.

    Batch k (1-based) holds positions {1, (k-1)(N-2)+2, ..., k(N-2)+2}
    clamped to the list length, so consecutive batches share the first
    keyframe and the previous batch's last keyframe.
    """
    if batch_size < 3:
        raise ValueError("batch size must be >= 3 (the overlap needs two shared slots)")
    if num_keyframes < 2:
        raise ValueError("need at least two keyframes")
    step = batch_size - 2
    batches = []
    k = 1
    while True:
        stop = min(k * step + 2, num_keyframes)  # exclusive 0-based end
        if k == 1:
            batches.append(list(range(stop)))
        else:
            batches.append([0] + list(range((k - 1) * step + 1, stop)))
        if k * step + 2 >= num_keyframes:
            break
        k += 1
    return BatchPlan(batches, batch_size)


# ---------------------------------------------------------------------------
# correspondence maps


@dataclass(frozen=True)
class PairMaps:
    """Both flow directions and validity masks for one frame pair (a, b).

    ``flow_ab`` lives on b and pulls a forward; ``flow_ba`` lives on a
    and points where a's content lands in b; masks validate their
    same-named flows.
    """

    flow_ab: FlowField
    flow_ba: FlowField
    mask_ab: OcclusionMask
    mask_ba: OcclusionMask


def pair_correspondence(frame_a, frame_b, block: int, radius: int, tau: float) -> PairMaps:
    flow_ab = estimate_flow_block_matching(frame_a, frame_b, block, radius)
    flow_ba = estimate_flow_block_matching(frame_b, frame_a, block, radius)
    mask_ab = compute_occlusion_mask(flow_ab, flow_ba, tau)
    mask_ba = compute_occlusion_mask(flow_ba, flow_ab, tau)
    return PairMaps(flow_ab, flow_ba, mask_ab, mask_ba)


def latent_pair_maps(maps: PairMaps, factor: int) -> PairMaps:
    flow_ab, mask_ab = downsample_to_latent(maps.flow_ab, maps.mask_ab, factor)
    flow_ba, mask_ba = downsample_to_latent(maps.flow_ba, maps.mask_ba, factor)
    return PairMaps(flow_ab, flow_ba, mask_ab, mask_ba)


# ---------------------------------------------------------------------------
# anchors


@dataclass
class AnchorCache:
    """Recorded per-step latents of designated frames, keyed by frame id."""

    latents: dict[int, dict[int, np.ndarray]] = field(default_factory=dict)

    def store(self, frame_id: int, level: int, latent: np.ndarray) -> None:
        self.latents.setdefault(frame_id, {})[level] = np.array(latent, copy=True)

    def get(self, frame_id: int, level: int) -> np.ndarray | None:
        return self.latents.get(frame_id, {}).get(level)

    def has_frame(self, frame_id: int) -> bool:
        return frame_id in self.latents

    def merge(self, other: "AnchorCache") -> None:
        for frame_id, levels in other.latents.items():
            for level, latent in levels.items():
                self.store(frame_id, level, latent)


# ---------------------------------------------------------------------------
# batched denoising


@dataclass(frozen=True)
class BatchResult:
    latents_x0: list[np.ndarray]
    anchors_out: AnchorCache
    loss_rows: list[dict]
    steps_run: int
    optimizer_iterations: int
    latent_trace: dict[int, dict[int, np.ndarray]] | None = None


def translate_batch(
    frames: list[np.ndarray],
    frame_ids: list[int],
    refs: list,
    config: TranslationConfig,
    schedule: NoiseSchedule,
    codec: ToyLatentCodec,
    denoiser: Denoiser,
    cond: DenoiseCondition,
    anchors_in: AnchorCache | None = None,
    anchor_ids: tuple[int, int] | None = None,
    trace_levels: bool = False,
) -> BatchResult:
    """Jointly denoise one batch of keyframes with guidance hooks.

    Per step: run the denoiser to its hook, optimize the features toward
    input-video correspondence, compute the guided attention output,
    finish the noise prediction, apply the posterior step, then overwrite
    any frame present in ``anchors_in`` at the new level and record the
    batch's first/last frames into the returned anchors.
    """
    if not frames:
        raise ValueError("empty batch")
    if len(frames) != len(frame_ids) or len(frames) != len(refs):
        raise ValueError("frames, frame_ids and refs lengths must match")
    anchors_in = anchors_in or AnchorCache()
    anchor_ids = anchor_ids or (frame_ids[0], frame_ids[-1])
    n = len(frames)
    scales = ScaleParams(config.lambda_s, config.lambda_t)

    # Correspondence guidance comes from the input frames, computed once.
    lat_maps: list[PairMaps] = []
    for i in range(n - 1):
        maps = pair_correspondence(frames[i], frames[i + 1], config.block, config.radius, config.tau)
        lat_maps.append(latent_pair_maps(maps, config.patch_size))

    h0, w0, _ = validate_frame(frames[0]).shape
    hl, wl, _ = codec.latent_shape(h0, w0)
    if config.enable_guided_attention:
        patches = build_unique_patch_index([m.mask_ab for m in lat_maps], hl, wl)
        trajectories = build_flow_trajectories(
            [m.flow_ba for m in lat_maps], [m.mask_ab for m in lat_maps], hl, wl
        )
    else:
        patches = PatchIndexSet.all_patches(n, hl, wl)
        trajectories = None

    ref_features = ReferenceFeatures(np.stack([r.features for r in refs]))
    q_ref = np.stack([r.q.reshape(hl, wl, -1) for r in refs])
    k_ref = np.stack([r.k.reshape(hl, wl, -1) for r in refs])

    t_start = config.start_step
    x = np.stack(
        [
            forward_sample(
                codec.encode(frames[i]),
                t_start,
                noise_stream(config.seed, NOISE_INIT, frame_ids[i]).standard_normal(
                    (hl, wl, codec.latent_channels)
                ),
                schedule,
            )
            for i in range(n)
        ]
    )

    anchors_out = AnchorCache()
    trace: dict[int, dict[int, np.ndarray]] | None = {fid: {} for fid in frame_ids} if trace_levels else None

    def sync_level(level: int) -> None:
        for i, fid in enumerate(frame_ids):
            replacement = anchors_in.get(fid, level)
            if replacement is not None:
                x[i] = replacement
        for fid in anchor_ids:
            i = frame_ids.index(fid)
            anchors_out.store(fid, level, x[i])
        if trace is not None:
            for i, fid in enumerate(frame_ids):
                trace[fid][level] = np.array(x[i], copy=True)

    sync_level(t_start)

    loss_rows: list[dict] = []
    optimizer_iterations = 0
    steps_run = 0
    for t in range(t_start, 0, -1):
        feats = np.stack([denoiser.features(x[i], t, cond) for i in range(n)])
        if config.enable_feature_optimization and config.optim.iterations > 0:
            batch = FeatureBatch(feats, [m.flow_ab for m in lat_maps], [m.mask_ab for m in lat_maps])
            result: OptimResult = optimize_features(batch, ref_features, config.optim, track_history=True)
            feats = result.features
            optimizer_iterations += config.optim.iterations
            loss_rows.append(
                {
                    "t": t,
                    "loss_initial": result.history[0].total,
                    "loss_final": result.history[-1].total,
                }
            )
        qs, ks, vs = [], [], []
        for i in range(n):
            q, k, v = denoiser.project_qkv(feats[i])
            qs.append(q.reshape(hl, wl, -1))
            ks.append(k.reshape(hl, wl, -1))
            vs.append(v.reshape(hl, wl, -1))
        q_all, k_all, v_all = np.stack(qs), np.stack(ks), np.stack(vs)
        if config.enable_guided_attention:
            bundle = AttentionBundle(q_all, k_all, v_all, q_ref, k_ref)
            attn = guided_attention_layer(bundle, patches, trajectories, scales)
        else:
            attn = efficient_cross_frame_attention(q_all, k_all, v_all, patches)
        eps = np.stack(
            [
                denoiser.predict_eps(x[i], feats[i], attn[i].reshape(hl * wl, -1), t, cond)
                for i in range(n)
            ]
        )
        x0_hat = predict_x0(x, eps, t, schedule)
        if t > 1:
            z = np.stack(
                [
                    noise_stream(config.seed, NOISE_STEP, frame_ids[i], t).standard_normal(x[0].shape)
                    for i in range(n)
                ]
            )
        else:
            z = np.zeros_like(x)
        x = backward_step(x, x0_hat, z, t, schedule)
        steps_run += 1
        sync_level(t - 1)

    return BatchResult(
        latents_x0=[x[i] for i in range(n)],
        anchors_out=anchors_out,
        loss_rows=loss_rows,
        steps_run=steps_run,
        optimizer_iterations=optimizer_iterations,
        latent_trace=trace,
    )


# ---------------------------------------------------------------------------
# non-keyframe interpolation


def _extend_chain(
    flow: np.ndarray, valid: np.ndarray, next_flow: FlowField, next_mask: OcclusionMask
) -> tuple[np.ndarray, np.ndarray]:
    """Compose one more adjacent hop onto a flow chain defined on the target."""
    h, w = valid.shape
    ys, xs = np.mgrid[0:h, 0:w]
    qy = ys + flow[:, :, 1]
    qx = xs + flow[:, :, 0]
    in_bounds = (qy >= 0.0) & (qy <= h - 1.0) & (qx >= 0.0) & (qx <= w - 1.0)
    cy = np.clip(qy, 0.0, h - 1.0)
    cx = np.clip(qx, 0.0, w - 1.0)
    step = _bilinear(next_flow.vectors, cy, cx)
    mask_val = _bilinear(next_mask.values.astype(np.float64)[:, :, None], cy, cx)[:, :, 0]
    return flow + step, valid & in_bounds & (mask_val >= 0.999)


def _chain_from_earlier(pair_maps: list[PairMaps], target: int, source: int):
    """Flow on frame ``target`` pulling keyframe ``source`` (< target) forward."""
    maps = pair_maps[target - 2]  # pair (target-1, target)
    flow = maps.flow_ab.vectors.copy()
    valid = maps.mask_ab.values.astype(bool)
    for j in range(target - 1, source, -1):
        prev = pair_maps[j - 2]  # pair (j-1, j): flow_ab lives on j
        flow, valid = _extend_chain(flow, valid, prev.flow_ab, prev.mask_ab)
    return FlowField(flow), valid


def _chain_from_later(pair_maps: list[PairMaps], target: int, source: int):
    """Flow on frame ``target`` pulling keyframe ``source`` (> target) backward."""
    maps = pair_maps[target - 1]  # pair (target, target+1): flow_ba lives on target
    flow = maps.flow_ba.vectors.copy()
    valid = maps.mask_ba.values.astype(bool)
    for j in range(target + 1, source):
        nxt = pair_maps[j - 1]  # pair (j, j+1): flow_ba lives on j
        flow, valid = _extend_chain(flow, valid, nxt.flow_ba, nxt.mask_ba)
    return FlowField(flow), valid


def interpolate_nonkeyframes(
    keyframe_outputs: dict[int, np.ndarray],
    pair_maps: list[PairMaps],
    total_frames: int,
) -> dict[int, np.ndarray]:
    """Fill non-keyframes by warping both enclosing translated keyframes.

    Warps follow chains of adjacent input-video flows; contributions are
    blended with temporal-proximity weights renormalized over valid
    pixels, falling back to the nearer keyframe's clamped warp where
    neither contribution is valid.
    """
    if len(pair_maps) != total_frames - 1:
        raise ValueError("need one pair map per adjacent frame pair")
    keyframes = sorted(keyframe_outputs)
    outputs: dict[int, np.ndarray] = {}
    for m in range(1, total_frames + 1):
        if m in keyframe_outputs:
            continue
        earlier = [k for k in keyframes if k < m]
        later = [k for k in keyframes if k > m]
        if not earlier or not later:
            raise ValueError(f"frame {m} is not enclosed by translated keyframes")
        a, b = earlier[-1], later[0]
        flow_a, valid_a = _chain_from_earlier(pair_maps, m, a)
        flow_b, valid_b = _chain_from_later(pair_maps, m, b)
        warp_a = backward_warp(keyframe_outputs[a], flow_a)
        warp_b = backward_warp(keyframe_outputs[b], flow_b)
        weight_a = (b - m) / (b - a) * valid_a.astype(np.float64)
        weight_b = (m - a) / (b - a) * valid_b.astype(np.float64)
        denom = weight_a + weight_b
        fallback = warp_a if (m - a) <= (b - m) else warp_b
        safe = np.maximum(denom, 1e-12)[:, :, None]
        blended = (weight_a[:, :, None] * warp_a + weight_b[:, :, None] * warp_b) / safe
        outputs[m] = np.clip(np.where(denom[:, :, None] > 0.0, blended, fallback), 0.0, 1.0)
    return outputs


# ---------------------------------------------------------------------------
# metric


def pixel_mse(frames, block: int = 4, radius: int = 8, tau: float = 1.0) -> float:
    """Mean squared error between flow-aligned consecutive frames.

    Each frame is warped onto its successor along estimated flow; the
    error is averaged over valid (non-occluded) pixels and then over
    pairs.  Fully occluded pairs are skipped; if every pair is skipped
    the metric is undefined and raises.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    totals = []
    for i in range(len(frames) - 1):
        maps = pair_correspondence(frames[i], frames[i + 1], block, radius, tau)
        mask = maps.mask_ab.values.astype(np.float64)
        count = mask.sum()
        if count == 0:
            continue
        warped = backward_warp(frames[i], maps.flow_ab)
        diff = (warped - np.asarray(frames[i + 1], dtype=np.float64)) ** 2
        totals.append(float((diff * mask[:, :, None]).sum() / (count * diff.shape[2])))
    if not totals:
        raise ValueError("all frame pairs fully occluded; metric undefined")
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# full translation


@dataclass(frozen=True)
class TranslationResult:
    frames: list[np.ndarray]
    manifest: dict


def translate_video(frames, config: TranslationConfig) -> TranslationResult:
    """Translate a frame sequence end to end.

    Keyframes are selected, batched, and jointly denoised with anchor
    threading; non-keyframes are interpolated from translated keyframes
    along input-video flows; the manifest records plans, losses, metrics
    and deterministic work counters.
    """
    frames = [validate_frame(f, f"frame {i + 1}") for i, f in enumerate(frames)]
    m = len(frames)
    if m < 2:
        raise ValueError("need at least two frames")
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValueError("frames must share dimensions")
    h, w, _ = frames[0].shape
    if h % config.patch_size or w % config.patch_size:
        raise ValueError(
            f"frame dimensions {(h, w)} not divisible by patch_size {config.patch_size}"
        )

    schedule = build_schedule(config.num_steps, config.beta_first, config.beta_last)
    codec = ToyLatentCodec(config.patch_size, seed=config.weight_seed)
    denoiser = ToyDenoiser(
        latent_channels=codec.latent_channels,
        schedule=schedule,
        feature_dim=config.feature_dim,
        style_dim=len(config.style),
        weight_seed=config.weight_seed,
    )
    cond = DenoiseCondition(np.asarray(config.style), seed=config.cond_seed)

    s_max = min(config.s_max, m - 1)
    s_min = min(config.s_min, s_max)
    plan = select_keyframes(frames, s_min, s_max)
    batch_plan = plan_batches(len(plan.indices), config.batch_size)

    refs = {}
    for frame_id in plan.indices:
        noise = noise_stream(config.seed, NOISE_REF, frame_id).standard_normal(
            codec.latent_shape(h, w)
        )
        refs[frame_id] = single_step_reference(
            frames[frame_id - 1], config.t_ref, cond, codec, denoiser, schedule, noise
        )

    anchors = AnchorCache()
    translated_latents: dict[int, np.ndarray] = {}
    loss_trajectories = []
    steps_total = 0
    optim_total = 0
    for batch_positions in batch_plan.batches:
        ids = [plan.indices[p] for p in batch_positions]
        result = translate_batch(
            [frames[i - 1] for i in ids],
            ids,
            [refs[i] for i in ids],
            config,
            schedule,
            codec,
            denoiser,
            cond,
            anchors_in=anchors,
            anchor_ids=(ids[0], ids[-1]),
        )
        anchors.merge(result.anchors_out)
        for i, fid in enumerate(ids):
            translated_latents.setdefault(fid, result.latents_x0[i])
        loss_trajectories.append({"keyframes": ids, "rows": result.loss_rows})
        steps_total += result.steps_run
        optim_total += result.optimizer_iterations

    keyframe_outputs = {
        fid: np.clip(codec.decode(lat), 0.0, 1.0) for fid, lat in translated_latents.items()
    }
    pair_maps = [
        pair_correspondence(frames[i], frames[i + 1], config.block, config.radius, config.tau)
        for i in range(m - 1)
    ]
    interpolated = interpolate_nonkeyframes(keyframe_outputs, pair_maps, m)
    outputs = [
        keyframe_outputs[i] if i in keyframe_outputs else interpolated[i]
        for i in range(1, m + 1)
    ]

    metric = pixel_mse(outputs, config.block, config.radius, config.tau)
    manifest = {
        "version": 1,
        "seed": config.seed,
        "config": config.to_dict(),
        "frame_count": m,
        "keyframes": plan.indices,
        "motion_scores": plan.motion,
        "batches": {
            "batch_size": batch_plan.batch_size,
            "positions_1based": [[p + 1 for p in b] for b in batch_plan.batches],
            "keyframe_ids": [[plan.indices[p] for p in b] for b in batch_plan.batches],
        },
        "loss_trajectories": loss_trajectories,
        "metrics": {"pixel_mse": metric},
        "timing": {
            "denoise_steps": steps_total,
            "optimizer_iterations": optim_total,
        },
    }
    return TranslationResult(outputs, manifest)
