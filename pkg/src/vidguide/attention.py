"""Correspondence-guided attention stages and their patch index structures.

Tensors are grids shaped (N, h, w, d): N frames of h x w patches with d
channels.  Patch indices are 0-based (frame, row, col) triples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flow import FlowField, OcclusionMask


@dataclass(frozen=True)
class AttentionBundle:
    """Per-frame query/key/value grids plus optional reference captures."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q_ref: np.ndarray | None = None
    k_ref: np.ndarray | None = None

    def __post_init__(self):
        arrays = {"q": self.q, "k": self.k, "v": self.v}
        if self.q_ref is not None:
            arrays["q_ref"] = self.q_ref
        if self.k_ref is not None:
            arrays["k_ref"] = self.k_ref
        shape = None
        for name, arr in arrays.items():
            a = np.asarray(arr, dtype=np.float64)
            if a.ndim != 4:
                raise ValueError(f"{name} must have shape (N, h, w, d)")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} must be finite")
            if shape is None:
                shape = a.shape
            elif a.shape != shape:
                raise ValueError(f"{name} shape {a.shape} does not match {shape}")
            object.__setattr__(self, name, a)

    @property
    def num_frames(self) -> int:
        return self.q.shape[0]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.q.shape[1], self.q.shape[2]


@dataclass(frozen=True)
class ScaleParams:
    """Softmax temperature scales for the spatial and temporal stages."""

    lambda_s: float = 5.0
    lambda_t: float = 5.0

    def __post_init__(self):
        if not (self.lambda_s > 0 and self.lambda_t > 0):
            raise ValueError("scale factors must be positive")


@dataclass(frozen=True)
class PatchIndexSet:
    """Ordered, duplicate-free (frame, row, col) triples; frame 0 complete."""

    triples: np.ndarray
    num_frames: int
    height: int
    width: int

    def __post_init__(self):
        t = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "triples", t)
        if t.shape[0] == 0:
            raise ValueError("patch index set must not be empty")
        if (t < 0).any():
            raise ValueError("patch indices must be non-negative")
        bounds = np.array([self.num_frames, self.height, self.width])
        if (t >= bounds).any():
            raise ValueError("patch index out of range")
        flat = self.flat_ids()
        if len(np.unique(flat)) != len(flat):
            raise ValueError("patch index set contains duplicates")
        first = flat[flat < self.height * self.width]
        if len(first) != self.height * self.width:
            raise ValueError("the first frame must contribute all its patches")

    def flat_ids(self) -> np.ndarray:
        hw = self.height * self.width
        return self.triples[:, 0] * hw + self.triples[:, 1] * self.width + self.triples[:, 2]

    def __len__(self) -> int:
        return self.triples.shape[0]

    @classmethod
    def all_patches(cls, num_frames: int, height: int, width: int) -> "PatchIndexSet":
        f, r, c = np.mgrid[0:num_frames, 0:height, 0:width]
        return cls(np.stack([f.ravel(), r.ravel(), c.ravel()], axis=1), num_frames, height, width)


@dataclass(frozen=True)
class TrajectorySet:
    """Disjoint patch chains; consecutive entries live on consecutive frames."""

    trajectories: list[np.ndarray]
    num_frames: int
    height: int
    width: int

    def __post_init__(self):
        cleaned = []
        for traj in self.trajectories:
            t = np.asarray(traj, dtype=np.int64).reshape(-1, 3)
            if t.shape[0] == 0:
                raise ValueError("empty trajectory")
            if t.shape[0] > 1 and not (np.diff(t[:, 0]) == 1).all():
                raise ValueError("trajectory frames must be consecutive and increasing")
            cleaned.append(t)
        object.__setattr__(self, "trajectories", cleaned)

    def is_partition(self) -> bool:
        hw = self.height * self.width
        total = self.num_frames * hw
        flat = [t[:, 0] * hw + t[:, 1] * self.width + t[:, 2] for t in self.trajectories]
        if sum(len(f) for f in flat) != total:
            return False
        seen = np.concatenate(flat) if flat else np.empty(0, dtype=np.int64)
        if (seen < 0).any() or (seen >= total).any():
            return False
        return len(np.unique(seen)) == total

    def __len__(self) -> int:
        return len(self.trajectories)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax with the row max subtracted for stability."""
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_softmax_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float = 1.0
) -> np.ndarray:
    """Softmax(q k^T / (scale sqrt(d))) v over flat (n, d) operands."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if k.shape[0] == 0:
        raise ValueError("attention requires at least one key")
    if q.shape[-1] != k.shape[-1]:
        raise ValueError("query and key dimensions must match")
    if k.shape[0] != v.shape[0]:
        raise ValueError("key and value counts must match")
    if not scale > 0:
        raise ValueError("scale must be positive")
    d = q.shape[-1]
    weights = softmax_rows(q @ k.T / (scale * np.sqrt(d)))
    return weights @ v


def spatial_guided_attention(
    q: np.ndarray, q_ref: np.ndarray, k_ref: np.ndarray, lambda_s: float
) -> np.ndarray:
    """Reweight each frame's queries by the reference self-similarity.

    Per frame: Q'_i = Softmax(Q^r_i K^r_i^T / (lambda_s sqrt(d))) Q_i, so
    queries aggregate according to patch similarity before translation.
    """
    if q_ref is None or k_ref is None:
        raise ValueError("spatial-guided attention requires reference tensors")
    q = np.asarray(q, dtype=np.float64)
    q_ref = np.asarray(q_ref, dtype=np.float64)
    k_ref = np.asarray(k_ref, dtype=np.float64)
    if q.shape != q_ref.shape or q.shape != k_ref.shape:
        raise ValueError("query and reference shapes must match")
    n, h, w, d = q.shape
    out = np.empty_like(q)
    for i in range(n):
        out[i] = scaled_softmax_attention(
            q_ref[i].reshape(-1, d), k_ref[i].reshape(-1, d), q[i].reshape(-1, d), lambda_s
        ).reshape(h, w, d)
    return out


def build_unique_patch_index(
    masks: Sequence[OcclusionMask], height: int, width: int
) -> PatchIndexSet:
    """Index of first-frame patches plus later patches unseen previously.

    ``masks[i]`` relates frame i+1 to frame i (1 = already visible); its
    zeros mark newly appearing content, which joins the index.  Ordering
    is frame-major then row-major.
    """
    num_frames = len(masks) + 1
    rows: list[np.ndarray] = []
    rr, cc = np.mgrid[0:height, 0:width]
    rows.append(np.stack([np.zeros(height * width, dtype=np.int64), rr.ravel(), cc.ravel()], axis=1))
    for i, mask in enumerate(masks):
        if (mask.height, mask.width) != (height, width):
            raise ValueError(
                f"mask {i} shape {(mask.height, mask.width)} does not match {(height, width)}"
            )
        occluded = np.argwhere(mask.values == 0)
        if occluded.size:
            frame_col = np.full((occluded.shape[0], 1), i + 1, dtype=np.int64)
            rows.append(np.concatenate([frame_col, occluded], axis=1))
    return PatchIndexSet(np.concatenate(rows, axis=0), num_frames, height, width)


def efficient_cross_frame_attention(
    q_prime: np.ndarray, k: np.ndarray, v: np.ndarray, patches: PatchIndexSet
) -> np.ndarray:
    """Attend every patch of every frame to the gathered unique patches.

    V'_i = Softmax(Q'_i (K[p_u])^T / sqrt(d)) V[p_u]; the scale is 1.
    """
    q_prime = np.asarray(q_prime, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if q_prime.shape != k.shape or q_prime.shape != v.shape:
        raise ValueError("q, k, v shapes must match")
    n, h, w, d = q_prime.shape
    if (patches.num_frames, patches.height, patches.width) != (n, h, w):
        raise ValueError("patch index grid does not match tensors")
    if len(patches) == 0:
        raise ValueError("patch index set must not be empty")
    ids = patches.flat_ids()
    k_sel = k.reshape(n * h * w, d)[ids]
    v_sel = v.reshape(n * h * w, d)[ids]
    out = scaled_softmax_attention(q_prime.reshape(n * h * w, d), k_sel, v_sel, 1.0)
    return out.reshape(n, h, w, d)


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def build_flow_trajectories(
    flows: Sequence[FlowField],
    masks: Sequence[OcclusionMask],
    height: int,
    width: int,
) -> TrajectorySet:
    """Chain patches across frames along the flow.

    ``flows[i]`` lives on frame i and points toward frame i+1; a hop from
    patch p extends to the nearest patch of p + flows[i](p).  ``masks[i]``
    lives on frame i+1 and a hop terminates when its target is out of
    bounds, occluded (mask 0), or already claimed by an earlier
    trajectory (seed order: frame-major, then row-major).  Every
    unclaimed patch seeds a new trajectory, so the result partitions all
    patches.
    """
    if len(flows) != len(masks):
        raise ValueError("flows and masks counts must match")
    num_frames = len(flows) + 1
    for i, (fl, mk) in enumerate(zip(flows, masks)):
        if (fl.height, fl.width) != (height, width) or (mk.height, mk.width) != (height, width):
            raise ValueError(f"flow/mask {i} does not match grid {(height, width)}")
    trajectories: list[list[tuple[int, int, int]]] = []
    # heads[r][c] = index of the trajectory currently ending at (frame, r, c)
    heads = -np.ones((height, width), dtype=np.int64)
    for r in range(height):
        for c in range(width):
            heads[r, c] = len(trajectories)
            trajectories.append([(0, r, c)])
    for i in range(num_frames - 1):
        fl = flows[i].vectors
        mk = masks[i].values
        next_heads = -np.ones((height, width), dtype=np.int64)
        order = np.argsort(heads, axis=None, kind="stable")
        for flat in order:
            r, c = divmod(int(flat), width)
            idx = heads[r, c]
            if idx < 0:
                continue
            tr = _round_half_up(fl[r, c, 1] + r)
            tc = _round_half_up(fl[r, c, 0] + c)
            if not (0 <= tr < height and 0 <= tc < width):
                continue
            if mk[tr, tc] == 0 or next_heads[tr, tc] >= 0:
                continue
            next_heads[tr, tc] = idx
            trajectories[idx].append((i + 1, int(tr), int(tc)))
        for r in range(height):
            for c in range(width):
                if next_heads[r, c] < 0:
                    next_heads[r, c] = len(trajectories)
                    trajectories.append([(i + 1, r, c)])
        heads = next_heads
    return TrajectorySet(
        [np.array(t, dtype=np.int64) for t in trajectories], num_frames, height, width
    )


def temporal_guided_attention(
    q: np.ndarray,
    k: np.ndarray,
    v_prime: np.ndarray,
    trajectories: TrajectorySet,
    lambda_t: float,
) -> np.ndarray:
    """Attend along each flow trajectory (a patch attends to itself too).

    Per trajectory: H[p_f] = Softmax(Q[p_f] K[p_f]^T / (lambda_t sqrt(d))) V'[p_f].
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v_prime = np.asarray(v_prime, dtype=np.float64)
    if q.shape != k.shape or q.shape != v_prime.shape:
        raise ValueError("q, k, v' shapes must match")
    n, h, w, d = q.shape
    if (trajectories.num_frames, trajectories.height, trajectories.width) != (n, h, w):
        raise ValueError("trajectory grid does not match tensors")
    if not trajectories.is_partition():
        raise ValueError("trajectories must partition all patches")
    hw = h * w
    qf = q.reshape(n * hw, d)
    kf = k.reshape(n * hw, d)
    vf = v_prime.reshape(n * hw, d)
    out = np.empty_like(qf)
    for traj in trajectories.trajectories:
        ids = traj[:, 0] * hw + traj[:, 1] * w + traj[:, 2]
        out[ids] = scaled_softmax_attention(qf[ids], kf[ids], vf[ids], lambda_t)
    return out.reshape(n, h, w, d)


def guided_attention_layer(
    bundle: AttentionBundle,
    patches: PatchIndexSet,
    trajectories: TrajectorySet,
    scales: ScaleParams,
) -> np.ndarray:
    """Spatial-guided, then efficient cross-frame, then temporal-guided.

    The temporal stage consumes the original queries/keys and the values
    produced by the cross-frame stage; the result is the layer output.
    """
    if bundle.q_ref is None or bundle.k_ref is None:
        raise ValueError("guided attention layer requires reference tensors")
    q_guided = spatial_guided_attention(bundle.q, bundle.q_ref, bundle.k_ref, scales.lambda_s)
    v_cross = efficient_cross_frame_attention(q_guided, bundle.k, bundle.v, patches)
    return temporal_guided_attention(bundle.q, bundle.k, v_cross, trajectories, scales.lambda_t)
