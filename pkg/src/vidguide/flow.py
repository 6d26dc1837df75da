"""Optical flow fields, occlusion masks, warping, and synthetic fixtures.

Conventions used package-wide:

* Grids are float64 arrays shaped (H, W) or (H, W, C).
* A flow field stores one (dx, dy) displacement per pixel of the warp
  TARGET: ``backward_warp(src, flow)`` fills target pixel p with a
  bilinear sample of ``src`` taken at p + flow(p).  The flow relating a
  frame pair therefore lives on the later frame when it is used to pull
  earlier-frame content forward.
* Occlusion masks are {0, 1} grids aligned with their flow field;
  1 marks a valid (non-occluded) correspondence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorio import read_tensor, write_tensor


@dataclass(frozen=True)
class FlowField:
    """Per-pixel (dx, dy) displacements defined on the warp target."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2:
            raise ValueError("flow vectors must have shape (H, W, 2)")
        if not np.all(np.isfinite(v)):
            raise ValueError("flow vectors must be finite")
        object.__setattr__(self, "vectors", v)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def dx(self) -> np.ndarray:
        return self.vectors[:, :, 0]

    @property
    def dy(self) -> np.ndarray:
        return self.vectors[:, :, 1]


@dataclass(frozen=True)
class OcclusionMask:
    """Binary validity grid; 1 = valid correspondence, 0 = occluded."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError("mask must have shape (H, W)")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @classmethod
    def from_bool(cls, flags: np.ndarray) -> "OcclusionMask":
        return cls(np.asarray(flags, dtype=bool).astype(np.uint8))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _as_grid(array, name: str = "grid") -> np.ndarray:
    g = np.asarray(array, dtype=np.float64)
    if g.ndim == 2:
        g = g[:, :, None]
    if g.ndim != 3:
        raise ValueError(f"{name} must have shape (H, W) or (H, W, C)")
    if not np.all(np.isfinite(g)):
        raise ValueError(f"{name} must be finite")
    return g


def _bilinear(values: np.ndarray, cy: np.ndarray, cx: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) ``values`` at pre-clamped float coordinates."""
    h, w = values.shape[:2]
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (cy - y0)[..., None]
    tx = (cx - x0)[..., None]
    return (
        (1.0 - ty) * (1.0 - tx) * values[y0, x0]
        + (1.0 - ty) * tx * values[y0, x1]
        + ty * (1.0 - tx) * values[y1, x0]
        + ty * tx * values[y1, x1]
    )


def _sample_coords(flow: FlowField):
    h, w = flow.height, flow.width
    ys, xs = np.mgrid[0:h, 0:w]
    cy = np.clip(ys + flow.dy, 0.0, h - 1.0)
    cx = np.clip(xs + flow.dx, 0.0, w - 1.0)
    return cy, cx


def backward_warp(src, flow: FlowField) -> np.ndarray:
    """Pull ``src`` toward the flow's target grid.

    Output pixel p is the bilinear sample of ``src`` at p + flow(p);
    sample coordinates falling outside the grid are clamped to the border.
    """
    grid = _as_grid(src, "src")
    if grid.shape[:2] != (flow.height, flow.width):
        raise ValueError(
            f"flow dimensions {(flow.height, flow.width)} do not match "
            f"src dimensions {grid.shape[:2]}"
        )
    out = _bilinear(grid, *_sample_coords(flow))
    return out[:, :, 0] if np.asarray(src).ndim == 2 else out


def warp_adjoint(grad_out, flow: FlowField) -> np.ndarray:
    """Adjoint of ``backward_warp`` in its ``src`` argument.

    Scatters each target-pixel cotangent back onto the four source cells
    it sampled, with the same bilinear weights (and the same clamping).
    """
    g = _as_grid(grad_out, "grad_out")
    if g.shape[:2] != (flow.height, flow.width):
        raise ValueError("flow dimensions do not match grad_out dimensions")
    h, w = g.shape[:2]
    cy, cx = _sample_coords(flow)
    y0 = np.floor(cy).astype(np.int64)
    x0 = np.floor(cx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ty = (cy - y0)[..., None]
    tx = (cx - x0)[..., None]
    grad_src = np.zeros_like(g)
    np.add.at(grad_src, (y0, x0), (1.0 - ty) * (1.0 - tx) * g)
    np.add.at(grad_src, (y0, x1), (1.0 - ty) * tx * g)
    np.add.at(grad_src, (y1, x0), ty * (1.0 - tx) * g)
    np.add.at(grad_src, (y1, x1), ty * tx * g)
    return grad_src[:, :, 0] if np.asarray(grad_out).ndim == 2 else grad_src


def compute_occlusion_mask(fwd: FlowField, bwd: FlowField, tau: float) -> OcclusionMask:
    """Forward-backward consistency check.

    Pixel p (on the grid of ``fwd``) is valid iff p + fwd(p) lands in
    bounds and |fwd(p) + bwd(p + fwd(p))| <= tau, where ``bwd`` is
    sampled bilinearly at the mapped position.
    """
    if (fwd.height, fwd.width) != (bwd.height, bwd.width):
        raise ValueError("fwd and bwd flow dimensions must match")
    if not tau > 0:
        raise ValueError("tau must be positive")
    h, w = fwd.height, fwd.width
    ys, xs = np.mgrid[0:h, 0:w]
    qy = ys + fwd.dy
    qx = xs + fwd.dx
    in_bounds = (qy >= 0.0) & (qy <= h - 1.0) & (qx >= 0.0) & (qx <= w - 1.0)
    back = _bilinear(bwd.vectors, np.clip(qy, 0.0, h - 1.0), np.clip(qx, 0.0, w - 1.0))
    err = np.hypot(fwd.dx + back[:, :, 0], fwd.dy + back[:, :, 1])
    return OcclusionMask.from_bool((err <= tau) & in_bounds)


def _block_sums(values: np.ndarray, block: int) -> np.ndarray:
    """Sum (H, W) values over a block tiling; edge blocks may be partial."""
    h, w = values.shape
    acc = np.zeros((h + 1, w + 1))
    acc[1:, 1:] = values.cumsum(axis=0).cumsum(axis=1)
    ye = np.minimum(np.arange(0, h + block, block), h)
    xe = np.minimum(np.arange(0, w + block, block), w)
    ye = ye[: math.ceil(h / block) + 1]
    xe = xe[: math.ceil(w / block) + 1]
    return (
        acc[np.ix_(ye[1:], xe[1:])]
        - acc[np.ix_(ye[:-1], xe[1:])]
        - acc[np.ix_(ye[1:], xe[:-1])]
        + acc[np.ix_(ye[:-1], xe[:-1])]
    )


def estimate_flow_block_matching(src, dst, block: int = 4, radius: int = 8) -> FlowField:
    """Integer-displacement block matching from ``dst`` blocks into ``src``.

    For every block of the target grid ``dst`` the displacement within
    ``radius`` minimizing the sum of squared differences against
    border-clamped ``src`` is selected and broadcast to the block's
    pixels, so ``backward_warp(src, flow)`` approximates ``dst``.  Ties
    are broken by smallest displacement magnitude, then by (dy, dx).
    """
    s = _as_grid(src, "src")
    d = _as_grid(dst, "dst")
    if s.shape != d.shape:
        raise ValueError("src and dst dimensions must match")
    if block < 1:
        raise ValueError("block must be >= 1")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    h, w = d.shape[:2]
    ys = np.arange(h)
    xs = np.arange(w)
    span = range(-radius, radius + 1)
    order = sorted(
        ((dy, dx) for dy in span for dx in span),
        key=lambda v: (v[0] * v[0] + v[1] * v[1], v[0], v[1]),
    )
    n_by = math.ceil(h / block)
    n_bx = math.ceil(w / block)
    best_ssd = np.full((n_by, n_bx), np.inf)
    best_dy = np.zeros((n_by, n_bx))
    best_dx = np.zeros((n_by, n_bx))
    for dy, dx in order:
        shifted = s[np.ix_(np.clip(ys + dy, 0, h - 1), np.clip(xs + dx, 0, w - 1))]
        ssd = _block_sums(((d - shifted) ** 2).sum(axis=2), block)
        better = ssd < best_ssd
        best_ssd = np.where(better, ssd, best_ssd)
        best_dy = np.where(better, float(dy), best_dy)
        best_dx = np.where(better, float(dx), best_dx)
    per_pixel = np.stack(
        [
            np.repeat(np.repeat(best_dx, block, axis=0), block, axis=1)[:h, :w],
            np.repeat(np.repeat(best_dy, block, axis=0), block, axis=1)[:h, :w],
        ],
        axis=2,
    )
    return FlowField(per_pixel)


def downsample_to_latent(
    flow: FlowField, mask: OcclusionMask, factor: int
) -> tuple[FlowField, OcclusionMask]:
    """Adapt a pixel-resolution flow/mask pair to a coarser grid.

    Flow vectors are area-averaged and divided by ``factor`` (displacement
    re-expressed in coarse cells); a coarse mask cell is valid only if all
    covered pixels are valid.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = flow.height, flow.width
    if (mask.height, mask.width) != (h, w):
        raise ValueError("flow and mask dimensions must match")
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} must divide dimensions {(h, w)}")
    if factor == 1:
        return FlowField(flow.vectors.copy()), OcclusionMask(mask.values.copy())
    hl, wl = h // factor, w // factor
    v = flow.vectors.reshape(hl, factor, wl, factor, 2)
    coarse = v.mean(axis=(1, 3)) / float(factor)
    m = mask.values.reshape(hl, factor, wl, factor)
    return FlowField(coarse), OcclusionMask.from_bool(m.min(axis=(1, 3)) > 0)


def synth_flow(
    kind: str,
    height: int,
    width: int,
    *,
    dx: float = 0.0,
    dy: float = 0.0,
    theta_deg: float = 0.0,
    center: tuple[float, float] | None = None,
) -> FlowField:
    """Analytic flow fixture: ``zero``, ``constant`` or ``rotation``.

    ``rotation`` produces the backward field of an in-plane rotation by
    ``theta_deg`` about ``center`` (default grid center, (x, y) order):
    target cell p samples the source at R(-theta) (p - c) + c.
    """
    if kind == "zero":
        return FlowField(np.zeros((height, width, 2)))
    if kind == "constant":
        field = np.empty((height, width, 2))
        field[:, :, 0] = dx
        field[:, :, 1] = dy
        return FlowField(field)
    if kind == "rotation":
        cx, cy = center if center is not None else ((width - 1) / 2.0, (height - 1) / 2.0)
        theta = math.radians(theta_deg)
        cos_t, sin_t = math.cos(-theta), math.sin(-theta)
        ys, xs = np.mgrid[0:height, 0:width]
        rx = xs - cx
        ry = ys - cy
        sx = cos_t * rx - sin_t * ry + cx
        sy = sin_t * rx + cos_t * ry + cy
        return FlowField(np.stack([sx - xs, sy - ys], axis=2))
    raise ValueError(f"unknown synthetic flow kind {kind!r}")


def synth_flow_pair(kind: str, height: int, width: int, **params) -> tuple[FlowField, FlowField]:
    """A synthetic flow together with its exact inverse field."""
    fwd = synth_flow(kind, height, width, **params)
    inv = dict(params)
    inv["dx"] = -params.get("dx", 0.0)
    inv["dy"] = -params.get("dy", 0.0)
    inv["theta_deg"] = -params.get("theta_deg", 0.0)
    return fwd, synth_flow(kind, height, width, **inv)


def save_flow(flow: FlowField, path) -> None:
    write_tensor(path, flow.vectors)


def load_flow(path) -> FlowField:
    return FlowField(read_tensor(path))


def save_mask(mask: OcclusionMask, path) -> None:
    write_tensor(path, mask.values.astype(np.float64))


def load_mask(path) -> OcclusionMask:
    return OcclusionMask(read_tensor(path))
