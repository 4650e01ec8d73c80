"""
Box geometry and image resampling.

Pixel (i, j) occupies the unit square [j, j+1) x [i, i+1), so a pixel's
center sits at (j + 0.5, i + 0.5). Resampling is bilinear between pixel
centers, with the interpolation neighbours clamped to the pixels the
sampled box touches; sample points that fall outside the frame read 0.
"""

import math

import numpy as np

from models import BoundingBox, Frame


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0 when the union is empty."""
    inter_w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    inter_h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    """Euclidean distance between box centers, in pixels."""
    ax, ay = a.center
    bx, by = b.center
    return math.hypot(ax - bx, ay - by)


def axis_weights(lo: np.ndarray, extent: np.ndarray, n_out: int, size: int) -> np.ndarray:
    """
    Bilinear sampling weights along one axis.

    Args:
        lo: (k,) start coordinate of each sampled interval.
        extent: (k,) or scalar interval length.
        n_out: samples per interval.
        size: number of pixels along the axis.

    Returns:
        (k, n_out, size) weights; row (i, u) interpolates sample u of interval i.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    extent = np.broadcast_to(np.asarray(extent, dtype=np.float64), lo.shape)
    k = lo.shape[0]
    weights = np.zeros((k, n_out, size))

    hi = lo + extent
    clo = np.maximum(lo, 0.0)
    chi = np.minimum(hi, float(size))
    # pixels touched by the clamped interval
    p_lo = np.clip(np.floor(clo), 0, size - 1).astype(np.int64)
    p_hi = np.clip(np.ceil(chi) - 1, 0, size - 1).astype(np.int64)
    non_empty = (chi > clo) & (extent > 0)

    u = np.arange(n_out, dtype=np.float64)
    coords = lo[:, None] + (u[None, :] + 0.5) * (extent[:, None] / n_out)
    inside = (coords >= 0.0) & (coords < size) & non_empty[:, None]

    pos = coords - 0.5
    j0 = np.floor(pos)
    frac = pos - j0
    j0 = j0.astype(np.int64)
    j1 = j0 + 1
    j0 = np.clip(j0, p_lo[:, None], p_hi[:, None])
    j1 = np.clip(j1, p_lo[:, None], p_hi[:, None])

    rows = np.broadcast_to(np.arange(k)[:, None], (k, n_out))
    cols = np.broadcast_to(np.arange(n_out)[None, :], (k, n_out))
    mask = inside.astype(np.float64)
    np.add.at(weights, (rows, cols, j0), (1.0 - frac) * mask)
    np.add.at(weights, (rows, cols, j1), frac * mask)
    return weights


def sample_grid_patches(
    pixels: np.ndarray,
    lo_x: np.ndarray,
    width: float,
    lo_y: np.ndarray,
    height: float,
    out_w: int,
    out_h: int,
) -> np.ndarray:
    """
    Resample every box of a separable grid of placements at once.

    Box (i, j) spans [lo_x[j], lo_x[j] + width) x [lo_y[i], lo_y[i] + height).

    Returns:
        (len(lo_y), len(lo_x), out_h, out_w, 3) patches.
    """
    h, w, _ = pixels.shape
    wy = axis_weights(lo_y, height, out_h, h)
    wx = axis_weights(lo_x, width, out_w, w)
    ny, nx = wy.shape[0], wx.shape[0]
    rows = np.tensordot(wy.reshape(ny * out_h, h), pixels, axes=(1, 0))
    patches = np.tensordot(rows, wx.reshape(nx * out_w, w), axes=(1, 1))
    # (ny*out_h, 3, nx*out_w) -> (ny, nx, out_h, out_w, 3)
    patches = patches.reshape(ny, out_h, 3, nx, out_w).transpose(0, 3, 1, 4, 2)
    return np.clip(patches, 0.0, 1.0)


def crop_resize(frame: Frame, box: BoundingBox, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resample of ``box`` to an out_h x out_w x 3 grid; off-frame reads 0."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    pixels = frame.pixels if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    patches = sample_grid_patches(
        pixels, np.array([box.x1]), box.w, np.array([box.y1]), box.h, out_w, out_h
    )
    return patches[0, 0]


def clip_box_to_frame(box: BoundingBox, width: int, height: int) -> BoundingBox:
    """Intersection of ``box`` with the frame rectangle (possibly empty)."""
    x1 = min(max(box.x1, 0.0), float(width))
    y1 = min(max(box.y1, 0.0), float(height))
    x2 = min(max(box.x2, 0.0), float(width))
    y2 = min(max(box.y2, 0.0), float(height))
    return BoundingBox(x1, y1, max(0.0, x2 - x1), max(0.0, y2 - y1))


def zncc(
    patches: np.ndarray, template: np.ndarray, min_variance: float = 1e-12
) -> tuple[np.ndarray, np.ndarray]:
    """
    Zero-normalized cross-correlation of a template against a stack of patches.

    Args:
        patches: (..., *template.shape) candidates.
        template: the reference patch.

    Returns:
        (correlation in [-1, 1], valid mask). Candidates whose own variance,
        or the template's, is below ``min_variance`` are marked invalid and
        score 0.
    """
    t = np.asarray(template, dtype=np.float64).ravel()
    lead = patches.shape[: patches.ndim - template.ndim]
    c = patches.reshape(*lead, t.size)
    t_centered = t - t.mean()
    c_centered = c - c.mean(axis=-1, keepdims=True)
    t_var = np.mean(t_centered ** 2)
    c_var = np.mean(c_centered ** 2, axis=-1)
    valid = c_var >= min_variance
    if t_var < min_variance:
        return np.zeros(lead), np.zeros(lead, dtype=bool)
    denom = np.sqrt(c_var * t_var) * t.size
    numer = c_centered @ t_centered
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(valid, numer / np.where(valid, denom, 1.0), 0.0)
    return np.clip(corr, -1.0, 1.0), valid
