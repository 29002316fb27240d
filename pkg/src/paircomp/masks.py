"""Boolean and geometric operations on boxes and binary masks.

Conventions used throughout the package:

* Boxes are half-open integer rectangles ``[x0, x1) x [y0, y1)`` so that
  areas and intersections are exact integer arithmetic.
* Masks are 2-D float arrays of shape ``(height, width)``.  Binary masks
  hold values in ``{0, 1}``; masks that went through bilinear downsampling
  hold values in ``[0, 1]``.
* Bilinear resampling uses half-pixel centers with edge clamping, so
  resampling to the identical resolution is an exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not match an operation's contract."""


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with non-negative integer corners, half-open on the
    right and bottom (``x1 > x0``, ``y1 > y0``)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self) -> None:
        for name in ("x0", "y0", "x1", "y1"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise ValueError(f"box coordinate {name}={v!r} is not an integer")
            if v < 0:
                raise ValueError(f"box coordinate {name}={v} is negative")
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box {self.to_json()}: need x1 > x0 and y1 > y0")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def to_json(self) -> list[int]:
        return [int(self.x0), int(self.y0), int(self.x1), int(self.y1)]

    @staticmethod
    def from_json(coords) -> "BBox":
        if len(coords) != 4:
            raise ValueError(f"box JSON must be [x0, y0, x1, y1], got {coords!r}")
        return BBox(int(coords[0]), int(coords[1]), int(coords[2]), int(coords[3]))


def intersection_box(a: BBox, b: BBox) -> BBox | None:
    """Intersection of two boxes, or None when they are disjoint."""
    x0, y0 = max(a.x0, b.x0), max(a.y0, b.y0)
    x1, y1 = min(a.x1, b.x1), min(a.y1, b.y1)
    if x1 <= x0 or y1 <= y0:
        return None
    return BBox(x0, y0, x1, y1)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0.0 when disjoint.

    Exact up to the final float division because all areas are integers.
    """
    inter = intersection_box(a, b)
    if inter is None:
        return 0.0
    ai = inter.area
    return ai / (a.area + b.area - ai)


def _require_mask(m: np.ndarray, name: str = "mask") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D (height, width), got shape {m.shape}")
    return m


def require_binary(m: np.ndarray, name: str = "mask") -> np.ndarray:
    """Validate a {0,1}-valued 2-D mask and return it as float64."""
    m = _require_mask(m, name)
    if not np.isin(m, (0.0, 1.0)).all():
        raise ValueError(f"{name} is not binary: values outside {{0, 1}}")
    return m


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask dimensions differ: {a.shape} vs {b.shape}")


def build_pair_masks(m_a: np.ndarray, m_b: np.ndarray):
    """Derive the union, overlap and exclusive masks of a mask pair.

    Returns ``(m_u, m_ab, m_a_ex, m_b_ex)`` where ``m_u = a OR b``,
    ``m_ab = a AND b`` and each exclusive mask covers the cells only one
    of the inputs covers.  All outputs are binary.
    """
    m_a = require_binary(m_a, "m_a")
    m_b = require_binary(m_b, "m_b")
    _check_same_shape(m_a, m_b)
    m_u = np.maximum(m_a, m_b)
    m_ab = m_a * m_b
    m_a_ex = m_a * (1.0 - m_b)
    m_b_ex = m_b * (1.0 - m_a)
    return m_u, m_ab, m_a_ex, m_b_ex


def masked_background(image: np.ndarray, m_u: np.ndarray) -> np.ndarray:
    """Erase the image under the union mask: ``(1 - m_u) * image`` per channel."""
    image = np.asarray(image, dtype=np.float64)
    m_u = require_binary(m_u, "m_u")
    if image.shape[:2] != m_u.shape:
        raise ShapeError(f"image spatial dims {image.shape[:2]} do not match mask {m_u.shape}")
    keep = 1.0 - m_u
    if image.ndim == 3:
        keep = keep[:, :, None]
    elif image.ndim != 2:
        raise ShapeError(f"image must be (H, W) or (H, W, C), got shape {image.shape}")
    return keep * image


def bbox_to_mask(box: BBox, width: int, height: int) -> np.ndarray:
    """Rasterize a box onto a (height, width) grid of {0,1} cells."""
    if box.x1 > width or box.y1 > height:
        raise ValueError(f"box {box.to_json()} exceeds grid {width}x{height}")
    m = np.zeros((height, width), dtype=np.float64)
    m[box.y0:box.y1, box.x0:box.x1] = 1.0
    return m


def downsample_mask(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample a mask down to (out_h, out_w).

    Sampling is at half-pixel centers with edge clamping; upsampling is
    not supported.  A same-resolution call returns the input values
    exactly, and constant masks map to the same constant.
    """
    mask = _require_mask(mask)
    h, w = mask.shape
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"target resolution {out_h}x{out_w} must be positive")
    if out_h > h or out_w > w:
        raise ValueError(f"upsampling {h}x{w} -> {out_h}x{out_w} is not supported")
    return _bilinear_sample_grid(mask, out_h, out_w)


def _bilinear_sample_grid(values: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Sample a 2-D array on the half-pixel-center grid of the target size."""
    h, w = values.shape[:2]
    sy = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    sx = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(sy), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(sx), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(sy - y0, 0.0, 1.0)[:, None]
    fx = np.clip(sx - x0, 0.0, 1.0)[None, :]
    v00 = values[np.ix_(y0, x0)]
    v01 = values[np.ix_(y0, x1)]
    v10 = values[np.ix_(y1, x0)]
    v11 = values[np.ix_(y1, x1)]
    top = v00 * (1.0 - fx) + v01 * fx
    bot = v10 * (1.0 - fx) + v11 * fx
    return top * (1.0 - fy) + bot * fy


PARTITION_TOL = 1e-6


@dataclass
class RoutingMasks:
    """Feature-resolution partition of space into background, per-object
    exclusive regions and the overlap region.

    ``bg + sum(ex) + overlap`` must equal one everywhere (within
    ``PARTITION_TOL``); each component stays in [0, 1].
    """

    bg: np.ndarray
    ex: list[np.ndarray]
    overlap: np.ndarray

    @property
    def n_objects(self) -> int:
        return len(self.ex)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.bg.shape

    def validate(self) -> None:
        parts = [self.bg, *self.ex, self.overlap]
        for p in parts:
            _check_same_shape(self.bg, p)
            if p.min() < -PARTITION_TOL or p.max() > 1.0 + PARTITION_TOL:
                raise ValueError("routing mask values fall outside [0, 1]")
        total = sum(parts)
        err = np.abs(total - 1.0).max()
        if err > PARTITION_TOL:
            raise ValueError(f"routing masks do not partition unity (max error {err:.3e})")


def build_routing_masks(masks: list[np.ndarray], out_h: int, out_w: int) -> RoutingMasks:
    """Partition image space by object coverage, then downsample each part.

    For objects 1..M the partition is: exclusive_p = covered by p only,
    overlap = covered by two or more, bg = covered by none.  The partition
    is formed at image resolution and each component is downsampled
    independently; bilinearity keeps the partition exact at any target
    resolution (up to float rounding).
    """
    if len(masks) < 2:
        raise ValueError(f"routing masks need at least 2 objects, got {len(masks)}")
    masks = [require_binary(m, f"mask[{i}]") for i, m in enumerate(masks)]
    for m in masks[1:]:
        _check_same_shape(masks[0], m)
    coverage = np.sum(masks, axis=0)
    bg = (coverage == 0).astype(np.float64)
    overlap = (coverage >= 2).astype(np.float64)
    others_gone = coverage == 1
    ex = [m * others_gone for m in masks]
    rm = RoutingMasks(
        bg=downsample_mask(bg, out_h, out_w),
        ex=[downsample_mask(e, out_h, out_w) for e in ex],
        overlap=downsample_mask(overlap, out_h, out_w),
    )
    rm.validate()
    return rm


def single_object_routing(mask: np.ndarray, out_h: int, out_w: int) -> RoutingMasks:
    """Degenerate one-object partition (no overlap region).

    Used by the sequential compositing baseline, which inserts one object
    per turn; ``build_routing_masks`` itself requires two or more objects.
    """
    mask = require_binary(mask)
    return RoutingMasks(
        bg=downsample_mask(1.0 - mask, out_h, out_w),
        ex=[downsample_mask(mask, out_h, out_w)],
        overlap=np.zeros((out_h, out_w), dtype=np.float64),
    )
