"""Geometry-aware object encoding and augmentations.

A linear patch embedding stands in for a heavyweight pretrained encoder:
object images become token grids the experts can attend to.  Viewpoint
robustness comes from two augmentations: a synthetic multi-view set fused
into a single descriptor, and random in-plane rotation of object images
and masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .masks import ShapeError
from .tensor import (
    FFNParams,
    LayerNormParams,
    LinearParams,
    Tensor,
    concat,
    ffn,
    layer_norm,
    linear,
)

ROTATION_LIMIT = np.pi / 6.0


def image_patches(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Flatten non-overlapping patches into a (n_tokens, ps*ps*C) matrix."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    ps = patch_size
    if h % ps or w % ps:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {ps}")
    grid = image.reshape(h // ps, ps, w // ps, ps, c)
    return grid.transpose(0, 2, 1, 3, 4).reshape((h // ps) * (w // ps), ps * ps * c)


def encode_object(image: np.ndarray, patch_size: int, embed: LinearParams) -> Tensor:
    """Tokenize an object image: patch flattening + learned projection.

    Token count is (H/ps)*(W/ps) in row-major patch order; with a zero
    bias the encoding is exactly linear in the image.
    """
    patches = image_patches(image, patch_size)
    if patches.shape[1] != embed.d_in:
        raise ShapeError(
            f"patch dim {patches.shape[1]} does not match embedding d_in {embed.d_in}")
    return linear(Tensor(patches.astype(embed.weight.dtype)), embed)


class MultiViewFusion:
    """LayerNorm + two-layer MLP that fuses concatenated per-view codes."""

    def __init__(self, ln: LayerNormParams, mlp: FFNParams):
        self.ln = ln
        self.mlp = mlp

    def tensors(self):
        return self.ln.tensors() + self.mlp.tensors()


def fuse_multiview(codes: list[Tensor], perm, fusion: MultiViewFusion) -> Tensor:
    """Permute, concatenate, normalize and fuse K per-view codes.

    Views are concatenated along the token axis in the order given by
    ``perm``; output token count is K times the per-view count.
    """
    shapes = {tuple(c.shape) for c in codes}
    if len(shapes) != 1:
        raise ShapeError(f"ragged view codes: {sorted(shapes)}")
    perm = list(perm)
    if sorted(perm) != list(range(len(codes))):
        raise ValueError(f"perm {perm} is not a permutation of {len(codes)} views")
    stacked = concat([codes[k] for k in perm], axis=-2)
    return ffn(layer_norm(stacked, fusion.ln), fusion.mlp)


def bilinear_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample an image at float coordinates; out-of-frame reads are zero."""
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[:, :, None]
    h, w, c = image.shape
    inside = (sx > -1.0) & (sx < w) & (sy > -1.0) & (sy < h)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]

    def fetch(yy, xx):
        valid = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(valid[..., None], vals, 0.0)

    out = (fetch(y0, x0) * (1 - fx) * (1 - fy)
           + fetch(y0, x0 + 1) * fx * (1 - fy)
           + fetch(y0 + 1, x0) * (1 - fx) * fy
           + fetch(y0 + 1, x0 + 1) * fx * fy)
    out = np.where(inside[..., None], out, 0.0)
    return out[:, :, 0] if squeeze else out


def nearest_sample(image: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Nearest-neighbor sampling with zero fill outside the frame."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    xi = np.rint(sx).astype(np.int64)
    yi = np.rint(sy).astype(np.int64)
    valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    vals = image[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    if image.ndim == 3:
        valid = valid[..., None]
    return np.where(valid, vals, 0.0)


def _inverse_warp_coords(h: int, w: int, mat: np.ndarray):
    """Source coordinates for each output pixel under an affine map about
    the image center (``mat`` maps output offsets to source offsets)."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    sx = mat[0, 0] * dx + mat[0, 1] * dy + cx
    sy = mat[1, 0] * dx + mat[1, 1] * dy + cy
    return sx, sy


@dataclass
class ViewSet:
    """K same-size renderings of one object; view 0 is the input itself."""

    views: np.ndarray  # (K, H, W, C)
    source: str

    @property
    def k(self) -> int:
        return self.views.shape[0]


def synth_multiview(image: np.ndarray, k: int, seed: int) -> ViewSet:
    """Deterministic stand-in for a single-view reconstruction model.

    Produces K views by random affine warps (scale in [0.8, 1.2], shear in
    [-0.2, 0.2]); view 0 is always the untouched input.
    """
    if k < 1:
        raise ValueError(f"need at least one view, got k={k}")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, _ = image.shape
    rng = np.random.default_rng(seed)
    views = [image.copy()]
    for _ in range(k - 1):
        sx_scale = rng.uniform(0.8, 1.2)
        sy_scale = rng.uniform(0.8, 1.2)
        shear_x = rng.uniform(-0.2, 0.2)
        shear_y = rng.uniform(-0.2, 0.2)
        fwd = np.array([[sx_scale, shear_x], [shear_y, sy_scale]])
        sx, sy = _inverse_warp_coords(h, w, np.linalg.inv(fwd))
        views.append(bilinear_sample(image, sx, sy))
    return ViewSet(views=np.stack(views, axis=0), source="synthetic-stub")


def rotate_augment(image: np.ndarray, mask: np.ndarray,
                   theta: float | None = None, seed: int | None = None):
    """Rotate an object image and its mask about the image center.

    ``theta`` is drawn from U(-pi/6, pi/6) when not given.  The image is
    sampled bilinearly, the mask by nearest neighbor with a >= 0.5
    threshold so it stays binary; out-of-frame samples fill with zero.
    """
    if theta is None:
        rng = np.random.default_rng(seed)
        theta = rng.uniform(-ROTATION_LIMIT, ROTATION_LIMIT)
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape[:2] != mask.shape:
        raise ShapeError(f"image {image.shape[:2]} and mask {mask.shape} dims differ")
    if theta == 0.0:
        return image.copy(), mask.copy()
    h, w = mask.shape
    c, s = np.cos(theta), np.sin(theta)
    inv = np.array([[c, -s], [s, c]])  # inverse rotation = rotate by -theta
    sx, sy = _inverse_warp_coords(h, w, inv)
    rot_image = bilinear_sample(image, sx, sy)
    rot_mask = (nearest_sample(mask, sx, sy) >= 0.5).astype(np.float64)
    return rot_image, rot_mask
