"""Parallel pairwise image compositing components.

Mask algebra over boxes and binary occupancy grids, a minimal
reverse-mode tensor core, transformer blocks with mask-routed experts and
adaptive alpha-blending of overlapping objects, geometry-aware object
encodings, synthetic scene data, and a small denoising-diffusion harness
that trains and samples the whole pipeline on desk-scale scenes.
"""

from ._alloc import tune_malloc

tune_malloc()

from .config import Config, load_config
from .masks import (
    BBox,
    RoutingMasks,
    ShapeError,
    bbox_to_mask,
    build_pair_masks,
    build_routing_masks,
    downsample_mask,
    iou,
    masked_background,
    single_object_routing,
)
from .tensor import Tensor, grad_check, no_grad

__all__ = [
    "BBox",
    "Config",
    "RoutingMasks",
    "ShapeError",
    "Tensor",
    "bbox_to_mask",
    "build_pair_masks",
    "build_routing_masks",
    "downsample_mask",
    "grad_check",
    "iou",
    "load_config",
    "masked_background",
    "no_grad",
    "single_object_routing",
    "tune_malloc",
]
