"""Synthetic scenes, box selection, and scene decomposition.

Scenes are procedurally generated: a textured background plus solid
shapes (rectangles, disks, triangles) painted farther-first so nearer
shapes overwrite farther ones.  Each instance keeps its full-extent
(amodal) mask even where occluded, so a scene decomposes exactly into a
hole-punched background plus visible-object crops, and recomposing them
in painter order reproduces the original image pixel for pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .masks import BBox, ShapeError, bbox_to_mask, iou, masked_background


@dataclass
class Instance:
    box: BBox
    mask: np.ndarray           # amodal (full-extent) binary mask, scene-sized
    depth_rank: int            # 0 = farthest


@dataclass
class SceneRecord:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    instances: list[Instance]
    provenance: str = "synthetic"

    @property
    def boxes(self) -> list[BBox]:
        return [inst.box for inst in self.instances]

    def validate(self) -> None:
        ranks = sorted(inst.depth_rank for inst in self.instances)
        if ranks != list(range(len(self.instances))):
            raise ValueError(f"depth ranks {ranks} are not a permutation")
        for i, inst in enumerate(self.instances):
            box_m = bbox_to_mask(inst.box, self.image.shape[1], self.image.shape[0])
            if (inst.mask * (1.0 - box_m)).max() > 0:
                raise ValueError(f"instance {i} mask leaks outside its box")
            if inst.mask.max() == 0:
                raise ValueError(f"instance {i} mask is empty")


@dataclass
class TrainSample:
    """Decomposed recomposition target: hole-punched background, visible
    object crops with their masks and boxes, and the original image."""

    background: np.ndarray     # (H, W, 3); zero under the pair's union mask
    object_crops: list[np.ndarray]
    masks: list[np.ndarray]    # visible-region masks, scene-sized
    boxes: list[BBox]
    target: np.ndarray


def painter_order(boxes: list[BBox]) -> list[int]:
    """Depth-proxy compositing order: ascending bottom edge (y1), so boxes
    whose bottoms sit higher in the image paint first (farther), ties
    broken by x0 then input index."""
    if not boxes:
        raise ValueError("painter_order needs at least one box")
    return sorted(range(len(boxes)), key=lambda i: (boxes[i].y1, boxes[i].x0, i))


def iou_matrix(boxes: list[BBox]) -> np.ndarray:
    n = len(boxes)
    mat = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = iou(boxes[i], boxes[j])
    return mat


def select_boxes(boxes: list[BBox], literal_guard: bool = True):
    """Pick the pair of boxes with the highest IoU, or None.

    Replicates the reference pseudocode: lists of length <= 2 are rejected
    outright (the ``literal_guard``; pass False for the corrected ``< 2``
    variant), the diagonal of the IoU matrix is zeroed to exclude
    self-pairs, and a zero maximum IoU also yields None.  Argmax ties
    break at the lowest (row, col) in row-major order; the winning pair is
    returned as index tuple (i, j).
    """
    n = len(boxes)
    if (n <= 2) if literal_guard else (n < 2):
        return None
    mat = iou_matrix(boxes)
    np.fill_diagonal(mat, 0.0)
    flat = int(np.argmax(mat))
    i, j = divmod(flat, n)
    if mat[i, j] <= 0.0:
        return None
    return i, j


def select_multi(boxes: list[BBox], m: int, area_threshold: int = 64):
    """Anchor-based selection of M mutually anchored boxes, or None.

    Boxes with area below ``area_threshold`` are dropped first.  The
    anchor maximizes total IoU against the other kept boxes (ties take the
    lowest index); its top M-1 neighbors by IoU (positive IoU only, ties
    by index) complete the set.  Selected boxes all overlap the anchor but
    need not overlap one another.  Returns original-list indices, anchor
    first.
    """
    if m < 3:
        raise ValueError(f"multi-object selection needs M >= 3, got {m}")
    kept = [i for i, b in enumerate(boxes) if b.area >= area_threshold]
    if len(kept) < m:
        return None
    scores = {i: sum(iou(boxes[i], boxes[j]) for j in kept if j != i) for i in kept}
    anchor = min(kept, key=lambda i: (-scores[i], i))
    neighbors = [(iou(boxes[anchor], boxes[j]), j) for j in kept if j != anchor]
    neighbors = [(v, j) for v, j in neighbors if v > 0.0]
    neighbors.sort(key=lambda t: (-t[0], t[1]))
    if len(neighbors) < m - 1:
        return None
    return [anchor] + [j for _, j in neighbors[: m - 1]]


def overlap_heatmap(pairs: list[tuple[BBox, BBox]], grid_n: int = 64) -> np.ndarray:
    """Aggregate where second boxes overlap first boxes, in the first box's
    canonical unit-square frame.

    Each pair must intersect; the intersection rectangle is mapped through
    the first box's normalization, rasterized by cell-center containment
    onto an ``grid_n`` x ``grid_n`` grid, and accumulated.  Output values
    are per-cell overlap frequencies in [0, 1].
    """
    if not pairs:
        raise ValueError("heatmap needs at least one pair")
    heat = np.zeros((grid_n, grid_n), dtype=np.float64)
    for a, b in pairs:
        ix0, iy0 = max(a.x0, b.x0), max(a.y0, b.y0)
        ix1, iy1 = min(a.x1, b.x1), min(a.y1, b.y1)
        if ix1 <= ix0 or iy1 <= iy0:
            raise ValueError(f"pair {a.to_json()} / {b.to_json()} does not intersect")
        u0, u1 = (ix0 - a.x0) / a.width, (ix1 - a.x0) / a.width
        v0, v1 = (iy0 - a.y0) / a.height, (iy1 - a.y0) / a.height
        # cells whose center (idx + 0.5)/n falls in [lo, hi)
        j0 = int(np.ceil(grid_n * u0 - 0.5))
        j1 = int(np.ceil(grid_n * u1 - 0.5))
        i0 = int(np.ceil(grid_n * v0 - 0.5))
        i1 = int(np.ceil(grid_n * v1 - 0.5))
        heat[max(i0, 0):max(i1, 0), max(j0, 0):max(j1, 0)] += 1.0
    return heat / len(pairs)


# -- synthetic scene generation -------------------------------------------------

def _textured_background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    for ch in range(3):
        base = rng.uniform(0.2, 0.4)
        fx, fy = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img[:, :, ch] = base + 0.08 * np.sin(
            2 * np.pi * (fx * xs / width + fy * ys / height) + phase)
    return np.clip(img, 0.0, 1.0)


def _raster_shape(rng: np.random.Generator, width: int, height: int,
                  x0: int, y0: int, bw: int, bh: int) -> np.ndarray | None:
    """Rasterize a random solid shape inside the given box; returns a
    scene-sized binary mask or None when the draw degenerates."""
    kind = rng.choice(["rect", "disk", "triangle"])
    mask = np.zeros((height, width), dtype=np.float64)
    if kind == "rect":
        mask[y0:y0 + bh, x0:x0 + bw] = 1.0
    elif kind == "disk":
        r = min(bw, bh) / 2.0
        cx, cy = x0 + bw / 2.0, y0 + bh / 2.0
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
        mask[((xs - cx) ** 2 + (ys - cy) ** 2) <= r * r] = 1.0
    else:
        pts = np.stack([rng.uniform(x0, x0 + bw, 3), rng.uniform(y0, y0 + bh, 3)], axis=1)
        e1, e2 = pts[1] - pts[0], pts[2] - pts[0]
        area2 = abs(e1[0] * e2[1] - e1[1] * e2[0])
        if area2 < 0.25 * bw * bh:
            return None
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
        inside = np.ones((height, width), dtype=bool)
        for k in range(3):
            p, q = pts[k], pts[(k + 1) % 3]
            cross = (q[0] - p[0]) * (ys - p[1]) - (q[1] - p[1]) * (xs - p[0])
            ref = (q[0] - p[0]) * (pts[(k + 2) % 3][1] - p[1]) - \
                  (q[1] - p[1]) * (pts[(k + 2) % 3][0] - p[0])
            inside &= cross * ref >= 0
        mask[inside] = 1.0
    if mask.sum() < 4:
        return None
    return mask


def _tight_box(mask: np.ndarray) -> BBox:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def _distinct_colors(rng: np.random.Generator, n: int) -> list[np.ndarray]:
    colors: list[np.ndarray] = []
    spacing = 0.75
    tries = 0
    while len(colors) < n:
        c = rng.uniform(0.35, 1.0, size=3)
        if all(np.abs(c - prev).sum() > spacing for prev in colors):
            colors.append(c)
        tries += 1
        if tries % 200 == 0:
            spacing *= 0.5
    return colors


def generate_scene(seed: int, width: int = 32, height: int = 32,
                   n_objects: int = 3) -> SceneRecord:
    """Deterministic synthetic scene with at least one overlapping pair.

    Objects 0 and 1 are placed so their shapes genuinely overlap; any
    further objects are kept clear of everything already placed, so the
    canonical pair decomposes without interference from other instances.
    Depth ranks follow the bottom-edge depth proxy used by the painter
    heuristic, keeping rendering and recomposition order consistent.
    """
    if n_objects < 2:
        raise ValueError(f"scenes need at least 2 objects, got {n_objects}")
    rng = np.random.default_rng(seed)
    min_side = min(width, height)
    lo, hi = max(6, min_side // 4), max(8, min_side // 2)
    if hi >= min_side:
        raise ValueError(f"canvas {width}x{height} too small for object shapes")

    def draw_shape(x_range, y_range):
        for _ in range(200):
            bw = int(rng.integers(lo, hi + 1))
            bh = int(rng.integers(lo, hi + 1))
            x0 = int(rng.integers(x_range[0], max(x_range[0], x_range[1] - bw) + 1))
            y0 = int(rng.integers(y_range[0], max(y_range[0], y_range[1] - bh) + 1))
            if x0 + bw > width or y0 + bh > height:
                continue
            mask = _raster_shape(rng, width, height, x0, y0, bw, bh)
            if mask is not None:
                return mask
        raise RuntimeError("could not place a shape under the given constraints")

    masks = [draw_shape((0, width), (0, height))]
    # second shape must genuinely overlap the first, but only partially:
    # a slight-to-moderate occlusion keeps sizeable visible areas of both
    # objects inside the pair's box intersection
    for _ in range(500):
        cand = draw_shape((0, width), (0, height))
        inter = (cand * masks[0]).sum()
        cap = 0.4 * min(cand.sum(), masks[0].sum())
        if 4 <= inter <= cap and (cand * (1 - masks[0])).sum() >= 4 \
                and (masks[0] * (1 - cand)).sum() >= 4:
            masks.append(cand)
            break
    else:
        raise RuntimeError("could not construct an overlapping pair")
    # remaining shapes stay clear of everything placed so far
    for _ in range(n_objects - 2):
        occupied = np.clip(np.sum(masks, axis=0), 0, 1)
        for _ in range(500):
            cand = draw_shape((0, width), (0, height))
            if (cand * occupied).sum() == 0:
                masks.append(cand)
                break
        else:
            raise RuntimeError("could not place a non-overlapping extra shape")

    boxes = [_tight_box(m) for m in masks]
    order = painter_order(boxes)
    ranks = [0] * len(masks)
    for rank, idx in enumerate(order):
        ranks[idx] = rank

    colors = _distinct_colors(rng, len(masks))
    image = _textured_background(rng, width, height)
    for idx in order:  # farther first; nearer overwrite
        image[masks[idx] == 1.0] = colors[idx]

    instances = [Instance(box=b, mask=m, depth_rank=r)
                 for b, m, r in zip(boxes, masks, ranks)]
    scene = SceneRecord(image=image, instances=instances)
    scene.validate()
    return scene


def visible_mask(scene: SceneRecord, index: int) -> np.ndarray:
    """Amodal mask minus every nearer instance's amodal mask."""
    inst = scene.instances[index]
    vis = inst.mask.copy()
    for other in scene.instances:
        if other.depth_rank > inst.depth_rank:
            vis = vis * (1.0 - other.mask)
    return vis


def decompose(scene: SceneRecord, pair: tuple[int, int]) -> TrainSample:
    """Split a scene into hole-punched background plus the pair's crops.

    The background erases the union of the pair's amodal masks; each crop
    keeps only the object's visible pixels, cropped to its box.
    """
    i, j = pair
    box_i, box_j = scene.instances[i].box, scene.instances[j].box
    if iou(box_i, box_j) <= 0.0:
        raise ValueError(f"pair boxes {box_i.to_json()} / {box_j.to_json()} do not intersect")
    m_u = np.maximum(scene.instances[i].mask, scene.instances[j].mask)
    background = masked_background(scene.image, m_u)
    crops, vis_masks, boxes = [], [], []
    for idx in (i, j):
        vis = visible_mask(scene, idx)
        b = scene.instances[idx].box
        crop = (scene.image * vis[:, :, None])[b.y0:b.y1, b.x0:b.x1]
        crops.append(crop)
        vis_masks.append(vis)
        boxes.append(b)
    return TrainSample(background=background, object_crops=crops,
                       masks=vis_masks, boxes=boxes, target=scene.image.copy())


def recompose_painter(sample: TrainSample) -> np.ndarray:
    """Paste the visible crops back over the background in painter order."""
    canvas = sample.background.copy()
    for p in painter_order(sample.boxes):
        b = sample.boxes[p]
        region = sample.masks[p][b.y0:b.y1, b.x0:b.x1] == 1.0
        canvas[b.y0:b.y1, b.x0:b.x1][region] = sample.object_crops[p][region]
    return canvas


# -- scene persistence ------------------------------------------------------------

def save_scene(directory, scene: SceneRecord) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    imageio.write_ppm(directory / "image.ppm", scene.image)
    entries = []
    for i, inst in enumerate(scene.instances):
        mask_name = f"mask_{i:02d}.pgm"
        imageio.write_pgm(directory / mask_name, inst.mask)
        entries.append({"box": inst.box.to_json(), "depth_rank": inst.depth_rank,
                        "mask": mask_name})
    meta = {"provenance": scene.provenance, "instances": entries}
    (directory / "instances.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_scene(directory) -> SceneRecord:
    directory = Path(directory)
    meta = json.loads((directory / "instances.json").read_text())
    image = imageio.read_ppm(directory / "image.ppm")
    instances = []
    for entry in meta["instances"]:
        mask = imageio.read_pgm(directory / entry["mask"])
        instances.append(Instance(box=BBox.from_json(entry["box"]),
                                  mask=np.rint(mask), depth_rank=entry["depth_rank"]))
    return SceneRecord(image=image, instances=instances, provenance=meta["provenance"])
