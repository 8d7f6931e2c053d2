"""Toy grounding model: pixel classifier detector, box segmenter, IoU matching and masks.

The detector is exact on the toy world: each pixel is assigned to its nearest
palette component when that component is closer than half the minimum
inter-category distance, and same-category 4-connected blobs become boxes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import chebyshev_owner, component_stats, label_components
from .toyworld import Box, Palette

DEFAULT_MIN_AREA = 16
SCORE_SCALE = 0.2


@dataclass(frozen=True)
class Detection:
    box: Box
    label: int
    score: float
    mask: np.ndarray


@dataclass(frozen=True)
class MatchResult:
    tp: list[tuple[int, int]]
    fp: list[int]
    fn: list[int]


def iou(a: Box, b: Box) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def classify_pixels(image: np.ndarray, palette: Palette, threshold: float | None = None):
    """Per-pixel ``(category, component, distance)``; category 0 also covers unassigned pixels."""
    if threshold is None:
        threshold = 0.5 * palette.min_inter_category_distance()
    flat = image.reshape(-1, 3)
    d2 = (np.sum(flat ** 2, axis=1)[:, None] - 2.0 * flat @ palette.means.T
          + np.sum(palette.means ** 2, axis=1)[None, :])
    k = np.argmin(d2, axis=1)
    dist = np.sqrt(np.maximum(d2[np.arange(len(k)), k], 0.0))
    category = np.where(dist <= threshold, palette.component_category[k], 0)
    h, w = image.shape[:2]
    return category.reshape(h, w), k.reshape(h, w), dist.reshape(h, w)


def detect(image: np.ndarray, palette: Palette, min_area: int = DEFAULT_MIN_AREA) -> list[Detection]:
    category, _, dist = classify_pixels(image, palette)
    labels, n = label_components(category.astype(np.int32))
    stats = component_stats(labels, n)
    out = []
    for i in np.flatnonzero(stats[:, 4] >= min_area):
        x0, y0, x1, y1, _ = (int(v) for v in stats[i])
        mask = labels == i + 1
        score = float(np.clip(1.0 - dist[mask].mean() / SCORE_SCALE, 0.0, 1.0))
        out.append(Detection(Box(x0, y0, x1, y1), int(category[mask][0]), score, mask))
    return out


def segment_regions(image: np.ndarray, boxes, palette: Palette) -> list[np.ndarray]:
    """Pixels inside each box classified as the box label.

    A label of ``None`` means the dominant foreground class inside the box;
    if nothing inside matches, the whole box is returned.
    """
    category, _, _ = classify_pixels(image, palette)
    h, w = category.shape
    masks = []
    for box, label in boxes:
        mask = np.zeros((h, w), dtype=bool)
        inside = category[box.slices()]
        if label is None:
            fg = inside[inside > 0]
            label = int(np.bincount(fg).argmax()) if fg.size else None
        hit = inside == label if label is not None else np.zeros_like(inside, dtype=bool)
        mask[box.slices()] = hit if hit.any() else True
        masks.append(mask)
    return masks


def match_by_iou(preds, gts, tau: float = 0.5) -> MatchResult:
    """Greedy label-aware matching: higher score first, each takes its best free GT."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    free = set(range(len(gts)))
    tp, fp = [], []
    for i in order:
        p = preds[i]
        best, best_iou = None, tau
        for j in sorted(free):
            box, label = gts[j]
            if label != p.label:
                continue
            v = iou(p.box, box)
            if v >= best_iou and (best is None or v > best_iou):
                best, best_iou = j, v
        if best is None:
            fp.append(i)
        else:
            tp.append((i, best))
            free.discard(best)
    return MatchResult(sorted(tp, key=lambda m: m[0]), sorted(fp), sorted(free))


def exclusive_dilate(masks, kernel: int = 7) -> list[np.ndarray]:
    """Square dilation where contested pixels go to the nearest original mask (ties: lower index)."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be an odd integer >= 1, got {kernel}")
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        return []
    stack = np.stack(masks)
    if np.any(stack.sum(axis=0) > 1):
        raise ValueError("exclusive_dilate needs pairwise disjoint input masks")
    owner, _ = chebyshev_owner(stack.view(np.uint8), kernel // 2)
    return [owner == i for i in range(len(masks))]


def mask_union(masks, shape: tuple[int, int] | None = None) -> np.ndarray:
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        if shape is None:
            raise ValueError("mask_union of no masks needs an explicit shape")
        return np.zeros(shape, dtype=bool)
    if any(m.shape != masks[0].shape for m in masks) or (shape and masks[0].shape != tuple(shape)):
        raise ValueError("mask_union got masks of different dimensions")
    return np.logical_or.reduce(masks)
