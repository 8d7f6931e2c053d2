"""Evaluation: layout consistency, leakage, toy Frechet distance, rectified areas, downstream F1."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import region_partition
from .kernels import component_stats, label_components
from .perception import DEFAULT_MIN_AREA, SCORE_SCALE, Detection, classify_pixels, detect, match_by_iou
from .toyworld import Box, Layout, Palette

MAX_REGIONS = 8
HIST_BINS = 8
FEATURE_DIM = MAX_REGIONS * 3 + HIST_BINS * 3
METRIC_COLUMNS = ["metric", "value", "n", "seed", "config_hash"]


def layout_consistency(image, layout: Layout, palette: Palette, tau: float = 0.5,
                       min_area: int = DEFAULT_MIN_AREA) -> tuple[bool, int, int]:
    m = match_by_iou(detect(image, palette, min_area), layout.boxes, tau)
    return (not m.fp and not m.fn), len(m.fp), len(m.fn)


def features(image: np.ndarray, layout: Layout) -> np.ndarray:
    """Mean color of the first eight GT regions (zero padded) then an 8-bin histogram per channel."""
    regions = region_partition(layout)
    means = np.zeros((MAX_REGIONS, 3))
    for i in range(min(len(layout.objects), MAX_REGIONS)):
        sel = regions == i + 1
        if sel.any():
            means[i] = image[sel].mean(axis=0)
    pix = np.clip(image.reshape(-1, 3), 0.0, 1.0)
    hist = [np.histogram(pix[:, c], bins=HIST_BINS, range=(0.0, 1.0))[0] for c in range(3)]
    return np.concatenate([means.ravel(), np.concatenate(hist).astype(float)])


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def fit(cls, feats) -> "GaussianSummary":
        feats = np.asarray(feats, dtype=float)
        if feats.ndim != 2 or len(feats) < 2:
            raise ValueError("need at least two feature vectors")
        return cls(feats.mean(axis=0), np.atleast_2d(np.cov(feats, rowvar=False)))


def _psd_sqrt(cov: np.ndarray, name: str) -> np.ndarray:
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * max(1.0, np.abs(cov).max()):
        raise ValueError(f"{name} covariance is not symmetric")
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    if vals.min(initial=0.0) < -1e-8 * max(1.0, np.abs(vals).max()):
        raise ValueError(f"{name} covariance is not positive semidefinite (min eig {vals.min():.3g})")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(a: GaussianSummary, b: GaussianSummary) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), clamped at zero."""
    if a.mean.shape != b.mean.shape or a.covariance.shape != b.covariance.shape:
        raise ValueError("summaries have different dimensions")
    root_a = _psd_sqrt(a.covariance, "first")
    _psd_sqrt(b.covariance, "second")
    middle = root_a @ b.covariance @ root_a
    vals = np.linalg.eigvalsh((middle + middle.T) / 2)
    cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * cross
    return float(max(d, 0.0))


def dominant_categories(image: np.ndarray, layout: Layout, palette: Palette) -> list[int]:
    """Majority detector class (0 = background/unassigned) inside each object region."""
    category, _, _ = classify_pixels(image, palette)
    regions = region_partition(layout)
    out = []
    for i in range(len(layout.objects)):
        cats = category[regions == i + 1]
        out.append(int(np.bincount(cats, minlength=palette.num_categories).argmax()) if cats.size else 0)
    return out


def leakage_score(samples, palette: Palette) -> float:
    """Fraction of object regions whose dominant detected category differs from the annotation."""
    leaked = total = 0
    for image, layout in samples:
        if len(layout.caption) < 2:
            raise ValueError("leakage needs layouts whose caption names at least two categories")
        for dom, obj in zip(dominant_categories(image, layout, palette), layout.objects):
            leaked += dom != obj.label
            total += 1
    return leaked / total if total else 0.0


def default_area_bins(max_area: int = 4096) -> np.ndarray:
    return np.geomspace(1.0, max_area + 1, 13)


def area_histogram(traces, bins=None) -> tuple[np.ndarray, np.ndarray]:
    """Counts of connected rectified-blob areas pooled over every stage of every trace."""
    bins = default_area_bins() if bins is None else np.asarray(bins, dtype=float)
    areas = []
    for trace in traces:
        for stage in trace.stages:
            labels, n = label_components(stage.mask.astype(np.int32))
            areas.extend(component_stats(labels, n)[:, 4].tolist())
    counts, _ = np.histogram(areas, bins=bins)
    return counts, bins


# --- downstream micro-detector --------------------------------------------

@dataclass
class DownstreamReport:
    f1_real_only: float
    f1_augmented: float
    fallback_real: list[int] = field(default_factory=list)
    fallback_augmented: list[int] = field(default_factory=list)


def fit_prototypes(train, palette: Palette) -> tuple[np.ndarray, list[int]]:
    """Per-category mean color over GT-box pixels (background: pixels outside all boxes)."""
    C = palette.num_categories
    sums = np.zeros((C, 3))
    counts = np.zeros(C)
    for image, layout in train:
        regions = region_partition(layout)
        labels = np.array([0] + [o.label for o in layout.objects])[regions]
        for c in range(C):
            sel = labels == c
            sums[c] += image[sel].sum(axis=0)
            counts[c] += sel.sum()
    protos = np.zeros((C, 3))
    missing = []
    for c in range(C):
        if counts[c] > 0:
            protos[c] = sums[c] / counts[c]
        else:
            sl = palette.category_slice(c)
            protos[c] = palette.weights[sl] @ palette.means[sl]
            missing.append(c)
    if missing:
        warnings.warn(f"categories {missing} absent from training data; using palette means")
    return protos, missing


def prototype_detect(image: np.ndarray, prototypes: np.ndarray,
                     min_area: int = DEFAULT_MIN_AREA) -> list[Detection]:
    """Nearest-prototype pixel classes within half the minimum prototype spacing, then blobs."""
    gaps = np.linalg.norm(prototypes[:, None] - prototypes[None], axis=-1)
    gaps[np.diag_indices_from(gaps)] = np.inf
    threshold = 0.5 * gaps.min()
    flat = image.reshape(-1, 3)
    d = np.linalg.norm(flat[:, None, :] - prototypes[None], axis=-1)
    k = d.argmin(axis=1)
    dist = d[np.arange(len(k)), k]
    cls = np.where(dist <= threshold, k, 0).reshape(image.shape[:2]).astype(np.int32)
    labels, n = label_components(cls)
    stats = component_stats(labels, n)
    dist = dist.reshape(image.shape[:2])
    out = []
    for i in np.flatnonzero(stats[:, 4] >= min_area):
        x0, y0, x1, y1, _ = (int(v) for v in stats[i])
        mask = labels == i + 1
        score = float(np.clip(1.0 - dist[mask].mean() / SCORE_SCALE, 0.0, 1.0))
        out.append(Detection(Box(x0, y0, x1, y1), int(cls[mask][0]), score, mask))
    return out


def pooled_f1(test, prototypes: np.ndarray, tau: float = 0.5) -> float:
    tp = fp = fn = 0
    for image, layout in test:
        m = match_by_iou(prototype_detect(image, prototypes), layout.boxes, tau)
        tp, fp, fn = tp + len(m.tp), fp + len(m.fp), fn + len(m.fn)
    return 2 * tp / (2 * tp + fp + fn) if (tp + fp + fn) else 1.0


def micro_downstream_eval(train_real, train_aug, test, palette: Palette,
                          tau: float = 0.5) -> DownstreamReport:
    """F1 of a prototype detector trained on real data alone vs real plus generated data."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        protos_real, miss_real = fit_prototypes(list(train_real), palette)
        protos_aug, miss_aug = fit_prototypes(list(train_real) + list(train_aug), palette)
    return DownstreamReport(pooled_f1(test, protos_real, tau), pooled_f1(test, protos_aug, tau),
                            miss_real, miss_aug)


# --- result files ------------------------------------------------------------

def append_metric_rows(path, rows) -> None:
    """Append ``(metric, value, n, seed, config_hash)`` rows, writing a header for new files."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row[0], format_value(row[1]), *row[2:]])


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))
