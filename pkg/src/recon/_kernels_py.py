"""Pure-Python/numpy versions of the compiled perception kernels.

Behaviour is identical to ``recon._kernels``; used when the extension is not built.
"""
import numpy as np


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def label_components(classes):
    """4-connected labelling of equal positive classes; labels follow raster order."""
    cls = np.asarray(classes, dtype=np.int32)
    h, w = cls.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent = [0]
    prev_runs = []  # (x_start, x_end, class, provisional label) for the previous row
    for y in range(h):
        row = cls[y]
        # run-length encode the row: boundaries where the class changes
        change = np.flatnonzero(np.diff(row)) + 1
        starts = np.concatenate(([0], change))
        ends = np.concatenate((change, [w]))
        runs = []
        j = 0
        for s, e in zip(starts.tolist(), ends.tolist()):
            v = int(row[s])
            if v <= 0:
                continue
            lab = 0
            while j < len(prev_runs) and prev_runs[j][1] <= s:
                j += 1
            k = j
            while k < len(prev_runs) and prev_runs[k][0] < e:
                ps, pe, pv, pl = prev_runs[k]
                if pv == v:
                    if lab == 0:
                        lab = pl
                    else:
                        a, b = _find(parent, lab), _find(parent, pl)
                        if a < b:
                            parent[b] = a
                        elif b < a:
                            parent[a] = b
                k += 1
            if lab == 0:
                lab = len(parent)
                parent.append(lab)
            runs.append((s, e, v, lab))
            labels[y, s:e] = lab
        prev_runs = runs
    if len(parent) == 1:
        return labels, 0
    roots = np.array([_find(parent, i) for i in range(len(parent))], dtype=np.int64)
    flat = roots[labels.ravel()]
    # renumber roots in raster order of first appearance
    fg = flat > 0
    uniq, first = np.unique(flat[fg], return_index=True)
    order = np.argsort(first)
    remap = np.zeros(len(parent), dtype=np.int64)
    remap[uniq[order]] = np.arange(1, len(uniq) + 1)
    return remap[flat].reshape(h, w).astype(np.int32), int(len(uniq))


def component_stats(labels, n):
    """Rows ``[x0, y0, x1, y1, area]`` (half-open boxes) for labels 1..n."""
    labels = np.asarray(labels)
    out = np.zeros((n, 5), dtype=np.int64)
    if n == 0:
        return out
    h, w = labels.shape
    ys, xs = np.nonzero((labels > 0) & (labels <= n))
    idx = labels[ys, xs] - 1
    out[:, 0], out[:, 1] = w, h
    np.minimum.at(out[:, 0], idx, xs)
    np.minimum.at(out[:, 1], idx, ys)
    np.maximum.at(out[:, 2], idx, xs + 1)
    np.maximum.at(out[:, 3], idx, ys + 1)
    out[:, 4] = np.bincount(idx, minlength=n)
    return out


def _dilate3(mask):
    out = mask.copy()
    out[1:, :] |= mask[:-1, :]
    out[:-1, :] |= mask[1:, :]
    tmp = out.copy()
    out[:, 1:] |= tmp[:, :-1]
    out[:, :-1] |= tmp[:, 1:]
    return out


def chebyshev_owner(masks, radius):
    """Nearest-mask ownership within Chebyshev ``radius``; ties go to the lower index.

    Returns ``(owner, dist)``; unreached pixels have owner -1.
    """
    masks = np.asarray(masks, dtype=bool)
    n, h, w = masks.shape
    dist = np.full((n, h, w), radius + 1, dtype=np.int32)
    for i in range(n):
        reached = masks[i].copy()
        dist[i][reached] = 0
        for r in range(1, radius + 1):
            grown = _dilate3(reached)
            dist[i][grown & ~reached] = r
            reached = grown
    if n == 0:
        return np.full((h, w), -1, dtype=np.int32), np.full((h, w), radius + 1, dtype=np.int32)
    best = dist.min(axis=0)
    owner = dist.argmin(axis=0).astype(np.int32)
    owner[best > radius] = -1
    return owner, best.astype(np.int32)
