# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled perception kernels; ``recon._kernels_py`` is the reference fallback."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def label_components(cnp.ndarray classes):
    """4-connected labelling of equal positive classes; labels follow raster order."""
    cdef int[:, ::1] cls = np.ascontiguousarray(classes, dtype=np.int32)
    cdef Py_ssize_t h = cls.shape[0], w = cls.shape[1]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] out = np.zeros((h, w), dtype=np.int32)
    cdef int[:, ::1] lab = out
    cdef Py_ssize_t[::1] parent = np.arange(h * w + 1, dtype=np.intp)
    cdef Py_ssize_t y, x, nxt = 1, a, b, c
    cdef int v
    with nogil:
        for y in range(h):
            for x in range(w):
                v = cls[y, x]
                if v <= 0:
                    continue
                a = lab[y, x - 1] if x > 0 and cls[y, x - 1] == v else 0
                b = lab[y - 1, x] if y > 0 and cls[y - 1, x] == v else 0
                if a == 0 and b == 0:
                    lab[y, x] = nxt
                    nxt += 1
                elif a == 0:
                    lab[y, x] = b
                elif b == 0 or a == b:
                    lab[y, x] = a
                else:
                    lab[y, x] = a
                    a = _find(parent, a)
                    b = _find(parent, b)
                    if a < b:
                        parent[b] = a
                    elif b < a:
                        parent[a] = b
    cdef Py_ssize_t[::1] remap = np.zeros(nxt, dtype=np.intp)
    cdef Py_ssize_t count = 0
    with nogil:
        for y in range(h):
            for x in range(w):
                c = lab[y, x]
                if c == 0:
                    continue
                c = _find(parent, c)
                if remap[c] == 0:
                    count += 1
                    remap[c] = count
                lab[y, x] = <int>remap[c]
    return out, int(count)


def component_stats(cnp.ndarray labels, Py_ssize_t n):
    """Rows ``[x0, y0, x1, y1, area]`` (half-open boxes) for labels 1..n."""
    cdef int[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int32)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out = np.zeros((n, 5), dtype=np.int64)
    cdef long long[:, ::1] st = out
    cdef Py_ssize_t h = lab.shape[0], w = lab.shape[1], y, x, i
    cdef int c
    for i in range(n):
        st[i, 0] = w
        st[i, 1] = h
    with nogil:
        for y in range(h):
            for x in range(w):
                c = lab[y, x]
                if c <= 0 or c > n:
                    continue
                i = c - 1
                if x < st[i, 0]:
                    st[i, 0] = x
                if y < st[i, 1]:
                    st[i, 1] = y
                if x + 1 > st[i, 2]:
                    st[i, 2] = x + 1
                if y + 1 > st[i, 3]:
                    st[i, 3] = y + 1
                st[i, 4] += 1
    return out


def chebyshev_owner(cnp.ndarray masks, int radius):
    """Nearest-mask ownership within Chebyshev ``radius``; ties go to the lower index.

    Returns ``(owner, dist)``; unreached pixels have owner -1.
    """
    cdef cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(masks, dtype=np.uint8)
    cdef Py_ssize_t L = m.shape[0], h = m.shape[1], w = m.shape[2]
    cdef cnp.ndarray[cnp.int32_t, ndim=2] owner_arr = np.full((h, w), -1, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=2] dist_arr = np.full((h, w), radius + 1, dtype=np.int32)
    cdef int[:, ::1] owner = owner_arr
    cdef int[:, ::1] dist = dist_arr
    cdef Py_ssize_t l, y, x, yy, xx, ylo, yhi, xlo, xhi
    cdef int d, dy, dx
    with nogil:
        for l in range(L):
            for y in range(h):
                for x in range(w):
                    if not m[l, y, x]:
                        continue
                    ylo = y - radius if y >= radius else 0
                    yhi = y + radius + 1 if y + radius + 1 <= h else h
                    xlo = x - radius if x >= radius else 0
                    xhi = x + radius + 1 if x + radius + 1 <= w else w
                    for yy in range(ylo, yhi):
                        dy = <int>(yy - y) if yy >= y else <int>(y - yy)
                        for xx in range(xlo, xhi):
                            dx = <int>(xx - x) if xx >= x else <int>(x - xx)
                            d = dy if dy > dx else dx
                            # masks run in index order, so strict < leaves ties with the lower index
                            if d < dist[yy, xx]:
                                dist[yy, xx] = d
                                owner[yy, xx] = <int>l
    return owner_arr, dist_arr
