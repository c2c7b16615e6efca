# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: RoI max pooling, greedy NMS and one-sided Jacobi SVD.

Every routine here has a numpy twin in :mod:`frcnn._pykernels` with the same
signature and the same results; :mod:`frcnn.kernels` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, fmax, fmin

cnp.import_array()


def roi_pool_forward(const double[:, :, ::1] fm, const long long[:, ::1] rects,
                     int pooled_h, int pooled_w):
    """Max-pool each (r, c, h, w) rectangle of ``fm`` onto a fixed grid.

    Returns ``(out, argmax)`` of shape (R, C, pooled_h, pooled_w); argmax holds
    flat indices into ``fm`` (first maximum in row-major scan order).
    """
    cdef Py_ssize_t C = fm.shape[0], Hf = fm.shape[1], Wf = fm.shape[2]
    cdef Py_ssize_t R = rects.shape[0]
    out_arr = np.empty((R, C, pooled_h, pooled_w), dtype=np.float64)
    arg_arr = np.empty((R, C, pooled_h, pooled_w), dtype=np.int64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef long long[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, k, i, j, y, x, r0, c0, h, w, ys, ye, xs, xe
    cdef long long best_idx
    cdef double best, v
    for n in range(R):
        r0 = rects[n, 0]
        c0 = rects[n, 1]
        h = rects[n, 2]
        w = rects[n, 3]
        for k in range(C):
            for i in range(pooled_h):
                ys = r0 + (i * h) // pooled_h
                ye = r0 + ((i + 1) * h + pooled_h - 1) // pooled_h
                for j in range(pooled_w):
                    xs = c0 + (j * w) // pooled_w
                    xe = c0 + ((j + 1) * w + pooled_w - 1) // pooled_w
                    best = fm[k, ys, xs]
                    best_idx = (k * Hf + ys) * Wf + xs
                    for y in range(ys, ye):
                        for x in range(xs, xe):
                            v = fm[k, y, x]
                            if v > best:
                                best = v
                                best_idx = (k * Hf + y) * Wf + x
                    out[n, k, i, j] = best
                    arg[n, k, i, j] = best_idx
    return out_arr, arg_arr


def roi_pool_backward(const double[:, :, :, ::1] grad_out,
                      const long long[:, :, :, ::1] argmax, Py_ssize_t size):
    """Scatter-add ``grad_out`` into a flat zero buffer of length ``size``."""
    grad_arr = np.zeros(size, dtype=np.float64)
    cdef double[::1] grad = grad_arr
    cdef Py_ssize_t n, k, i, j
    for n in range(grad_out.shape[0]):
        for k in range(grad_out.shape[1]):
            for i in range(grad_out.shape[2]):
                for j in range(grad_out.shape[3]):
                    grad[argmax[n, k, i, j]] += grad_out[n, k, i, j]
    return grad_arr


def nms_sorted(const double[:, ::1] boxes, double threshold):
    """Greedy suppression over boxes already sorted by priority.

    A box is dropped when its IoU with an earlier kept box exceeds
    ``threshold``. Returns the kept positions (into the sorted order).
    """
    cdef Py_ssize_t n = boxes.shape[0], i, j
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] suppressed = suppressed_arr
    areas_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] areas = areas_arr
    cdef double iw, ih, inter, union
    keep = []
    for i in range(n):
        areas[i] = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = fmin(boxes[i, 2], boxes[j, 2]) - fmax(boxes[i, 0], boxes[j, 0])
            ih = fmin(boxes[i, 3], boxes[j, 3]) - fmax(boxes[i, 1], boxes[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            union = areas[i] + areas[j] - inter
            if union > 0 and inter / union > threshold:
                suppressed[j] = 1
    return np.asarray(keep, dtype=np.int64)


def jacobi_svd(double[:, ::1] a, double tol, int max_sweeps):
    """One-sided (Hestenes) Jacobi SVD of a tall matrix given as its transpose.

    ``a`` is the n x m array whose *rows* are the columns of the m x n input
    (n <= m); it is rotated in place. Returns ``(g, v, sweeps, off)`` where the
    rows of ``g`` are the orthogonalized columns (U * sigma) and the rows of
    ``v`` are the matching right singular vectors.
    """
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef Py_ssize_t p, q, k, sweep
    v_arr = np.eye(n, dtype=np.float64)
    cdef double[:, ::1] v = v_arr
    norms_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] norms = norms_arr
    cdef double alpha, beta, gamma, zeta, t, c, s, x, y, off, rel
    off = 0.0
    for sweep in range(max_sweeps):
        for p in range(n):
            alpha = 0.0
            for k in range(m):
                alpha += a[p, k] * a[p, k]
            norms[p] = alpha
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = norms[p]
                beta = norms[q]
                if alpha <= 0.0 or beta <= 0.0:
                    continue
                gamma = 0.0
                for k in range(m):
                    gamma += a[p, k] * a[q, k]
                rel = fabs(gamma) / sqrt(alpha * beta)
                if rel > off:
                    off = rel
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for k in range(m):
                    x = a[p, k]
                    y = a[q, k]
                    a[p, k] = c * x - s * y
                    a[q, k] = s * x + c * y
                for k in range(n):
                    x = v[p, k]
                    y = v[q, k]
                    v[p, k] = c * x - s * y
                    v[q, k] = s * x + c * y
                norms[p] = alpha - t * gamma
                norms[q] = beta + t * gamma
        if off <= tol:
            return np.asarray(a), v_arr, sweep + 1, off
    return np.asarray(a), v_arr, max_sweeps, off
