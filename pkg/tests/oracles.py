"""Independent reference implementations used as test oracles.

Nothing here imports the package under test.
"""

from fractions import Fraction
import math

import numpy as np


def raster_iou(a, b):
    """IoU of integer-cornered boxes by counting unit cells of the grid."""
    lo = int(min(a[0], a[1], b[0], b[1]))
    hi = int(max(a[2], a[3], b[2], b[3]))
    ys, xs = np.mgrid[lo:hi, lo:hi] + 0.5

    def inside(bx):
        return (xs > bx[0]) & (xs < bx[2]) & (ys > bx[1]) & (ys < bx[3])

    ia, ib = inside(a), inside(b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def pair_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - iw * ih
    return iw * ih / union if union > 0 else 0.0


def reference_nms(boxes, scores, thr):
    """O(n^2) greedy NMS: keep a box unless a kept box overlaps it by more than thr."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], tuple(boxes[i])))
    keep = []
    for i in order:
        if all(pair_iou(boxes[i], boxes[k]) <= thr for k in keep):
            keep.append(i)
    return keep


def brute_pool(fm, rect, H, W):
    """Sub-window max by direct enumeration with exact rational bin edges.

    Returns the pooled values and flat argmax indices (first maximum in
    row-major order wins).
    """
    r0, c0, h, w = rect
    C = fm.shape[0]
    out = np.empty((C, H, W))
    arg = np.empty((C, H, W), dtype=np.int64)
    for i in range(H):
        ys, ye = math.floor(Fraction(i * h, H)), math.ceil(Fraction((i + 1) * h, H))
        for j in range(W):
            xs, xe = math.floor(Fraction(j * w, W)), math.ceil(Fraction((j + 1) * w, W))
            for c in range(C):
                best, where = -math.inf, None
                for y in range(r0 + ys, r0 + ye):
                    for x in range(c0 + xs, c0 + xe):
                        if fm[c, y, x] > best:
                            best, where = fm[c, y, x], (c, y, x)
                out[c, i, j] = best
                arg[c, i, j] = np.ravel_multi_index(where, fm.shape)
    return out, arg


def brute_pool_backward(fm_size, args, grads):
    """Accumulate each output gradient onto the cell its argmax selected."""
    want = np.zeros(fm_size)
    for arg, g in zip(args, grads):
        for idx, val in zip(np.ravel(arg), np.ravel(g)):
            want[idx] += val
    return want


def random_pool_case(rng, ties=False):
    C = int(rng.integers(1, 4))
    Hf, Wf = int(rng.integers(1, 12)), int(rng.integers(1, 12))
    fm = rng.integers(0, 4, (C, Hf, Wf)).astype(float) if ties else rng.normal(size=(C, Hf, Wf))
    h, w = int(rng.integers(1, Hf + 1)), int(rng.integers(1, Wf + 1))
    rect = (int(rng.integers(0, Hf - h + 1)), int(rng.integers(0, Wf - w + 1)), h, w)
    return fm, rect, int(rng.integers(1, 8)), int(rng.integers(1, 8))


def random_int_box(rng, hi=20):
    x = np.sort(rng.integers(0, hi, 2))
    y = np.sort(rng.integers(0, hi, 2))
    return np.array([x[0], y[0], x[1], y[1]], dtype=float)
