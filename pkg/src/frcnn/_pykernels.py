"""Pure-Python (numpy) versions of the compiled kernels in ``_ckernels.pyx``.

Signatures and results match the compiled module; they are used when the
extension is not built or when ``FRCNN_PURE_PYTHON=1`` is set.
"""

import numpy as np


def roi_pool_forward(fm, rects, pooled_h, pooled_w):
    C, Hf, Wf = fm.shape
    R = rects.shape[0]
    out = np.empty((R, C, pooled_h, pooled_w), dtype=np.float64)
    argmax = np.empty((R, C, pooled_h, pooled_w), dtype=np.int64)
    channel_base = np.arange(C, dtype=np.int64) * (Hf * Wf)
    for n in range(R):
        r0, c0, h, w = (int(v) for v in rects[n])
        for i in range(pooled_h):
            ys = r0 + (i * h) // pooled_h
            ye = r0 + ((i + 1) * h + pooled_h - 1) // pooled_h
            for j in range(pooled_w):
                xs = c0 + (j * w) // pooled_w
                xe = c0 + ((j + 1) * w + pooled_w - 1) // pooled_w
                window = fm[:, ys:ye, xs:xe].reshape(C, -1)
                # np.argmax returns the first maximum in row-major order
                local = window.argmax(axis=1)
                ww = xe - xs
                out[n, :, i, j] = window[np.arange(C), local]
                argmax[n, :, i, j] = channel_base + (ys + local // ww) * Wf + xs + local % ww
    return out, argmax


def roi_pool_backward(grad_out, argmax, size):
    grad = np.zeros(size, dtype=np.float64)
    np.add.at(grad, argmax.ravel(), grad_out.ravel())
    return grad


def nms_sorted(boxes, threshold):
    n = boxes.shape[0]
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        rest = np.arange(i + 1, n)
        rest = rest[~suppressed[rest]]
        if rest.size == 0:
            continue
        iw = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        ih = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        overlapping = (iw > 0) & (ih > 0)
        inter = np.where(overlapping, iw * ih, 0.0)
        union = areas[i] + areas[rest] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(overlapping & (union > 0), inter / union, 0.0)
        suppressed[rest[ratio > threshold]] = True
    return np.asarray(keep, dtype=np.int64)


def jacobi_svd(a, tol, max_sweeps):
    n, m = a.shape
    v = np.eye(n)
    off = 0.0
    for sweep in range(max_sweeps):
        norms = np.einsum("ij,ij->i", a, a)
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha, beta = norms[p], norms[q]
                if alpha <= 0.0 or beta <= 0.0:
                    continue
                gamma = float(a[p] @ a[q])
                rel = abs(gamma) / np.sqrt(alpha * beta)
                off = max(off, rel)
                if rel <= tol:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + np.sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                ap, aq = a[p].copy(), a[q].copy()
                a[p] = c * ap - s * aq
                a[q] = s * ap + c * aq
                vp, vq = v[p].copy(), v[q].copy()
                v[p] = c * vp - s * vq
                v[q] = s * vp + c * vq
                norms[p] = alpha - t * gamma
                norms[q] = beta + t * gamma
        if off <= tol:
            return a, v, sweep + 1, off
    return a, v, max_sweeps, off
