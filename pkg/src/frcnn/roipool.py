"""RoI max pooling over a C x H x W feature map, with argmax-switch backprop.

Sub-window ``(i, j)`` of an ``h x w`` RoI pooled to ``H x W`` covers rows
``[floor(i*h/H), ceil((i+1)*h/H))`` and columns
``[floor(j*w/W), ceil((j+1)*w/W))``. Windows are never empty and may overlap.
Ties resolve to the first maximum in row-major order.
"""

from dataclasses import dataclass
import math
import struct

import numpy as np

from . import kernels
from .geometry import as_boxes


class RoiBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class RoiRect:
    """RoI in feature-map cells: top-left ``(r, c)`` and extent ``(h, w)``."""

    r: int
    c: int
    h: int
    w: int
    clamped: bool = False

    def as_tuple(self):
        return (self.r, self.c, self.h, self.w)


@dataclass
class PoolResult:
    """Pooled outputs and argmax switches, both shaped (R, C, H, W)."""

    output: np.ndarray
    argmax: np.ndarray
    fm_shape: tuple


def _as_fm(fm):
    fm = np.ascontiguousarray(fm, dtype=np.float64)
    if fm.ndim != 3 or min(fm.shape) < 1:
        raise ValueError(f"feature map must be C x H x W with positive sizes, got {fm.shape}")
    return fm


def _as_rects(rois):
    if isinstance(rois, RoiRect):
        rois = [rois]
    if isinstance(rois, (list, tuple)) and rois and isinstance(rois[0], RoiRect):
        rois = [r.as_tuple() for r in rois]
    rects = np.ascontiguousarray(np.asarray(rois, dtype=np.int64).reshape(-1, 4))
    return rects


def check_rects(rects, fm_shape):
    _, Hf, Wf = fm_shape
    r, c, h, w = rects.T
    bad = (r < 0) | (c < 0) | (h < 1) | (w < 1) | (r + h > Hf) | (c + w > Wf)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise RoiBoundsError(f"RoI {tuple(rects[i])} outside feature map {Hf}x{Wf}")


def roi_pool_forward(fm, rois, pooled_h, pooled_w, backend=None):
    """Pool one or more RoIs (RoiRect, list of RoiRect or (R, 4) ints)."""
    fm = _as_fm(fm)
    rects = _as_rects(rois)
    if pooled_h < 1 or pooled_w < 1:
        raise ValueError("pooled size must be at least 1x1")
    check_rects(rects, fm.shape)
    k = kernels.get_backend(backend)
    out, argmax = k.roi_pool_forward(fm, rects, int(pooled_h), int(pooled_w))
    return PoolResult(out, argmax, fm.shape)


def roi_pool_backward(grad_out, results, fm_shape, backend=None):
    """Accumulate pooled-output gradients back onto the feature map.

    ``results`` is a PoolResult or a list of them (one per RoI batch) and
    ``grad_out`` the matching array or list of arrays. Every input cell gets
    the sum of the gradients of all outputs whose argmax selected it.
    """
    if isinstance(results, PoolResult):
        results = [results]
        grad_out = [grad_out]
    if len(results) != len(grad_out):
        raise ValueError("one gradient array is needed per PoolResult")
    fm_shape = tuple(fm_shape)
    size = int(np.prod(fm_shape))
    k = kernels.get_backend(backend)
    total = np.zeros(size)
    for g, res in zip(grad_out, results):
        if tuple(res.fm_shape) != fm_shape:
            raise ValueError(f"PoolResult from map {res.fm_shape}, expected {fm_shape}")
        g = np.ascontiguousarray(g, dtype=np.float64).reshape(res.argmax.shape)
        total += k.roi_pool_backward(g, res.argmax, size)
    return total.reshape(fm_shape)


def map_image_roi_to_feature(roi_img, stride, fm_hw):
    """Map an image-space box onto feature-map cells.

    The origin is rounded down and the far corner up, so the rect always
    covers the box; the result is clamped to the map. A box lying entirely
    outside the map becomes a 1x1 rect at the nearest border cell with
    ``clamped=True``.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    x1, y1, x2, y2 = (float(v) for v in as_boxes(roi_img)[0])
    Hf, Wf = fm_hw
    r0 = math.floor(y1 / stride)
    c0 = math.floor(x1 / stride)
    r1 = max(math.ceil(y2 / stride), r0 + 1)
    c1 = max(math.ceil(x2 / stride), c0 + 1)
    outside = r0 >= Hf or c0 >= Wf or r1 <= 0 or c1 <= 0
    r0, c0 = min(max(r0, 0), Hf - 1), min(max(c0, 0), Wf - 1)
    r1, c1 = min(max(r1, r0 + 1), Hf), min(max(c1, c0 + 1), Wf)
    if outside:
        r1, c1 = r0 + 1, c0 + 1
    return RoiRect(r0, c0, r1 - r0, c1 - c0, clamped=outside)


def map_boxes_to_rects(boxes, stride, fm_hw):
    """Vectorized :func:`map_image_roi_to_feature`; returns (N, 4) int64 rects."""
    b = as_boxes(boxes)
    Hf, Wf = fm_hw
    r0 = np.floor(b[:, 1] / stride).astype(np.int64)
    c0 = np.floor(b[:, 0] / stride).astype(np.int64)
    r1 = np.maximum(np.ceil(b[:, 3] / stride).astype(np.int64), r0 + 1)
    c1 = np.maximum(np.ceil(b[:, 2] / stride).astype(np.int64), c0 + 1)
    outside = (r0 >= Hf) | (c0 >= Wf) | (r1 <= 0) | (c1 <= 0)
    r0 = np.clip(r0, 0, Hf - 1)
    c0 = np.clip(c0, 0, Wf - 1)
    r1 = np.where(outside, r0 + 1, np.clip(r1, r0 + 1, Hf))
    c1 = np.where(outside, c0 + 1, np.clip(c1, c0 + 1, Wf))
    return np.stack([r0, c0, r1 - r0, c1 - c0], axis=1)


# Tensor files: little-endian u32 rank, u32 dims, then float32 data, row-major.

def write_tensor(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_tensor(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated tensor header")
    (rank,) = struct.unpack_from("<I", raw, 0)
    header = 4 + 4 * rank
    if len(raw) < header:
        raise ValueError(f"{path}: truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", raw, 4)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) != header + 4 * count:
        raise ValueError(f"{path}: expected {count} floats for shape {dims}")
    data = np.frombuffer(raw, dtype="<f4", offset=header, count=count)
    return data.astype(np.float64).reshape(dims)
