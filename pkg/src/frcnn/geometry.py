"""Boxes, IoU and the bounding-box regression parameterization.

Boxes are stored as ``(x1, y1, x2, y2)`` corners. Areas use the continuous
convention ``(x2 - x1) * (y2 - y1)``; there is no "+1" pixel inflation
anywhere in the package.

Regression targets ``(tx, ty, tw, th)`` are a center offset measured in
units of the proposal size plus a log-space width/height ratio.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np

# Largest allowed log-size shift when decoding; keeps exp() finite on
# untrained regressors.
DECODE_CLAMP = math.log(1000.0 / 16.0)


class InvalidGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidGeometryError(f"non-finite box {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidGeometryError(f"inverted box {vals}")

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def rchw(self):
        """Top-left row/column plus height/width view of the box."""
        return (self.y1, self.x1, self.height, self.width)

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def as_boxes(boxes):
    """Coerce a Box, sequence of Boxes or array-like to an (N, 4) float array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None, :]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InvalidGeometryError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def box_area(boxes):
    b = as_boxes(boxes)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def iou_matrix(a, b):
    """Pairwise IoU between (N, 4) and (M, 4) boxes, shape (N, M).

    Pairs with zero union (two degenerate boxes) get IoU 0.
    """
    a = as_boxes(a)
    b = as_boxes(b)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def iou(a, b):
    """IoU of two single boxes."""
    return float(iou_matrix(a, b)[0, 0])


def _centers_sizes(boxes):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode(proposals, targets):
    """Regression targets that move each proposal onto its target box.

    Both inputs are (N, 4) (or single boxes); returns (N, 4) rows of
    ``(tx, ty, tw, th)``.
    """
    p = as_boxes(proposals)
    g = as_boxes(targets)
    pcx, pcy, pw, ph = _centers_sizes(p)
    gcx, gcy, gw, gh = _centers_sizes(g)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise InvalidGeometryError("proposal with non-positive width or height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise InvalidGeometryError("target with non-positive width or height")
    return np.stack(
        [(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1
    )


def decode(proposals, deltas, clamp=DECODE_CLAMP, return_clamped=False):
    """Apply ``(tx, ty, tw, th)`` deltas to proposals; inverse of :func:`encode`.

    ``deltas`` may be (N, 4) or (N, 4K) for per-class predictions; the output
    has the same shape. ``tw``/``th`` larger than ``clamp`` are clipped before
    exponentiation and reported through the optional boolean mask.
    """
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]
    pcx, pcy, pw, ph = _centers_sizes(p)
    if np.any(pw <= 0) or np.any(ph <= 0):
        raise InvalidGeometryError("proposal with non-positive width or height")
    tx, ty = d[:, 0::4], d[:, 1::4]
    tw, th = d[:, 2::4], d[:, 3::4]
    clamped = (tw > clamp) | (th > clamp)
    tw = np.minimum(tw, clamp)
    th = np.minimum(th, clamp)
    cx = tx * pw[:, None] + pcx[:, None]
    cy = ty * ph[:, None] + pcy[:, None]
    w = np.exp(tw) * pw[:, None]
    h = np.exp(th) * ph[:, None]
    out = np.empty_like(d)
    out[:, 0::4] = cx - 0.5 * w
    out[:, 1::4] = cy - 0.5 * h
    out[:, 2::4] = cx + 0.5 * w
    out[:, 3::4] = cy + 0.5 * h
    if return_clamped:
        return out, clamped.any(axis=1)
    return out


def clip_boxes(boxes, width, height):
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def flip_boxes(boxes, width):
    """Mirror boxes horizontally inside an image of the given width.

    Flipping twice is exact when coordinates and width sit on a common
    dyadic grid (integer or sub-pixel); otherwise it is exact to rounding.
    """
    b = as_boxes(boxes).copy()
    x1 = b[:, 0].copy()
    b[:, 0] = width - b[:, 2]
    b[:, 2] = width - x1
    return b


@dataclass
class TargetNormalizer:
    """Per-coordinate mean/stddev of foreground regression targets."""

    mean: np.ndarray
    std: np.ndarray
    floored: bool = False

    def apply(self, targets):
        return (np.asarray(targets, dtype=np.float64) - self.mean) / self.std

    def unapply(self, targets):
        return np.asarray(targets, dtype=np.float64) * self.std + self.mean

    def unapply_per_class(self, deltas):
        """Undo normalization on (N, 4K) per-class regression outputs."""
        d = np.asarray(deltas, dtype=np.float64)
        k = d.shape[-1] // 4
        return d * np.tile(self.std, k) + np.tile(self.mean, k)

    @classmethod
    def identity(cls):
        return cls(np.zeros(4), np.ones(4))


def fit_normalizer(targets, eps=1e-6):
    """Fit a :class:`TargetNormalizer` (population statistics, ddof=0).

    Coordinates whose stddev falls below ``eps`` are floored at ``eps`` and
    the returned normalizer has ``floored=True``.
    """
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    if t.shape[0] == 0:
        raise ValueError("cannot fit a normalizer on zero targets")
    mean = t.mean(axis=0)
    std = t.std(axis=0)
    floored = bool(np.any(std < eps))
    if floored:
        warnings.warn("regression target stddev below epsilon; flooring", RuntimeWarning)
        std = np.maximum(std, eps)
    return TargetNormalizer(mean, std, floored)


def read_boxes(path):
    """Read a box file: ``x1 y1 x2 y2 [label] [score]`` per line.

    Returns ``(boxes, labels, scores)``; labels/scores are None when the
    column is absent from every line.
    """
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
    boxes = np.array([[float(v) for v in r[:4]] for r in rows], dtype=np.float64).reshape(-1, 4)
    widths = {len(r) for r in rows}
    if any(w < 4 or w > 6 for w in widths):
        raise ValueError(f"{path}: box lines must have 4 to 6 columns")
    labels = np.array([int(r[4]) for r in rows], dtype=np.int64) if rows and min(widths) >= 5 else None
    scores = np.array([float(r[5]) for r in rows]) if rows and min(widths) >= 6 else None
    return boxes, labels, scores


def write_boxes(path, boxes, labels=None, scores=None):
    boxes = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    with open(path, "w") as fh:
        for i, b in enumerate(boxes):
            cols = [repr(float(v)) for v in b]
            if labels is not None:
                cols.append(str(int(labels[i])))
            if scores is not None:
                cols.append(repr(float(scores[i])))
            fh.write(" ".join(cols) + "\n")
