"""Test-time pipeline: scale selection, proposal scoring, per-class NMS and AP.

AP uses the all-points interpolated area under the precision/recall curve
(not the 11-point variant), so absolute numbers differ from 11-point VOC07
figures.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import Box, as_boxes, clip_boxes, decode, iou_matrix
from .losses import softmax
from .roipool import map_boxes_to_rects

TARGET_AREA = 224.0 ** 2


@dataclass
class ScaleConfig:
    mode: str = "single"
    scales: tuple = (600,)
    max_size: float = 1000

    def __post_init__(self):
        if self.mode not in ("single", "pyramid"):
            raise ValueError(f"scale mode must be 'single' or 'pyramid', got {self.mode!r}")
        self.scales = tuple(self.scales)
        if not self.scales or any(s <= 0 for s in self.scales) or list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be positive and ascending")
        if self.mode == "single" and len(self.scales) != 1:
            raise ValueError("single-scale mode takes exactly one scale")

    @classmethod
    def single(cls, scale=600, max_size=1000):
        return cls("single", (scale,), max_size)

    @classmethod
    def pyramid(cls, scales=(480, 576, 688, 864, 1200), max_size=2000):
        return cls("pyramid", tuple(scales), max_size)

    @classmethod
    def from_mode(cls, mode):
        return cls.single() if mode == "single" else cls.pyramid()


def select_scale(width, height, cfg=None):
    """Resize factor(s) for an image: shortest side to ``s``, longest capped.

    Returns a float in single mode and a list of floats (one per pyramid
    level) in pyramid mode.
    """
    cfg = cfg or ScaleConfig.single()
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    short, long_ = min(width, height), max(width, height)
    factors = [min(s / short, cfg.max_size / long_) for s in cfg.scales]
    return factors[0] if cfg.mode == "single" else factors


def assign_roi_scale(rois, factors, target_area=TARGET_AREA):
    """Pyramid level whose rescaled RoI area is closest to ``target_area``.

    Works on a single box or (N, 4) boxes; ties go to the lower level.
    """
    single = isinstance(rois, Box) or (
        not (isinstance(rois, (list, tuple)) and rois and isinstance(rois[0], Box)) and np.ndim(rois) == 1)
    b = as_boxes(rois)
    area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    f = np.asarray(factors, dtype=np.float64)
    levels = np.abs(area[:, None] * f[None, :] ** 2 - target_area).argmin(axis=1)
    return int(levels[0]) if single else levels


@dataclass
class Detections:
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.scores)

    def subset(self, idx):
        return Detections(self.boxes[idx], self.labels[idx], self.scores[idx])


def score_proposals(net, fms, proposals, image_size, stride, factors, normalizer=None,
                    use_bbox_reg=True):
    """Class posteriors and per-class refined boxes for every proposal.

    Args:
        fms: one feature map per scale level (a single one in single-scale mode).
        proposals: (P, 4) boxes in original image coordinates.
        image_size: (width, height) of the original image.
        factors: resize factor per level, matching ``fms``.

    Returns:
        (probs (P, K+1), boxes (P, K, 4)). Boxes are clipped to the image.
        With ``use_bbox_reg=False`` every class box is the proposal itself.
    """
    K = net.num_classes
    if len(proposals) == 0:
        return np.zeros((0, K + 1)), np.zeros((0, K, 4))
    props = as_boxes(proposals)
    factors = np.atleast_1d(np.asarray(factors, dtype=np.float64))
    if len(fms) != len(factors):
        raise ValueError("need one feature map per scale factor")
    levels = assign_roi_scale(props, factors) if len(factors) > 1 else np.zeros(len(props), dtype=np.int64)
    levels = np.atleast_1d(levels)
    rects = np.empty((len(props), 4), dtype=np.int64)
    for lvl in np.unique(levels):
        rows = np.flatnonzero(levels == lvl)
        rects[rows] = map_boxes_to_rects(props[rows] * factors[lvl], stride, fms[lvl].shape[1:])
    out, _ = net.forward(fms, rects, levels)
    probs = softmax(out.logits)
    if use_bbox_reg:
        deltas = out.bbox if normalizer is None else normalizer.unapply_per_class(out.bbox)
        boxes = decode(props, deltas).reshape(len(props), K, 4)
    else:
        boxes = np.repeat(props[:, None, :], K, axis=1)
    w, h = image_size
    boxes = clip_boxes(boxes.reshape(-1, 4), w, h).reshape(len(props), K, 4)
    return probs, boxes


def _priority_order(boxes, scores):
    # confidence descending, then box coordinates ascending (lexicographic)
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms(boxes, scores, threshold, backend=None):
    """Greedy NMS for one class; returns kept indices in priority order."""
    boxes = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 < threshold < 1:
        raise ValueError("NMS threshold must lie in (0, 1)")
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = _priority_order(boxes, scores)
    keep = kernels.get_backend(backend).nms_sorted(np.ascontiguousarray(boxes[order]), float(threshold))
    return order[keep]


def nms_per_class(dets, threshold=0.3, backend=None):
    """Run NMS independently for each class label; returns the surviving Detections.

    Survivors are ordered by class, then by priority within the class.
    """
    kept = []
    for k in np.unique(dets.labels):
        idx = np.flatnonzero(dets.labels == k)
        kept.append(idx[nms(dets.boxes[idx], dets.scores[idx], threshold, backend)])
    if not kept:
        return Detections()
    return dets.subset(np.concatenate(kept))


def detections_from_scores(probs, boxes, score_floor=0.0):
    """One candidate detection per (proposal, object class) with p_k >= floor."""
    P, K1 = probs.shape
    if P == 0:
        return Detections()
    labels = np.tile(np.arange(1, K1), P)
    scores = probs[:, 1:].reshape(-1)
    flat = boxes.reshape(-1, 4)
    keep = scores >= score_floor
    return Detections(flat[keep], labels[keep], scores[keep])


def detect_image(net, fms, proposals, image_size, stride, factors, normalizer=None,
                 nms_threshold=0.3, score_floor=0.0, use_bbox_reg=True):
    probs, boxes = score_proposals(net, fms, proposals, image_size, stride, factors,
                                   normalizer, use_bbox_reg)
    return nms_per_class(detections_from_scores(probs, boxes, score_floor), nms_threshold)


@dataclass
class PrCurve:
    scores: np.ndarray
    tp: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float


@dataclass
class ApReport:
    ap: dict  # class -> AP, nan for classes without ground truth
    mean_ap: float
    curves: dict


def average_precision(recall, precision):
    """All-points interpolated area under a precision/recall curve."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def pr_curve(dets_per_image, gts_per_image, cls, iou_match=0.5):
    """Precision/recall for one class.

    Detections are matched greedily in confidence order. A detection is a
    true positive when the gt it overlaps most has IoU >= ``iou_match`` and
    was not already claimed by a higher-scoring detection.
    """
    entries = []
    for img, d in enumerate(dets_per_image):
        for j in np.flatnonzero(d.labels == cls):
            entries.append((-d.scores[j], img, j))
    entries.sort()
    gt_sets = []
    n_gt = 0
    for boxes, labels in gts_per_image:
        g = as_boxes(boxes)[np.asarray(labels) == cls] if len(boxes) else np.zeros((0, 4))
        gt_sets.append(g)
        n_gt += len(g)
    claimed = [np.zeros(len(g), dtype=bool) for g in gt_sets]
    tp = np.zeros(len(entries), dtype=bool)
    scores = np.array([-e[0] for e in entries])
    for n, (_, img, j) in enumerate(entries):
        g = gt_sets[img]
        if len(g) == 0:
            continue
        ov = iou_matrix(dets_per_image[img].boxes[j], g)[0]
        best = int(ov.argmax())
        if ov[best] >= iou_match and not claimed[img][best]:
            claimed[img][best] = True
            tp[n] = True
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1) if len(tp) else np.zeros(0)
    recall = ctp / n_gt if n_gt else np.zeros(len(tp))
    ap = average_precision(recall, precision) if n_gt else float("nan")
    return PrCurve(scores, tp, precision, recall, ap), n_gt


def evaluate_ap(dets_per_image, gts_per_image, num_classes, iou_match=0.5):
    """Per-class AP and their mean over classes that have ground truth.

    ``gts_per_image`` holds ``(boxes, labels)`` pairs aligned with
    ``dets_per_image``. Classes with no ground truth report nan and are left
    out of the mean.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth must cover the same images")
    ap, curves = {}, {}
    for k in range(1, num_classes + 1):
        curve, n_gt = pr_curve(dets_per_image, gts_per_image, k, iou_match)
        ap[k] = curve.ap if n_gt else float("nan")
        curves[k] = curve
    defined = [v for v in ap.values() if not np.isnan(v)]
    mean_ap = float(np.mean(defined)) if defined else float("nan")
    return ApReport(ap, mean_ap, curves)
