"""Hierarchical image-centric minibatch sampling.

A minibatch takes N images from a seeded permutation of the dataset and R/N
RoIs from each. Up to ``fg_fraction`` of each image's RoIs are foreground
(max IoU >= 0.5 with some ground truth); the rest are background
(max IoU in [0.1, 0.5)). Proposals below 0.1 are never sampled.
"""

from dataclasses import dataclass, field
import itertools
import math

import numpy as np

from .geometry import as_boxes, encode, flip_boxes, iou_matrix

FG, BG, IGNORED = 1, 0, -1


class SamplerError(RuntimeError):
    pass


@dataclass
class AnnotatedImage:
    image_id: str
    width: float
    height: float
    gt_boxes: np.ndarray
    gt_labels: np.ndarray
    proposals: np.ndarray
    feature_path: str = None
    stride: float = None
    scene_path: str = None

    def __post_init__(self):
        self.gt_boxes = as_boxes(self.gt_boxes) if len(self.gt_boxes) else np.zeros((0, 4))
        self.gt_labels = np.asarray(self.gt_labels, dtype=np.int64).reshape(-1)
        self.proposals = as_boxes(self.proposals) if len(self.proposals) else np.zeros((0, 4))
        if len(self.gt_labels) != len(self.gt_boxes):
            raise ValueError(f"{self.image_id}: {len(self.gt_boxes)} boxes but {len(self.gt_labels)} labels")


@dataclass
class SamplerConfig:
    images_per_batch: int = 2
    rois_per_batch: int = 128
    fg_fraction: float = 0.25
    fg_iou_lo: float = 0.5
    bg_iou_lo: float = 0.1
    bg_iou_hi: float = 0.5
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.images_per_batch < 1 or self.rois_per_batch % self.images_per_batch:
            raise ValueError("rois_per_batch must be a positive multiple of images_per_batch")
        if not 0 <= self.bg_iou_lo < self.bg_iou_hi <= self.fg_iou_lo <= 1:
            raise ValueError("need 0 <= bg_iou_lo < bg_iou_hi <= fg_iou_lo <= 1")
        if not 0 <= self.fg_fraction <= 1 or not 0 <= self.flip_prob <= 1:
            raise ValueError("fractions must lie in [0, 1]")

    @property
    def rois_per_image(self):
        return self.rois_per_batch // self.images_per_batch

    @property
    def fg_per_image(self):
        return int(round(self.fg_fraction * self.rois_per_image))


@dataclass
class MiniBatch:
    """Per-RoI arrays for one minibatch, grouped by image in sampling order."""

    image_ids: list
    image_index: np.ndarray
    rois: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    flipped: np.ndarray
    max_iou: np.ndarray
    matched_gt: np.ndarray
    # image ids whose background band had to be widened to [0, bg_iou_hi)
    widened: list = field(default_factory=list)
    # image ids whose background RoIs were drawn with replacement
    replaced: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def to_bytes(self):
        parts = [a.tobytes() for a in (self.image_index, self.rois, self.labels,
                                       self.targets, self.flipped, self.max_iou, self.matched_gt)]
        return "|".join(self.image_ids).encode() + b"".join(parts)


def assign_rois(proposals, gt_boxes, gt_labels=None, cfg=None):
    """Max IoU, matched ground-truth index and role for every proposal.

    Ties in max IoU go to the lowest gt index. With no ground truth the max
    IoU is 0, so every proposal is IGNORED. Returns
    ``(max_iou, gt_index, role)``; ``gt_index`` is -1 when there is no gt.
    """
    cfg = cfg or SamplerConfig()
    proposals = as_boxes(proposals) if len(proposals) else np.zeros((0, 4))
    n = len(proposals)
    if len(gt_boxes) == 0:
        return np.zeros(n), np.full(n, -1, dtype=np.int64), np.full(n, IGNORED, dtype=np.int64)
    ious = iou_matrix(proposals, gt_boxes)
    gt_index = ious.argmax(axis=1)
    max_iou = ious[np.arange(n), gt_index]
    role = np.full(n, IGNORED, dtype=np.int64)
    role[(max_iou >= cfg.bg_iou_lo) & (max_iou < cfg.bg_iou_hi)] = BG
    role[max_iou >= cfg.fg_iou_lo] = FG
    return max_iou, gt_index.astype(np.int64), role


def flip_horizontal(img):
    """Mirror an AnnotatedImage's boxes about its vertical center line."""
    return AnnotatedImage(
        img.image_id, img.width, img.height,
        flip_boxes(img.gt_boxes, img.width) if len(img.gt_boxes) else img.gt_boxes.copy(),
        img.gt_labels.copy(),
        flip_boxes(img.proposals, img.width) if len(img.proposals) else img.proposals.copy(),
        img.feature_path, img.stride, img.scene_path,
    )


def _sample_image(img, cfg, rng, normalizer):
    n = cfg.rois_per_image
    max_iou, gt_index, role = assign_rois(img.proposals, img.gt_boxes, cfg=cfg)
    fg_idx = np.flatnonzero(role == FG)
    bg_idx = np.flatnonzero(role == BG)
    widened = replaced = False

    n_fg = min(cfg.fg_per_image, len(fg_idx))
    fg_pick = rng.choice(fg_idx, n_fg, replace=False) if n_fg else fg_idx[:0]
    n_bg = n - n_fg
    if len(bg_idx) == 0 and n_bg:
        bg_idx = np.flatnonzero(max_iou < cfg.bg_iou_hi)
        widened = True
        if len(bg_idx) == 0:
            raise SamplerError(
                f"{img.image_id}: no proposal has IoU below {cfg.bg_iou_hi}; cannot fill background")
    if len(bg_idx) >= n_bg:
        bg_pick = rng.choice(bg_idx, n_bg, replace=False)
    else:
        extra = rng.choice(bg_idx, n_bg - len(bg_idx), replace=True)
        bg_pick = np.concatenate([rng.permutation(bg_idx), extra])
        replaced = True
    pick = np.concatenate([fg_pick, bg_pick]).astype(np.int64)

    rois = img.proposals[pick]
    gts = img.gt_boxes[gt_index[pick]]
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_fg] = img.gt_labels[gt_index[fg_pick]]
    targets = np.zeros((n, 4))
    if n_fg:
        targets[:n_fg] = encode(rois[:n_fg], gts[:n_fg])
        if normalizer is not None:
            targets[:n_fg] = normalizer.apply(targets[:n_fg])
    return rois, labels, targets, max_iou[pick], gts, widened, replaced


def sample_image_rois(img, cfg, rng, normalizer=None, flip=False):
    """Sample ``cfg.rois_per_image`` RoIs (FG first, then BG) from one image.

    When ``flip`` is set the image is mirrored before sampling, so rois,
    matched gts and targets are all in flipped coordinates.
    """
    if flip:
        img = flip_horizontal(img)
    return _sample_image(img, cfg, rng, normalizer)


class MinibatchSampler:
    """Stateful sampler that walks seeded permutations of the dataset.

    Images without ground truth can never yield foreground or background
    RoIs and are skipped; their ids are listed in ``skipped``.
    """

    def __init__(self, images, cfg, normalizer=None, rng=None):
        self.cfg = cfg
        self.images = list(images)
        self.normalizer = normalizer
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.skipped = [im.image_id for im in self.images if len(im.gt_boxes) == 0]
        self._usable = [i for i, im in enumerate(self.images) if len(im.gt_boxes) > 0]
        if len(self._usable) < cfg.images_per_batch:
            raise SamplerError(
                f"need {cfg.images_per_batch} images with ground truth, have {len(self._usable)}")
        self._order = []

    def _next_images(self):
        picked = []
        while len(picked) < self.cfg.images_per_batch:
            if not self._order:
                self._order = list(self.rng.permutation(self._usable))
            i = int(self._order.pop(0))
            # a batch never repeats an image, even across a permutation boundary
            if i in picked:
                self._order.append(i)
                continue
            picked.append(i)
        return picked

    def next_batch(self):
        cfg = self.cfg
        picked = self._next_images()
        parts = []
        widened, replaced = [], []
        for slot, i in enumerate(picked):
            img = self.images[i]
            flip = bool(self.rng.random() < cfg.flip_prob)
            rois, labels, targets, max_iou, gts, wid, rep = sample_image_rois(
                img, cfg, self.rng, self.normalizer, flip)
            if wid:
                widened.append(img.image_id)
            if rep:
                replaced.append(img.image_id)
            parts.append((np.full(len(labels), slot, dtype=np.int64), rois, labels, targets,
                          np.full(len(labels), flip), max_iou, gts))
        cols = [np.concatenate(c) for c in zip(*parts)]
        return MiniBatch([self.images[i].image_id for i in picked], *cols,
                         widened=widened, replaced=replaced)

    def __iter__(self):
        while True:
            yield self.next_batch()


def sample_minibatch(images, cfg, rng=None, normalizer=None):
    """Draw one minibatch with a fresh sampler (see :class:`MinibatchSampler`)."""
    return MinibatchSampler(images, cfg, normalizer, rng).next_batch()


def fit_target_normalizer(images, cfg=None):
    """Fit regression-target statistics over every FG candidate in ``images``."""
    from .geometry import fit_normalizer

    cfg = cfg or SamplerConfig()
    targets = []
    for img in images:
        _, gt_index, role = assign_rois(img.proposals, img.gt_boxes, cfg=cfg)
        fg = np.flatnonzero(role == FG)
        if fg.size:
            targets.append(encode(img.proposals[fg], img.gt_boxes[gt_index[fg]]))
    if not targets:
        raise SamplerError("no foreground candidates to fit target statistics")
    return fit_normalizer(np.concatenate(targets))


DEFAULT_DENSE_SCALES = tuple(64.0 * 2 ** (k / 2) for k in range(5))
DEFAULT_DENSE_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_DENSE_STRIDE = 8.0


def generate_dense_boxes(width, height, scales=DEFAULT_DENSE_SCALES,
                         ratios=DEFAULT_DENSE_RATIOS, stride=DEFAULT_DENSE_STRIDE):
    """Sliding-window boxes over position, scale and aspect ratio.

    Window centers sit at ``stride/2 + k*stride`` inside the image; each
    center gets one box per (scale, ratio) with area ``scale**2`` and
    height/width equal to ``ratio``. Boxes are clipped to the image, so the
    count is exactly ``ceil(W/stride) * ceil(H/stride) * len(scales) * len(ratios)``.
    """
    if width <= 0 or height <= 0 or stride <= 0:
        raise ValueError("image size and stride must be positive")
    cx = stride / 2 + stride * np.arange(math.ceil(width / stride))
    cy = stride / 2 + stride * np.arange(math.ceil(height / stride))
    shapes = []
    for s, r in itertools.product(scales, ratios):
        w = s / math.sqrt(r)
        shapes.append((w, w * r))
    shapes = np.asarray(shapes)
    gy, gx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel()], axis=1)
    half = shapes / 2
    x1 = centers[:, None, 0] - half[None, :, 0]
    y1 = centers[:, None, 1] - half[None, :, 1]
    x2 = centers[:, None, 0] + half[None, :, 0]
    y2 = centers[:, None, 1] + half[None, :, 1]
    boxes = np.stack([x1, y1, x2, y2], axis=-1).reshape(-1, 4)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, width)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, height)
    return boxes
