"""Procedural scenes standing in for backbone features and object proposals.

A scene is described in image pixels: labelled object boxes, a few unlabeled
distractor blobs and a smooth random field. :func:`render_features` samples
it at the centers of a stride-spaced grid for any resize factor, which gives
a C x H x W map where

* channels ``0..K-1`` carry class signatures (each class also leaks weakly
  into the next class's channel),
* channel ``K`` is a shared objectness plateau,
* channel ``K+1`` peaks on object boundaries,
* remaining channels hold only background field and noise.
"""

from dataclasses import dataclass, asdict
import json
import math
import os

import numpy as np

from ..geometry import clip_boxes, iou_matrix, read_boxes, write_boxes
from ..roipool import read_tensor, write_tensor
from ..sampler import AnnotatedImage


@dataclass
class SyntheticConfig:
    num_classes: int = 4
    channels: int = 8
    stride: int = 16
    height: int = 600
    min_width: int = 640
    max_width: int = 800
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 96.0
    max_size: float = 320.0
    max_distractors: int = 2
    bumps_per_channel: int = 3
    noise: float = 0.35
    jitter_per_gt: int = 8
    jitter_shift: float = 0.2
    jitter_scale: float = 0.3
    random_proposals: int = 96

    def __post_init__(self):
        if self.channels < self.num_classes + 2:
            raise ValueError("need at least num_classes + 2 channels")
        if self.min_width % self.stride or self.max_width % self.stride:
            raise ValueError("image widths must be multiples of the stride (exact flips)")


@dataclass
class Scene:
    image_id: str
    width: int
    height: int
    objects: list  # [x1, y1, x2, y2, label]
    distractors: list  # [x1, y1, x2, y2, label]
    bumps: list  # [channel, cx, cy, sigma, amplitude]
    noise_seed: int
    proposals: list  # [x1, y1, x2, y2]

    @property
    def gt_boxes(self):
        return np.asarray([o[:4] for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @property
    def gt_labels(self):
        return np.asarray([o[4] for o in self.objects], dtype=np.int64)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def class_signature(k, cfg):
    sig = np.zeros(cfg.channels)
    sig[k - 1] = 1.0
    sig[k % cfg.num_classes] += 0.35
    sig[cfg.num_classes] = 0.8
    return sig


def _plateau(X, Y, box):
    x1, y1, x2, y2 = box
    depth = np.minimum(np.minimum(X - x1, x2 - X), np.minimum(Y - y1, y2 - Y))
    return np.clip(depth / (0.25 * min(x2 - x1, y2 - y1)), 0.0, 1.0)


def _edge(X, Y, box, width):
    x1, y1, x2, y2 = box
    dx = np.maximum(np.maximum(x1 - X, X - x2), 0.0)
    dy = np.maximum(np.maximum(y1 - Y, Y - y2), 0.0)
    outside = np.hypot(dx, dy)
    inside = np.minimum(np.minimum(X - x1, x2 - X), np.minimum(Y - y1, y2 - Y))
    d = np.where((dx > 0) | (dy > 0), outside, inside)
    return np.exp(-0.5 * (d / width) ** 2)


def feature_shape(width, height, factor, stride):
    return (math.ceil(height * factor / stride), math.ceil(width * factor / stride))


def render_features(scene, cfg, factor=1.0):
    """Sample the scene on the feature grid of an image resized by ``factor``."""
    Hf, Wf = feature_shape(scene.width, scene.height, factor, cfg.stride)
    xs = (np.arange(Wf) + 0.5) * cfg.stride / factor
    ys = (np.arange(Hf) + 0.5) * cfg.stride / factor
    X, Y = np.meshgrid(xs, ys)
    fm = np.zeros((cfg.channels, Hf, Wf))
    for ch, cx, cy, sigma, amp in scene.bumps:
        fm[int(ch)] += amp * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * sigma ** 2))
    K = cfg.num_classes
    for x1, y1, x2, y2, k in scene.objects:
        box = (x1, y1, x2, y2)
        fm += class_signature(int(k), cfg)[:, None, None] * _plateau(X, Y, box)
        fm[K + 1] += _edge(X, Y, box, cfg.stride)
    for x1, y1, x2, y2, k in scene.distractors:
        fm[int(k) - 1] += 0.6 * _plateau(X, Y, (x1, y1, x2, y2))
    noise_rng = np.random.default_rng([scene.noise_seed, int(round(factor * 1000))])
    fm += noise_rng.normal(0.0, cfg.noise, fm.shape)
    return fm


def _random_box(rng, cfg, width, height):
    w = rng.uniform(cfg.min_size, cfg.max_size)
    h = float(np.clip(w * np.exp(rng.normal(0.0, 0.3)), cfg.min_size, cfg.max_size))
    x1 = rng.uniform(0, width - w)
    y1 = rng.uniform(0, height - h)
    return [x1, y1, x1 + w, y1 + h]


def jitter_boxes(rng, box, n, shift=0.12, log_scale=0.18):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx = x1 + w / 2 + rng.normal(0, shift * w, n)
    cy = y1 + h / 2 + rng.normal(0, shift * h, n)
    nw = w * np.exp(rng.normal(0, log_scale, n))
    nh = h * np.exp(rng.normal(0, log_scale, n))
    return np.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], axis=1)


def _valid(boxes, min_side=8.0):
    return boxes[((boxes[:, 2] - boxes[:, 0]) >= min_side) & ((boxes[:, 3] - boxes[:, 1]) >= min_side)]


def make_proposals(rng, gt_boxes, width, height, cfg):
    """Jittered copies of each gt plus uniform random boxes.

    Every gt is guaranteed at least one proposal with IoU >= 0.5: extra
    jittered boxes are drawn from the same distribution until one qualifies.
    """
    parts = []
    for box in gt_boxes:
        jit = _valid(clip_boxes(jitter_boxes(rng, box, cfg.jitter_per_gt, cfg.jitter_shift,
                                             cfg.jitter_scale), width, height))
        while len(jit) == 0 or iou_matrix(jit, box).max() < 0.5:
            extra = clip_boxes(jitter_boxes(rng, box, 1, cfg.jitter_shift, cfg.jitter_scale),
                               width, height)
            jit = np.concatenate([jit, _valid(extra)])
        parts.append(jit)
    rand = []
    for _ in range(cfg.random_proposals):
        w = rng.uniform(48, 400)
        h = min(w * np.exp(rng.normal(0, 0.4)), 0.9 * height)
        x1 = rng.uniform(-w / 4, width - 3 * w / 4)
        y1 = rng.uniform(-h / 4, height - 3 * h / 4)
        rand.append([x1, y1, x1 + w, y1 + h])
    parts.append(_valid(clip_boxes(np.asarray(rand), width, height)))
    return np.concatenate(parts)


def generate_scene(rng, cfg, image_id):
    n_widths = (cfg.max_width - cfg.min_width) // cfg.stride + 1
    width = cfg.min_width + cfg.stride * int(rng.integers(n_widths))
    height = cfg.height
    objects = []
    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    attempts = 0
    while len(objects) < n_obj and attempts < 100:
        attempts += 1
        box = _random_box(rng, cfg, width, height)
        # keep objects mostly separate so each gt is a distinct target
        if objects and iou_matrix(np.asarray([o[:4] for o in objects]), box).max() > 0.1:
            continue
        objects.append(box + [int(rng.integers(1, cfg.num_classes + 1))])
    distractors = []
    for _ in range(int(rng.integers(0, cfg.max_distractors + 1))):
        w = rng.uniform(40, 120)
        x1, y1 = rng.uniform(0, width - w), rng.uniform(0, height - w)
        distractors.append([x1, y1, x1 + w, y1 + w, int(rng.integers(1, cfg.num_classes + 1))])
    bumps = []
    for ch in range(cfg.channels):
        for _ in range(cfg.bumps_per_channel):
            bumps.append([ch, rng.uniform(0, width), rng.uniform(0, height),
                          rng.uniform(40, 160), rng.normal(0, 0.3)])
    gt = np.asarray([o[:4] for o in objects]).reshape(-1, 4)
    proposals = make_proposals(rng, gt, width, height, cfg)
    return Scene(image_id, width, height, [list(map(_num, o)) for o in objects],
                 [list(map(_num, d)) for d in distractors], [list(map(float, b)) for b in bumps],
                 int(rng.integers(2 ** 31)), proposals.tolist())


def _num(v):
    return int(v) if isinstance(v, (int, np.integer)) else float(v)


def generate_scenes(n, cfg, seed, prefix="img"):
    if n < 1:
        raise ValueError("need at least one image")
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, cfg, f"{prefix}{i:05d}") for i in range(n)]


def scene_image(scene, cfg):
    return AnnotatedImage(scene.image_id, scene.width, scene.height, scene.gt_boxes,
                          scene.gt_labels, np.asarray(scene.proposals), stride=cfg.stride)


MANIFEST_COLUMNS = ("image_id", "width", "height", "gt_path", "proposal_path",
                    "feature_path", "stride", "scene_path")


def write_split(out_dir, split, scenes, cfg):
    """Write box/tensor/scene files for ``scenes`` and a ``<split>.tsv`` manifest."""
    sub = os.path.join(out_dir, split)
    os.makedirs(sub, exist_ok=True)
    lines = ["#" + "\t".join(MANIFEST_COLUMNS)]
    for sc in scenes:
        stem = os.path.join(split, sc.image_id)
        write_boxes(os.path.join(out_dir, stem + ".gt.txt"), sc.gt_boxes, sc.gt_labels)
        write_boxes(os.path.join(out_dir, stem + ".props.txt"), np.asarray(sc.proposals))
        write_tensor(os.path.join(out_dir, stem + ".fm.bin"), render_features(sc, cfg))
        with open(os.path.join(out_dir, stem + ".scene.json"), "w") as fh:
            fh.write(sc.to_json())
        lines.append("\t".join([sc.image_id, str(sc.width), str(sc.height), stem + ".gt.txt",
                                stem + ".props.txt", stem + ".fm.bin", str(cfg.stride),
                                stem + ".scene.json"]))
    path = os.path.join(out_dir, f"{split}.tsv")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "synthetic.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2, sort_keys=True)
    return path


def generate_dataset(out_dir, n_train, n_test, cfg, seed):
    """Generate train and test splits; returns the two manifest paths."""
    train = generate_scenes(n_train, cfg, [seed, 0], "train")
    test = generate_scenes(n_test, cfg, [seed, 1], "test") if n_test else []
    paths = [write_split(out_dir, "train", train, cfg)]
    if test:
        paths.append(write_split(out_dir, "test", test, cfg))
    return paths


def load_manifest(path):
    """Read a dataset manifest into AnnotatedImages (paths made absolute).

    The first five columns are required; feature map, stride and scene
    columns are optional.
    """
    base = os.path.dirname(os.path.abspath(path))
    images = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.rstrip("\n").split("\t")
            if len(cols) < 5:
                raise ValueError(f"{path}:{lineno}: expected at least 5 tab-separated columns")
            image_id, width, height, gt_path, prop_path = cols[:5]
            gt, labels, _ = read_boxes(os.path.join(base, gt_path))
            props, _, _ = read_boxes(os.path.join(base, prop_path))
            if labels is None:
                if len(gt):
                    raise ValueError(f"{gt_path}: ground-truth boxes need a label column")
                labels = np.zeros(0, dtype=np.int64)
            img = AnnotatedImage(image_id, float(width), float(height), gt, labels, props)
            if len(cols) > 5 and cols[5]:
                img.feature_path = os.path.join(base, cols[5])
            if len(cols) > 6 and cols[6]:
                img.stride = float(cols[6])
            img.scene_path = os.path.join(base, cols[7]) if len(cols) > 7 and cols[7] else None
            images.append(img)
    return images


def load_synthetic_config(manifest_path):
    path = os.path.join(os.path.dirname(os.path.abspath(manifest_path)), "synthetic.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        return SyntheticConfig(**json.load(fh))


def resize_feature_map(fm, shape):
    """Nearest-neighbour resample of a C x H x W map to ``shape`` = (H', W')."""
    C, H, W = fm.shape
    Ht, Wt = shape
    rows = np.minimum(((np.arange(Ht) + 0.5) * H / Ht).astype(np.int64), H - 1)
    cols = np.minimum(((np.arange(Wt) + 0.5) * W / Wt).astype(np.int64), W - 1)
    return fm[:, rows][:, :, cols]


class FeatureStore:
    """Feature maps per (image, resize factor, flip), computed once and cached.

    Scenes are rendered directly when available; otherwise the stored map is
    read from ``image.feature_path`` and resampled for other factors. Flips
    mirror the map along its width.
    """

    def __init__(self, images, scenes=None, cfg=None):
        self.images = {im.image_id: im for im in images}
        self.scenes = {sc.image_id: sc for sc in (scenes or [])}
        self.cfg = cfg
        self._cache = {}

    def stride(self, image_id):
        im = self.images[image_id]
        if im.stride is not None:
            return im.stride
        return self.cfg.stride

    def _scene(self, image_id):
        if image_id in self.scenes:
            return self.scenes[image_id]
        path = self.images[image_id].scene_path
        if path and self.cfg is not None and os.path.exists(path):
            with open(path) as fh:
                self.scenes[image_id] = Scene.from_json(fh.read())
            return self.scenes[image_id]
        return None

    def get(self, image_id, factor=1.0, flipped=False):
        key = (image_id, round(float(factor), 9), bool(flipped))
        if key in self._cache:
            return self._cache[key]
        im = self.images[image_id]
        if flipped:
            fm = np.ascontiguousarray(self.get(image_id, factor, False)[:, :, ::-1])
        elif factor == 1.0 and im.feature_path:
            fm = read_tensor(im.feature_path)
        elif self._scene(image_id) is not None:
            fm = render_features(self._scene(image_id), self.cfg, factor)
        elif im.feature_path:
            base = self.get(image_id, 1.0, False)
            fm = resize_feature_map(base, feature_shape(im.width, im.height, factor, self.stride(image_id)))
        else:
            raise ValueError(f"{image_id}: no feature map source")
        self._cache[key] = fm
        return fm
