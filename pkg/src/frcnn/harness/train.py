"""Training and evaluation drivers for the three fine-tuning regimes.

* ``multitask``: classification and box regression trained jointly.
* ``cls-only``: classification loss only (lambda = 0).
* ``stage-wise``: a cls-only model whose box regressor is re-initialized and
  then trained with every other parameter frozen.
"""

from dataclasses import dataclass, field, fields, replace
import copy
import logging

import numpy as np

from ..detect import ScaleConfig, detect_image, evaluate_ap, select_scale
from ..geometry import TargetNormalizer
from ..losses import multitask_loss_batch
from ..net import DetectionNet, FcLayer, SgdConfig, SgdState, sgd_step
from ..roipool import map_boxes_to_rects
from ..sampler import MinibatchSampler, SamplerConfig, fit_target_normalizer

log = logging.getLogger(__name__)

MODES = ("multitask", "cls-only", "stage-wise")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    num_classes: int = 4
    lam: float = 1.0
    mode: str = "multitask"
    iterations: int = 4000
    step_iter: int = 3000
    stage2_iterations: int = 4000
    base_lr: float = 0.001
    drop_lr: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    images_per_batch: int = 2
    rois_per_batch: int = 128
    fg_fraction: float = 0.25
    flip_prob: float = 0.5
    pooled_size: int = 7
    trunk_widths: tuple = (256, 32)
    scale: str = "single"
    nms_threshold: float = 0.3
    score_floor: float = 0.0
    n_train: int = 200
    n_test: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)

    def sgd_config(self):
        return SgdConfig(base_lr=self.base_lr, drop_lr=self.drop_lr, step_iter=self.step_iter,
                         momentum=self.momentum, weight_decay=self.weight_decay)

    def sampler_config(self, stream=0):
        return SamplerConfig(images_per_batch=self.images_per_batch,
                             rois_per_batch=self.rois_per_batch, fg_fraction=self.fg_fraction,
                             flip_prob=self.flip_prob, seed=self.seed * 1000 + stream)

    @classmethod
    def field_types(cls):
        return {f.name: f.type for f in fields(cls)}


@dataclass
class LossRow:
    iteration: int
    cls: float
    loc: float
    total: float
    lr: float


@dataclass
class TrainResult:
    net: DetectionNet
    normalizer: TargetNormalizer
    state: SgdState
    log: list = field(default_factory=list)
    run: RunConfig = None


def write_loss_log(path, rows):
    with open(path, "w") as fh:
        fh.write("#iter\tcls\tloc\ttotal\tlr\n")
        for r in rows:
            fh.write(f"{r.iteration}\t{r.cls:.9g}\t{r.loc:.9g}\t{r.total:.9g}\t{r.lr:.9g}\n")


def read_loss_log(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            it, c, lo, t, lr = line.split("\t")
            rows.append(LossRow(int(it), float(c), float(lo), float(t), float(lr)))
    return rows


def window_means(rows, window=100):
    """Mean total loss over consecutive non-overlapping windows (partial tail dropped)."""
    tot = np.array([r.total for r in rows])
    n = len(tot) // window
    return tot[:n * window].reshape(n, window).mean(axis=1)


def trend_violations(rows, window=100, n_se=3.0):
    """Windows whose mean loss rises by more than ``n_se`` standard errors.

    Per-iteration minibatch noise makes a sliding average wiggle, so a rise
    only counts when it exceeds what that noise explains: the standard error
    of the difference of two window means, using the within-window spread.
    Returns the indices ``i`` where window ``i + 1`` exceeds window ``i``.
    """
    tot = np.array([r.total for r in rows])
    n = len(tot) // window
    blocks = tot[:n * window].reshape(n, window)
    means = blocks.mean(axis=1)
    se = blocks.std(axis=1, ddof=1) / np.sqrt(window)
    rise = np.diff(means)
    slack = n_se * np.sqrt(se[:-1] ** 2 + se[1:] ** 2)
    return [int(i) for i in np.flatnonzero(rise > slack)]


def _batch_inputs(batch, store):
    fms, rects = [], np.empty((len(batch), 4), dtype=np.int64)
    for slot, image_id in enumerate(batch.image_ids):
        rows = np.flatnonzero(batch.image_index == slot)
        fm = store.get(image_id, 1.0, bool(batch.flipped[rows[0]]))
        fms.append(fm)
        rects[rows] = map_boxes_to_rects(batch.rois[rows], store.stride(image_id), fm.shape[1:])
    return fms, rects


def _train_loop(net, images, store, normalizer, run, lam, iterations, stream, frozen=(),
                start_iter=0, progress=None):
    sgd_cfg = run.sgd_config()
    state = SgdState()
    sampler = MinibatchSampler(images, run.sampler_config(stream), normalizer)
    params = net.params()
    rows = []
    for it in range(iterations):
        batch = sampler.next_batch()
        fms, rects = _batch_inputs(batch, store)
        out, cache = net.forward(fms, rects, batch.image_index)
        report, g_logits, g_bbox = multitask_loss_batch(out.logits, out.bbox, batch.labels,
                                                        batch.targets, lam)
        if not np.isfinite(report.total):
            raise TrainingDiverged(f"non-finite loss {report.total} at iteration {start_iter + it}")
        grads, _ = net.backward(cache, g_logits, g_bbox)
        lr = sgd_cfg.lr_at(it)
        sgd_step(params, grads, state, sgd_cfg, it, frozen=frozen)
        rows.append(LossRow(start_iter + it, report.cls, report.loc, report.total, lr))
        if progress and (it + 1) % 500 == 0:
            progress(rows[-1])
    return state, rows


def reinit_bbox_head(net, rng, run):
    W = rng.normal(0.0, run.sgd_config().bbox_init_std, net.bbox.W.shape)
    net.bbox = FcLayer(W, np.zeros(4 * net.num_classes), name=net.bbox.name)


def train(run, images, store, progress=None):
    """Train a DetectionNet on ``images`` (features from ``store``) per ``run.mode``."""
    rng = np.random.default_rng([run.seed, 7])
    normalizer = fit_target_normalizer(images, run.sampler_config())
    first = store.get(images[0].image_id)
    net = DetectionNet.create(rng, run.sgd_config(), first.shape[0], run.num_classes,
                              (run.pooled_size, run.pooled_size), run.trunk_widths)
    lam = 0.0 if run.mode in ("cls-only", "stage-wise") else run.lam
    state, rows = _train_loop(net, images, store, normalizer, run, lam, run.iterations, 1,
                              progress=progress)
    result = TrainResult(net, normalizer, state, rows, run)
    if run.mode == "stage-wise":
        result = train_bbox_stage(result, images, store, progress=progress)
    return result


def train_bbox_stage(cls_result, images, store, run=None, progress=None):
    """Second stage of stage-wise training on a copy of a cls-only result.

    The box regressor is re-initialized (stddev 0.001) and trained with the
    trunk and classifier frozen.
    """
    run = run or cls_result.run
    net = copy.deepcopy(cls_result.net)
    reinit_bbox_head(net, np.random.default_rng([run.seed, 8]), run)
    frozen = set(net.params()) - set(net.head_names("bbox"))
    state, rows = _train_loop(net, images, store, cls_result.normalizer, run, run.lam,
                              run.stage2_iterations, 2, frozen=frozen,
                              start_iter=len(cls_result.log), progress=progress)
    return TrainResult(net, cls_result.normalizer, state, cls_result.log + rows,
                       replace(run, mode="stage-wise"))


def detect_dataset(net, normalizer, images, store, run, use_bbox_reg=True):
    """Detections for every image, in image order."""
    scale_cfg = ScaleConfig.from_mode(run.scale)
    out = []
    for im in images:
        factors = np.atleast_1d(select_scale(im.width, im.height, scale_cfg))
        fms = [store.get(im.image_id, f) for f in factors]
        out.append(detect_image(net, fms, im.proposals, (im.width, im.height),
                                store.stride(im.image_id), factors, normalizer,
                                run.nms_threshold, run.score_floor, use_bbox_reg))
    return out


def evaluate(net, normalizer, images, store, run, use_bbox_reg=True):
    dets = detect_dataset(net, normalizer, images, store, run, use_bbox_reg)
    gts = [(im.gt_boxes, im.gt_labels) for im in images]
    return evaluate_ap(dets, gts, net.num_classes)
