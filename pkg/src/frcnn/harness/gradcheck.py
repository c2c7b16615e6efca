"""Finite-difference checks of every hand-written backward pass.

Each check returns the worst elementwise relative error
``|analytic - numeric| / max(|analytic|, |numeric|, floor)`` over the
checked entries. Inputs are drawn away from kinks (smooth-L1 at |x| = 1,
ReLU at 0) and pooling inputs are tie-free, so central differences are
valid everywhere they are taken.
"""

from dataclasses import dataclass

import numpy as np

from ..losses import cls_loss, loc_loss, multitask_loss_batch, smooth_l1, smooth_l1_grad
from ..net import DetectionNet, FcLayer, SgdConfig, fc_backward, fc_forward
from ..roipool import roi_pool_backward, roi_pool_forward

THRESHOLDS = {
    "smooth_l1": 1e-6,
    "cls_loss": 1e-6,
    "loc_loss": 1e-6,
    "fc_layer": 1e-5,
    "roi_pool": 1e-4,
    "end_to_end": 1e-4,
}

REL_FLOOR = 1e-8


def rel_error(analytic, numeric, floor=REL_FLOOR):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numeric_grad(f, x, h):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def tie_free_map(rng, shape, spread=1.0):
    """Feature map whose entries are a shuffled evenly spaced grid (no ties)."""
    n = int(np.prod(shape))
    return rng.permutation(np.linspace(-spread, spread, n)).reshape(shape)


def check_smooth_l1(rng, n=500, h=1e-6):
    x = rng.uniform(-4, 4, n)
    x = x[np.abs(np.abs(x) - 1) > 1e-3]
    numeric = (smooth_l1(x + h) - smooth_l1(x - h)) / (2 * h)
    return rel_error(smooth_l1_grad(x), numeric)


def check_cls_loss(rng, trials=20, h=3e-4):
    worst = 0.0
    for _ in range(trials):
        logits = rng.normal(0, 2, 6)
        u = int(rng.integers(6))
        _, grad, _ = cls_loss(logits, u)
        num = numeric_grad(lambda: cls_loss(logits, u)[0], logits, h)
        worst = max(worst, rel_error(grad, num))
    return worst


def check_loc_loss(rng, trials=20, h=1e-6):
    worst = 0.0
    for _ in range(trials):
        v = rng.normal(0, 1, 4)
        d = rng.uniform(-3, 3, 4)
        d[np.abs(np.abs(d) - 1) < 1e-2] += 0.1
        t = v + d
        _, grad = loc_loss(t, v)
        num = numeric_grad(lambda: loc_loss(t, v)[0], t, h)
        worst = max(worst, rel_error(grad, num))
    return worst


def check_fc_layer(rng, h=1e-6):
    layer = FcLayer(rng.normal(0, 1, (8, 6)), rng.normal(0, 1, 8))
    x = rng.normal(0, 1, (3, 6))
    w = rng.normal(0, 1, (3, 8))

    def f():
        return float(np.sum(w * fc_forward(layer, x)))

    gx, gW, gb = fc_backward(layer, x, w)
    return max(rel_error(gx, numeric_grad(f, x, h)),
               rel_error(gW, numeric_grad(f, layer.W, h)),
               rel_error(gb, numeric_grad(f, layer.b, h)))


def check_roi_pool(rng, h=1e-3):
    fm = tie_free_map(rng, (3, 9, 11))
    rois = np.array([[0, 0, 9, 11], [2, 1, 5, 7], [1, 3, 3, 1], [4, 4, 5, 7]])
    res = roi_pool_forward(fm, rois, 3, 2)
    w = rng.normal(0, 1, res.output.shape)

    def f():
        return float(np.sum(w * roi_pool_forward(fm, rois, 3, 2).output))

    analytic = roi_pool_backward(w, res, fm.shape)
    return rel_error(analytic, numeric_grad(f, fm, h))


@dataclass
class TinyProblem:
    net: DetectionNet
    fms: list
    rects: np.ndarray
    image_index: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    lam: float


def tiny_problem(rng, lam=1.0):
    """A small two-image problem whose FD checks avoid every kink.

    Resamples until every ReLU pre-activation is at least 1e-3 from zero and
    every regression residual at least 1e-2 from the smooth-L1 knee.
    """
    K = 3
    cfg = SgdConfig(cls_init_std=0.3, bbox_init_std=0.3)
    while True:
        net = DetectionNet.create(rng, cfg, channels=2, num_classes=K, pooled_size=(2, 2),
                                  widths=(7, 5))
        for layer in net.layers:
            layer.b[:] = rng.normal(0, 0.1, layer.b.shape)
        fms = [tie_free_map(rng, (2, 6, 7)), tie_free_map(rng, (2, 5, 6))]
        rects = np.array([[0, 0, 6, 7], [1, 2, 3, 4], [2, 0, 4, 3],
                          [0, 0, 5, 6], [1, 1, 2, 5], [3, 2, 2, 2]])
        image_index = np.array([0, 0, 0, 1, 1, 1])
        labels = np.array([1, 0, 3, 2, 0, 1])
        targets = rng.normal(0, 1, (6, 4))
        out, cache = net.forward(fms, rects, image_index)
        if min(np.abs(p).min() for p in cache.pre) < 1e-3:
            continue
        fg = labels >= 1
        cols = 4 * (labels[fg] - 1)[:, None] + np.arange(4)
        resid = out.bbox[np.flatnonzero(fg)[:, None], cols] - targets[fg]
        if np.abs(np.abs(resid) - 1).min() < 1e-2:
            continue
        return TinyProblem(net, fms, rects, image_index, labels, targets, lam)


def check_end_to_end(rng, h=1e-5):
    """Multi-task loss gradients w.r.t. every parameter and both feature maps."""
    p = tiny_problem(rng)

    def loss():
        out, _ = p.net.forward(p.fms, p.rects, p.image_index)
        return multitask_loss_batch(out.logits, out.bbox, p.labels, p.targets, p.lam)[0].total

    out, cache = p.net.forward(p.fms, p.rects, p.image_index)
    _, g_logits, g_bbox = multitask_loss_batch(out.logits, out.bbox, p.labels, p.targets, p.lam)
    grads, fm_grads = p.net.backward(cache, g_logits, g_bbox, fm_grads=True)
    worst = 0.0
    for name, param in p.net.params().items():
        worst = max(worst, rel_error(grads[name], numeric_grad(loss, param, h)))
    for fm, g in zip(p.fms, fm_grads):
        worst = max(worst, rel_error(g, numeric_grad(loss, fm, h)))
    return worst


CHECKS = {
    "smooth_l1": check_smooth_l1,
    "cls_loss": check_cls_loss,
    "loc_loss": check_loc_loss,
    "fc_layer": check_fc_layer,
    "roi_pool": check_roi_pool,
    "end_to_end": check_end_to_end,
}


def run_all(seed=0):
    """Run every check; returns ``{name: (max_rel_error, threshold, passed)}``."""
    out = {}
    for name, fn in CHECKS.items():
        err = fn(np.random.default_rng([seed, len(out)]))
        out[name] = (err, THRESHOLDS[name], err < THRESHOLDS[name])
    return out
