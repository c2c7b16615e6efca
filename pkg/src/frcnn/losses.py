"""Multi-task detection loss: softmax log loss plus smooth-L1 box regression.

For one RoI with true class ``u`` the loss is
``cls + lam * [u >= 1] * loc`` where ``cls = -log p_u`` and ``loc`` sums
smooth-L1 over the four regression coordinates of class ``u`` only.
Background RoIs (``u = 0``) contribute no localization term.
"""

from dataclasses import dataclass

import numpy as np

# Floor on p_u inside the log; hitting it is reported via LossReport.clamped.
PROB_FLOOR = 1e-12


class LossConfigError(ValueError):
    pass


@dataclass
class LossReport:
    total: float
    cls: float
    loc: float
    lam: float
    clamped: bool = False


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loc_loss(t_u, v):
    """Smooth-L1 localization loss and its gradient w.r.t. ``t_u``."""
    d = np.asarray(t_u, dtype=np.float64) - np.asarray(v, dtype=np.float64)
    return float(smooth_l1(d).sum()), smooth_l1_grad(d)


def cls_loss(logits, u):
    """``-log p_u`` and the logit gradient ``p - onehot(u)``.

    Returns ``(loss, grad, clamped)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= u < logits.shape[-1]:
        raise IndexError(f"class {u} outside [0, {logits.shape[-1] - 1}]")
    p = softmax(logits)
    clamped = bool(p[u] < PROB_FLOOR)
    loss = -np.log(max(p[u], PROB_FLOOR))
    grad = p.copy()
    grad[u] -= 1.0
    return float(loss), grad, clamped


def multitask_loss(logits, t_all, u, v, lam=1.0, normalizer=None):
    """Loss and gradients for a single RoI.

    Args:
        logits: (K+1,) class scores.
        t_all: (K, 4) or (4K,) regression outputs; row ``k-1`` is class ``k``.
        u: true class, 0 for background.
        v: (4,) regression target, ignored when ``u == 0``. Already normalized
            unless ``normalizer`` is given, in which case it is applied here.
        lam: weight of the localization term.

    Returns:
        (LossReport, grad_logits, grad_t) with ``grad_t`` shaped like ``t_all``.
    """
    if lam < 0:
        raise LossConfigError(f"lambda must be non-negative, got {lam}")
    t_all = np.asarray(t_all, dtype=np.float64)
    t_rows = t_all.reshape(-1, 4)
    cls, g_logits, clamped = cls_loss(logits, u)
    g_t = np.zeros_like(t_rows)
    loc = 0.0
    if u >= 1:
        if normalizer is not None:
            v = normalizer.apply(v)
        loc, g_row = loc_loss(t_rows[u - 1], v)
        g_t[u - 1] = lam * g_row
    total = cls + lam * loc
    return LossReport(total, cls, loc, lam, clamped), g_logits, g_t.reshape(t_all.shape)


def multitask_loss_batch(logits, bbox, labels, targets, lam=1.0):
    """Mean multi-task loss over R RoIs, with gradients.

    Args:
        logits: (R, K+1) class scores.
        bbox: (R, 4K) regression outputs.
        labels: (R,) true classes.
        targets: (R, 4) normalized targets (rows of background RoIs unused).

    Both terms are averaged over all R RoIs. ``report.loc`` is the mean of
    ``[u >= 1] * L_loc`` so that ``total == cls + lam * loc``.
    """
    if lam < 0:
        raise LossConfigError(f"lambda must be non-negative, got {lam}")
    logits = np.asarray(logits, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    R, K1 = logits.shape
    if np.any(labels < 0) or np.any(labels >= K1):
        raise IndexError("label outside [0, K]")
    rows = np.arange(R)
    p = softmax(logits)
    pu = p[rows, labels]
    clamped = bool(np.any(pu < PROB_FLOOR))
    cls = float(-np.log(np.maximum(pu, PROB_FLOOR)).mean())
    g_logits = p
    g_logits[rows, labels] -= 1.0
    g_logits /= R

    g_bbox = np.zeros_like(bbox)
    fg = np.flatnonzero(labels >= 1)
    loc = 0.0
    if fg.size:
        cols = 4 * (labels[fg] - 1)[:, None] + np.arange(4)
        d = bbox[fg[:, None], cols] - np.asarray(targets, dtype=np.float64)[fg]
        loc = float(smooth_l1(d).sum() / R)
        g_bbox[fg[:, None], cols] = lam * smooth_l1_grad(d) / R
    total = cls + lam * loc
    return LossReport(total, cls, loc, lam, clamped), g_logits, g_bbox
