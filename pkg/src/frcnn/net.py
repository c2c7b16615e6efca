"""Dense network substrate for the detection head.

RoI-pooled features feed a stack of fully connected trunk layers (ReLU
between them), which branch into two sibling outputs: K+1 class logits and
4K per-class box regression values. Everything is numpy with hand-written
backward passes.
"""

from dataclasses import dataclass, field
import json
import os

import numpy as np

from . import roipool
from .geometry import TargetNormalizer


@dataclass
class FcLayer:
    """Affine layer ``y = W x + b`` with ``W`` of shape (out, in)."""

    W: np.ndarray
    b: np.ndarray = None
    name: str = "fc"
    relu: bool = False

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise ValueError(f"{self.name}: weight must be 2-D, got {self.W.shape}")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=np.float64)
            if self.b.shape != (self.W.shape[0],):
                raise ValueError(f"{self.name}: bias shape {self.b.shape} vs weight {self.W.shape}")

    @property
    def shape(self):
        return self.W.shape

    @property
    def has_bias(self):
        return self.b is not None

    def param_count(self):
        return self.W.size + (self.b.size if self.b is not None else 0)


def fc_forward(layer, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.W.shape[1]:
        raise ValueError(f"{layer.name}: input dim {x.shape[-1]} != {layer.W.shape[1]}")
    y = x @ layer.W.T
    if layer.b is not None:
        y = y + layer.b
    return y


def fc_backward(layer, x, grad_y):
    """Return ``(grad_x, grad_W, grad_b)``; parameter grads sum over the batch."""
    x = np.asarray(x, dtype=np.float64)
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape[-1] != layer.W.shape[0] or x.shape[-1] != layer.W.shape[1]:
        raise ValueError(f"{layer.name}: shape mismatch in backward")
    x2 = x.reshape(-1, x.shape[-1])
    g2 = grad_y.reshape(-1, grad_y.shape[-1])
    grad_x = (g2 @ layer.W).reshape(x.shape)
    grad_W = g2.T @ x2
    grad_b = g2.sum(axis=0) if layer.b is not None else None
    return grad_x, grad_W, grad_b


@dataclass
class HeadOutputs:
    logits: np.ndarray  # (R, K+1)
    bbox: np.ndarray  # (R, 4K)


@dataclass
class SgdConfig:
    base_lr: float = 0.001
    drop_lr: float = 0.0001
    step_iter: int = 3000
    momentum: float = 0.9
    weight_decay: float = 0.0005
    weight_lr_mult: float = 1.0
    bias_lr_mult: float = 2.0
    cls_init_std: float = 0.01
    bbox_init_std: float = 0.001

    def __post_init__(self):
        vals = (self.base_lr, self.drop_lr, self.step_iter, self.momentum, self.weight_decay,
                self.weight_lr_mult, self.bias_lr_mult, self.cls_init_std, self.bbox_init_std)
        if any(v < 0 for v in vals):
            raise ValueError("SGD settings must be non-negative")
        if self.drop_lr > self.base_lr:
            raise ValueError("learning-rate schedule must be non-increasing")

    def lr_at(self, iteration):
        return self.base_lr if iteration < self.step_iter else self.drop_lr


@dataclass
class SgdState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def _lr_mult(name, cfg):
    return cfg.bias_lr_mult if name.endswith(".b") else cfg.weight_lr_mult


def sgd_step(params, grads, state, cfg, iteration=None, frozen=()):
    """One momentum SGD update, in place.

    ``velocity = momentum * velocity - lr_eff * (grad + decay * param)`` and
    ``param += velocity``; decay applies to weights and biases alike and
    ``lr_eff`` includes the per-parameter multiplier (x2 for biases). Names
    in ``frozen`` are left untouched. Non-finite gradients raise before any
    parameter changes.
    """
    it = state.iteration if iteration is None else iteration
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name} at iteration {it}")
    lr = cfg.lr_at(it)
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = cfg.momentum * v - lr * _lr_mult(name, cfg) * (g + cfg.weight_decay * p)
        state.velocity[name] = v
        p += v
    state.iteration = it + 1
    return params


def init_heads(rng, cfg, in_dim, num_classes):
    """Gaussian-initialized sibling heads; biases start at zero."""
    cls = FcLayer(rng.normal(0.0, cfg.cls_init_std, (num_classes + 1, in_dim)),
                  np.zeros(num_classes + 1), name="cls_score")
    bbox = FcLayer(rng.normal(0.0, cfg.bbox_init_std, (4 * num_classes, in_dim)),
                   np.zeros(4 * num_classes), name="bbox_pred")
    return cls, bbox


def init_trunk(rng, in_dim, widths):
    layers = []
    for i, width in enumerate(widths):
        # He-normal for ReLU layers trained from scratch
        W = rng.normal(0.0, np.sqrt(2.0 / in_dim), (width, in_dim))
        layers.append(FcLayer(W, np.zeros(width), name=f"fc{6 + i}", relu=True))
        in_dim = width
    return layers


@dataclass
class ForwardCache:
    pools: list  # (image slot, row indices, PoolResult)
    fm_shapes: list
    acts: list  # inputs to each trunk layer, then the trunk output
    pre: list  # pre-activation outputs of each trunk layer
    n: int


class DetectionNet:
    """RoI pooling, FC trunk and the two sibling heads."""

    def __init__(self, pooled_size, channels, num_classes, trunk, cls, bbox):
        self.pooled_h, self.pooled_w = pooled_size
        self.channels = channels
        self.num_classes = num_classes
        self.trunk = list(trunk)
        self.cls = cls
        self.bbox = bbox
        d = self.trunk[-1].W.shape[0] if self.trunk else self.in_dim
        if cls.W.shape != (num_classes + 1, d) or bbox.W.shape != (4 * num_classes, d):
            raise ValueError("head shapes do not match the trunk output")

    @classmethod
    def create(cls, rng, sgd_cfg, channels, num_classes, pooled_size=(7, 7), widths=(256, 256)):
        in_dim = channels * pooled_size[0] * pooled_size[1]
        trunk = init_trunk(rng, in_dim, widths)
        d = widths[-1] if widths else in_dim
        cls_layer, bbox_layer = init_heads(rng, sgd_cfg, d, num_classes)
        return cls(pooled_size, channels, num_classes, trunk, cls_layer, bbox_layer)

    @property
    def in_dim(self):
        return self.channels * self.pooled_h * self.pooled_w

    @property
    def layers(self):
        return self.trunk + [self.cls, self.bbox]

    def params(self):
        out = {}
        for layer in self.layers:
            out[f"{layer.name}.W"] = layer.W
            if layer.b is not None:
                out[f"{layer.name}.b"] = layer.b
        return out

    def head_names(self, which):
        layer = self.cls if which == "cls" else self.bbox
        names = [f"{layer.name}.W"]
        if layer.b is not None:
            names.append(f"{layer.name}.b")
        return names

    def pool(self, fms, rects, image_index):
        """RoI-pool every rect from its image's feature map; returns (R, D) and pools."""
        rects = np.asarray(rects, dtype=np.int64).reshape(-1, 4)
        image_index = np.asarray(image_index, dtype=np.int64).reshape(-1)
        x = np.empty((len(rects), self.in_dim))
        pools = []
        for slot in np.unique(image_index):
            rows = np.flatnonzero(image_index == slot)
            res = roipool.roi_pool_forward(fms[slot], rects[rows], self.pooled_h, self.pooled_w)
            x[rows] = res.output.reshape(len(rows), -1)
            pools.append((int(slot), rows, res))
        return x, pools

    def forward_features(self, x):
        acts, pre = [x], []
        h = x
        for layer in self.trunk:
            z = fc_forward(layer, h)
            pre.append(z)
            h = np.maximum(z, 0.0) if layer.relu else z
            acts.append(h)
        return HeadOutputs(fc_forward(self.cls, h), fc_forward(self.bbox, h)), acts, pre

    def forward(self, fms, rects, image_index):
        fms = [np.asarray(f, dtype=np.float64) for f in fms]
        x, pools = self.pool(fms, rects, image_index)
        out, acts, pre = self.forward_features(x)
        return out, ForwardCache(pools, [f.shape for f in fms], acts, pre, len(x))

    def backward(self, cache, grad_logits, grad_bbox, fm_grads=False):
        """Gradients of every parameter (and optionally each feature map).

        The trunk output receives the sum of both heads' input gradients.
        """
        grads = {}
        h = cache.acts[-1]
        gx_c, grads[f"{self.cls.name}.W"], gb = fc_backward(self.cls, h, grad_logits)
        if gb is not None:
            grads[f"{self.cls.name}.b"] = gb
        gx_b, grads[f"{self.bbox.name}.W"], gb = fc_backward(self.bbox, h, grad_bbox)
        if gb is not None:
            grads[f"{self.bbox.name}.b"] = gb
        g = gx_c + gx_b
        for i in range(len(self.trunk) - 1, -1, -1):
            layer = self.trunk[i]
            if layer.relu:
                g = g * (cache.pre[i] > 0)
            g, grads[f"{layer.name}.W"], gb = fc_backward(layer, cache.acts[i], g)
            if gb is not None:
                grads[f"{layer.name}.b"] = gb
        if not fm_grads:
            return grads, None
        out = [np.zeros(s) for s in cache.fm_shapes]
        for slot, rows, res in cache.pools:
            out[slot] += roipool.roi_pool_backward(
                g[rows].reshape(res.output.shape), res, cache.fm_shapes[slot])
        return grads, out


CHECKPOINT_FORMAT = "frcnn-checkpoint-1"


def save_checkpoint(directory, net, normalizer=None, opt_state=None, meta=None):
    """Write tensors (one file per parameter) plus ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)

    def put(name, arr):
        fname = f"{name}.bin"
        roipool.write_tensor(os.path.join(directory, fname), arr)
        return fname

    layers = []
    for role, group in (("trunk", net.trunk), ("cls", [net.cls]), ("bbox", [net.bbox])):
        for layer in group:
            entry = {"name": layer.name, "role": role, "relu": layer.relu,
                     "shape": list(layer.W.shape), "weight": put(f"{layer.name}.W", layer.W),
                     "bias": put(f"{layer.name}.b", layer.b) if layer.b is not None else None}
            layers.append(entry)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "pooled_size": [net.pooled_h, net.pooled_w],
        "channels": net.channels,
        "num_classes": net.num_classes,
        "layers": layers,
        "meta": meta or {},
    }
    if normalizer is not None:
        manifest["normalizer"] = {"mean": put("normalizer.mean", normalizer.mean),
                                  "std": put("normalizer.std", normalizer.std)}
    if opt_state is not None:
        manifest["optimizer"] = {
            "iteration": opt_state.iteration,
            "velocity": {k: put(f"velocity.{k}", v) for k, v in opt_state.velocity.items()},
        }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(directory):
    """Inverse of :func:`save_checkpoint`; returns (net, normalizer, opt_state, meta)."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{directory}: not a {CHECKPOINT_FORMAT} checkpoint")

    def get(fname):
        return roipool.read_tensor(os.path.join(directory, fname))

    trunk, heads = [], {}
    for entry in manifest["layers"]:
        W = get(entry["weight"])
        if list(W.shape) != entry["shape"]:
            raise ValueError(f"{entry['name']}: tensor shape {W.shape} != manifest {entry['shape']}")
        b = get(entry["bias"]) if entry.get("bias") else None
        layer = FcLayer(W, b, name=entry["name"], relu=entry["relu"])
        if entry["role"] == "trunk":
            trunk.append(layer)
        else:
            heads[entry["role"]] = layer
    net = DetectionNet(tuple(manifest["pooled_size"]), manifest["channels"],
                       manifest["num_classes"], trunk, heads["cls"], heads["bbox"])
    normalizer = None
    if "normalizer" in manifest:
        normalizer = TargetNormalizer(get(manifest["normalizer"]["mean"]),
                                      get(manifest["normalizer"]["std"]))
    state = None
    if "optimizer" in manifest:
        opt = manifest["optimizer"]
        state = SgdState({k: get(v) for k, v in opt["velocity"].items()}, opt["iteration"])
    return net, normalizer, state, manifest.get("meta", {})
