"""Truncated-SVD compression of fully connected layers.

A ``u x v`` layer ``W`` is replaced by two stacked affine layers with no
nonlinearity in between: the first has weights ``Sigma_t V^T`` (t x v, no
bias), the second ``U`` (u x t) with the original bias. Parameters drop from
``uv`` to ``t(u + v)``.
"""

from dataclasses import dataclass
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .net import FcLayer, fc_forward

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 60


class SvdConvergenceError(RuntimeError):
    pass


def svd(a, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS, backend=None):
    """Thin SVD ``a = U diag(s) Vt`` by one-sided Jacobi rotations.

    Singular values come back in descending order. Each column of ``U`` is
    signed so its largest-magnitude entry is positive.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    m, n = a.shape
    if n > m:
        u, s, vt = svd(a.T, tol, max_sweeps, backend)
        return _fix_signs(vt.T, s, u.T)
    k = kernels.get_backend(backend)
    g, v, _sweeps, off = k.jacobi_svd(np.array(a.T, order="C"), tol, max_sweeps)
    if off > tol:
        raise SvdConvergenceError(f"Jacobi SVD did not converge in {max_sweeps} sweeps (off={off:.3g})")
    s = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    g = g[order]
    v = v[order]
    u = np.zeros_like(g)
    nz = s > 0
    u[nz] = g[nz] / s[nz, None]
    return _fix_signs(u.T, s, v)


def _fix_signs(u, s, vt):
    idx = np.abs(u).argmax(axis=0)
    sign = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * sign, s, vt * sign[:, None]


@dataclass
class CompressedFcLayer:
    first: FcLayer  # Sigma_t V^T, t x v, no bias
    second: FcLayer  # U, u x t, original bias
    singular_values: np.ndarray  # full spectrum of the original W

    @property
    def rank(self):
        return self.first.W.shape[0]

    def param_count(self):
        return self.first.param_count() + self.second.param_count()

    def forward(self, x):
        return fc_forward(self.second, fc_forward(self.first, x))

    def weight(self):
        return self.second.W @ self.first.W


def compress(layer, t, method="jacobi"):
    """Split ``layer`` into a rank-``t`` pair of layers.

    ``method`` is "jacobi" (in-package SVD) or "lapack" (numpy.linalg.svd).
    The second layer keeps the original layer's ``relu`` flag.
    """
    u, v = layer.W.shape
    if not 1 <= t <= min(u, v):
        raise ValueError(f"rank t={t} outside [1, {min(u, v)}] for a {u}x{v} layer")
    if method == "jacobi":
        U, s, Vt = svd(layer.W)
    elif method == "lapack":
        U, s, Vt = _fix_signs(*np.linalg.svd(layer.W, full_matrices=False))
    else:
        raise ValueError(f"unknown SVD method {method!r}")
    first = FcLayer(s[:t, None] * Vt[:t], None, name=f"{layer.name}_L", relu=False)
    second = FcLayer(U[:, :t].copy(), None if layer.b is None else layer.b.copy(),
                     name=f"{layer.name}_U", relu=layer.relu)
    return CompressedFcLayer(first, second, s)


def reconstruction_error(layer, compressed):
    """Relative Frobenius error ``||W - U Sigma_t V^T|| / ||W||`` (0 for W = 0)."""
    W = layer.W
    approx = compressed.weight()
    if approx.shape != W.shape:
        raise ValueError(f"shape mismatch {approx.shape} vs {W.shape}")
    norm = np.linalg.norm(W)
    if norm == 0:
        return 0.0
    return float(np.linalg.norm(W - approx) / norm)


def flop_count(layer_or_compressed, rois):
    """Multiply-add FLOPs for a forward over ``rois`` vectors (2 per MAC)."""
    if isinstance(layer_or_compressed, CompressedFcLayer):
        t = layer_or_compressed.rank
        u, v = layer_or_compressed.second.W.shape[0], layer_or_compressed.first.W.shape[1]
        return 2 * t * (u + v) * rois
    u, v = layer_or_compressed.W.shape
    return 2 * u * v * rois


@dataclass
class BenchReport:
    median_s: float
    times: list
    flops: int
    rois: int


def bench_throughput(layer_or_compressed, x, repeats=15, warmup=3, threads=1):
    """Median wall time of a forward pass over the batch ``x`` (R x v).

    BLAS is pinned to ``threads`` threads while timing.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("x must be an (R, v) batch with R >= 1")
    if isinstance(layer_or_compressed, CompressedFcLayer):
        fn = layer_or_compressed.forward
    else:
        fn = lambda batch: fc_forward(layer_or_compressed, batch)  # noqa: E731
    times = []
    with threadpool_limits(limits=threads):
        for _ in range(warmup):
            fn(x)
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn(x)
            times.append(time.perf_counter() - t0)
    return BenchReport(statistics.median(times), times, flop_count(layer_or_compressed, x.shape[0]),
                       x.shape[0])


def compress_network_layer(net, name, t, method="jacobi"):
    """Replace trunk layer ``name`` of a DetectionNet by its compressed pair."""
    for i, layer in enumerate(net.trunk):
        if layer.name == name:
            comp = compress(layer, t, method)
            net.trunk[i:i + 1] = [comp.first, comp.second]
            return comp
    names = [layer.name for layer in net.trunk]
    raise KeyError(f"no trunk layer named {name!r} (have {names})")
