"""Acceptance criteria 1-9, each at its stated tolerance.

Every test prints one ``[criterion N] PASS|FAIL ...`` line (visible even
without ``-s``) before asserting. Run on its own with

    python3 -m pytest tests/test_acceptance.py -v
"""

import time

import numpy as np
import pytest

from frcnn.detect import ScaleConfig, assign_roi_scale, nms, select_scale
from frcnn.geometry import Box, decode, encode, flip_boxes, iou
from frcnn.harness.ablation import run_ablation
from frcnn.harness.gradcheck import run_all
from frcnn.harness.synthetic import SyntheticConfig, generate_scenes, scene_image
from frcnn.harness.train import RunConfig
from frcnn.kernels import available_backends
from frcnn.net import FcLayer
from frcnn.roipool import roi_pool_backward, roi_pool_forward
from frcnn.sampler import MinibatchSampler, SamplerConfig
from frcnn.svd import bench_throughput, compress, flop_count, reconstruction_error

from oracles import (
    brute_pool, brute_pool_backward, random_int_box, random_pool_case, raster_iou, reference_nms,
)


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def test_criterion_1_gradient_suite(verdict):
    t0 = time.perf_counter()
    results = run_all(seed=0)
    elapsed = time.perf_counter() - t0
    limits = {"smooth_l1": 1e-6, "cls_loss": 1e-6, "loc_loss": 1e-6, "fc_layer": 1e-5,
              "end_to_end": 1e-4}
    ok = all(results[k][0] < lim for k, lim in limits.items()) and elapsed < 60
    detail = ", ".join(f"{k} {results[k][0]:.1e}<{lim:.0e}" for k, lim in limits.items())
    assert verdict(1, ok, f"{detail}; {elapsed:.1f}s < 60s")


def test_criterion_2_roi_pooling_oracle(verdict):
    rng = np.random.default_rng(2)
    bad_fwd = bad_bwd = 0
    cases = [random_pool_case(rng, ties=n % 2 == 0) for n in range(500)]
    for backend in available_backends():
        for fm, rect, H, W in cases:
            res = roi_pool_forward(fm, [rect], H, W, backend=backend)
            out, arg = brute_pool(fm, rect, H, W)
            if not (np.array_equal(res.output[0], out) and np.array_equal(res.argmax[0], arg)):
                bad_fwd += 1
            g = rng.integers(-3, 4, res.output.shape).astype(float)
            got = roi_pool_backward(g, res, fm.shape, backend=backend)
            if not np.array_equal(got.ravel(), brute_pool_backward(fm.size, [arg], g)):
                bad_bwd += 1
    ok = bad_fwd == 0 and bad_bwd == 0
    assert verdict(2, ok, f"500 cases x {available_backends()}: forward mismatches {bad_fwd}, "
                          f"backward mismatches {bad_bwd} (exact)")


def test_criterion_3_nms_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for backend in available_backends():
        for _ in range(100):
            n = int(rng.integers(0, 501))
            xy = rng.uniform(0, 400, (n, 2))
            boxes = np.concatenate([xy, xy + rng.uniform(5, 150, (n, 2))], axis=1)
            scores = np.round(rng.uniform(size=n), 3)
            thr = float(rng.uniform(0.1, 0.9))
            if nms(boxes, scores, thr, backend=backend).tolist() != reference_nms(boxes, scores, thr):
                mismatches += 1
    assert verdict(3, mismatches == 0,
                   f"100 sets of <=500 detections x {available_backends()}: {mismatches} mismatches")


def test_criterion_4_iou_oracle(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(1000):
        a, b = random_int_box(rng, 40), random_int_box(rng, 40)
        worst = max(worst, abs(iou(a, b) - raster_iou(a, b)))
    assert verdict(4, worst <= 1e-9, f"1000 integer box pairs, max |iou - raster| = {worst:.1e} <= 1e-9")


def test_criterion_5_svd_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    u = v = 1024
    t, R = 64, 2000
    layer = FcLayer(rng.normal(0, 1 / np.sqrt(v), (u, v)), rng.normal(0, 0.1, u))
    comp = compress(layer, t)
    ref = np.linalg.svd(layer.W, compute_uv=False)
    resid = layer.W - comp.weight()
    ey_spec = abs(np.linalg.norm(resid, 2) - ref[t]) / ref[0]
    ey_frob = abs(np.linalg.norm(resid) - np.sqrt(np.sum(ref[t:] ** 2))) / np.linalg.norm(layer.W)
    tail = np.abs(comp.singular_values[t:] - ref[t:]).max() / ref[0]
    ey = max(ey_spec, ey_frob, tail)
    exact = reconstruction_error(layer, compress(layer, min(u, v)))
    params_ok = comp.param_count() == t * (u + v) + u
    ratio = flop_count(comp, R) / flop_count(layer, R)
    x = rng.normal(size=(R, v))
    speedup = bench_throughput(layer, x).median_s / bench_throughput(comp, x).median_s
    elapsed = time.perf_counter() - t0
    ok = exact <= 1e-6 and ey <= 1e-8 and params_ok and ratio == 0.125 and speedup >= 1.5 and elapsed < 180
    assert verdict(5, ok, f"full-rank rel err {exact:.1e} <= 1e-6; Eckart-Young {ey:.1e} <= 1e-8; "
                          f"params {comp.param_count()} == t(u+v)+u; FLOP ratio {ratio}; "
                          f"speedup {speedup:.2f}x >= 1.5x; {elapsed:.0f}s < 180s")


def _batch_ok(batch, by_id, cfg):
    if len(batch) != 128 or len(set(batch.image_ids)) != 2:
        return False
    for slot, image_id in enumerate(batch.image_ids):
        rows = np.flatnonzero(batch.image_index == slot)
        im = by_id[image_id]
        gts = flip_boxes(im.gt_boxes, im.width) if batch.flipped[rows[0]] else im.gt_boxes
        ious = np.array([max(iou(r, g) for g in gts) for r in batch.rois[rows]])
        fg = batch.labels[rows] >= 1
        bg_lo = 0.0 if image_id in batch.widened else 0.1
        if (len(rows) != 64 or fg.sum() > 16 or not np.all(ious[fg] >= 0.5)
                or not np.all((ious[~fg] >= bg_lo) & (ious[~fg] < 0.5))
                or not np.allclose(ious, batch.max_iou[rows], atol=1e-12)):
            return False
    return True


def test_criterion_6_sampler_suite(verdict):
    synth = SyntheticConfig()
    images = [scene_image(s, synth) for s in generate_scenes(200, synth, [0, 0], "train")]
    by_id = {im.image_id: im for im in images}
    cfg = SamplerConfig(seed=6)
    a, b = MinibatchSampler(images, cfg), MinibatchSampler(images, cfg)
    bad = same = 0
    for _ in range(1000):
        ba, bb = a.next_batch(), b.next_batch()
        bad += not _batch_ok(ba, by_id, cfg)
        same += ba.to_bytes() == bb.to_bytes()
    ok = bad == 0 and same == 1000
    assert verdict(6, ok, f"1000 minibatches: {bad} invariant violations; "
                          f"{same}/1000 byte-identical under a fixed seed")


@pytest.mark.slow
def test_criterion_7_table6_direction(verdict):
    t0 = time.perf_counter()
    report = run_ablation(RunConfig(), seeds=[0, 1, 2])
    elapsed = time.perf_counter() - t0
    cls_only, mt_nobbox, stage, mt = report.means()
    ok = (not report.failures and mt >= cls_only and mt >= stage and mt >= mt_nobbox
          and elapsed < 15 * 60)
    with_table = report.to_tsv().strip().replace("\n", " | ")
    assert verdict(7, ok, f"mean mAP multitask {100 * mt:.2f} >= cls-only {100 * cls_only:.2f}, "
                          f">= stage-wise {100 * stage:.2f}, >= no-bbox {100 * mt_nobbox:.2f}; "
                          f"{elapsed:.0f}s < 900s [{with_table}]")


def test_criterion_8_scale_rules(verdict):
    single = select_scale(473, 384)
    factors = select_scale(500, 375, ScaleConfig.pyramid())
    mismatches = 0
    for side in range(8, 1200, 3):
        for aspect in (0.5, 1.0, 2.0):
            box = Box(0.0, 0.0, side, side * aspect)
            want = int(np.argmin([abs(side * side * aspect * f * f - 224.0 ** 2) for f in factors]))
            mismatches += assign_roi_scale(box, factors) != want
    ok = single == 1.5625 and mismatches == 0
    assert verdict(8, ok, f"select_scale(384x473) = {single} (want 1.5625); "
                          f"pyramid assignment mismatches {mismatches} (exact)")


def test_criterion_9_round_trip_and_flip(verdict):
    rng = np.random.default_rng(9)
    W = 800.0

    def boxes(n):
        xy = rng.uniform(0, 500, (n, 2))
        return np.concatenate([xy, xy + rng.uniform(8, 250, (n, 2))], axis=1)

    p, g = boxes(1000), boxes(1000)
    rt = np.abs(decode(p, encode(p, g)) - g).max()
    # pixel coordinates on a 1/16 sub-pixel grid
    pq = np.round(p * 16) / 16
    involution = np.array_equal(flip_boxes(flip_boxes(pq, W), W), pq)
    t = encode(p, g)
    tf = encode(flip_boxes(p, W), flip_boxes(g, W))
    tx = np.abs(tf[:, 0] + t[:, 0]).max()
    rest = np.abs(tf[:, 1:] - t[:, 1:]).max()
    ok = rt < 1e-9 and involution and tx < 1e-9 and rest < 1e-9
    assert verdict(9, ok, f"1000 cases each: round trip {rt:.1e} < 1e-9; flip involution exact "
                          f"{involution}; tx negation {tx:.1e} < 1e-9 (ty,tw,th kept {rest:.1e})")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
