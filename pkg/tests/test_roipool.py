import numpy as np
import pytest

from frcnn.roipool import (
    RoiBoundsError, RoiRect, check_rects, map_boxes_to_rects, map_image_roi_to_feature,
    read_tensor, roi_pool_backward, roi_pool_forward, write_tensor,
)

from oracles import brute_pool, brute_pool_backward, random_pool_case


def test_forward_matches_brute_force(backend, rng):
    for n in range(300):
        fm, rect, H, W = random_pool_case(rng, ties=n % 2 == 0)
        res = roi_pool_forward(fm, [rect], H, W, backend=backend)
        out, arg = brute_pool(fm, rect, H, W)
        np.testing.assert_array_equal(res.output[0], out)
        np.testing.assert_array_equal(res.argmax[0], arg)


def test_backward_matches_counting(backend, rng):
    for _ in range(200):
        fm, rect, H, W = random_pool_case(rng, ties=True)
        res = roi_pool_forward(fm, [rect, rect], H, W, backend=backend)
        g = rng.integers(-3, 4, res.output.shape).astype(float)
        got = roi_pool_backward(g, res, fm.shape, backend=backend)
        _, arg = brute_pool(fm, rect, H, W)
        want = brute_pool_backward(fm.size, [arg, arg], g)
        np.testing.assert_array_equal(got.ravel(), want)


def test_backends_agree(rng):
    from frcnn.kernels import available_backends

    if len(available_backends()) < 2:
        pytest.skip("compiled backend not built")
    fm = rng.normal(size=(8, 20, 30))
    rects = np.array([[0, 0, 20, 30], [3, 4, 5, 9], [10, 2, 1, 1], [5, 5, 15, 25]])
    a = roi_pool_forward(fm, rects, 7, 7, backend="cython")
    b = roi_pool_forward(fm, rects, 7, 7, backend="python")
    np.testing.assert_array_equal(a.output, b.output)
    np.testing.assert_array_equal(a.argmax, b.argmax)


def test_matches_adaptive_max_pool(rng):
    """Whole-map RoI pooling equals one SPP level (torch reference)."""
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    for _ in range(50):
        C, Hf, Wf = 3, int(rng.integers(1, 15)), int(rng.integers(1, 15))
        fm = rng.permutation(np.arange(C * Hf * Wf, dtype=float)).reshape(C, Hf, Wf)
        H, W = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        ours = roi_pool_forward(fm, [(0, 0, Hf, Wf)], H, W).output[0]
        ref = F.adaptive_max_pool2d(torch.from_numpy(fm)[None], (H, W))[0].numpy()
        np.testing.assert_array_equal(ours, ref)


def test_tie_goes_to_first_in_row_major():
    fm = np.ones((1, 2, 2))
    res = roi_pool_forward(fm, [(0, 0, 2, 2)], 1, 1)
    assert res.argmax[0, 0, 0, 0] == 0


def test_small_roi_upsamples_without_empty_bins():
    fm = np.arange(4.0).reshape(1, 2, 2)
    res = roi_pool_forward(fm, [(0, 0, 2, 2)], 7, 7)
    assert np.all(np.isfinite(res.output))
    # a 1x1 RoI replicates its single cell
    one = roi_pool_forward(fm, [RoiRect(1, 1, 1, 1)], 3, 3)
    np.testing.assert_array_equal(one.output, np.full((1, 1, 3, 3), 3.0))


def test_out_of_bounds_rejected():
    fm = np.zeros((1, 5, 5))
    for bad in [(0, 0, 6, 1), (-1, 0, 1, 1), (4, 4, 2, 1), (0, 0, 0, 3)]:
        with pytest.raises(RoiBoundsError):
            roi_pool_forward(fm, [bad], 2, 2)
    check_rects(np.array([[0, 0, 5, 5]]), fm.shape)


def test_backward_accepts_batches_from_several_calls(rng):
    fm = rng.normal(size=(2, 6, 6))
    r1 = roi_pool_forward(fm, [(0, 0, 6, 6)], 2, 2)
    r2 = roi_pool_forward(fm, [(1, 1, 3, 3)], 2, 2)
    g1, g2 = np.ones(r1.output.shape), np.ones(r2.output.shape)
    total = roi_pool_backward([g1, g2], [r1, r2], fm.shape)
    np.testing.assert_array_equal(total, roi_pool_backward(g1, r1, fm.shape)
                                  + roi_pool_backward(g2, r2, fm.shape))


def test_map_roi_covers_box():
    rect = map_image_roi_to_feature([17, 33, 70, 64], 16, (40, 50))
    assert rect.as_tuple() == (2, 1, 2, 4)
    assert not rect.clamped


def test_map_roi_clamps_and_flags():
    edge = map_image_roi_to_feature([600, 300, 900, 400], 16, (30, 40))
    assert edge.as_tuple() == (18, 37, 7, 3) and not edge.clamped
    gone = map_image_roi_to_feature([1000, 900, 1100, 950], 16, (30, 40))
    assert gone.as_tuple() == (29, 39, 1, 1) and gone.clamped


def test_map_boxes_vectorized_matches_scalar(rng):
    boxes = np.concatenate([rng.uniform(-50, 700, (200, 2)), rng.uniform(0, 300, (200, 2))], axis=1)
    boxes[:, 2:] += boxes[:, :2]
    got = map_boxes_to_rects(boxes, 16, (38, 50))
    want = [map_image_roi_to_feature(b, 16, (38, 50)).as_tuple() for b in boxes]
    np.testing.assert_array_equal(got, want)


def test_tensor_file_round_trip(tmp_path, rng):
    a = rng.normal(size=(3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.bin"
    write_tensor(path, a)
    raw = path.read_bytes()
    assert raw[:4] == (3).to_bytes(4, "little")
    assert raw[4:16] == b"".join(d.to_bytes(4, "little") for d in (3, 4, 5))
    np.testing.assert_array_equal(read_tensor(path), a)
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        read_tensor(path)
