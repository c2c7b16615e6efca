import filecmp
import os
import time

import numpy as np
import pytest

from frcnn.geometry import flip_boxes, iou_matrix
from frcnn.harness.synthetic import (
    FeatureStore, Scene, SyntheticConfig, class_signature, generate_dataset, generate_scenes,
    load_manifest, load_synthetic_config, render_features, resize_feature_map, scene_image,
)


def test_every_gt_has_a_good_proposal():
    cfg = SyntheticConfig()
    for sc in generate_scenes(60, cfg, seed=11):
        gt = sc.gt_boxes
        assert len(gt) >= cfg.min_objects
        assert np.all(iou_matrix(gt, np.asarray(sc.proposals)).max(axis=1) >= 0.5)
        assert sc.height == cfg.height and sc.width % cfg.stride == 0


def test_class_signatures_distinct():
    cfg = SyntheticConfig()
    sigs = np.stack([class_signature(k, cfg) for k in range(1, cfg.num_classes + 1)])
    assert np.linalg.matrix_rank(sigs) == cfg.num_classes


def test_generation_deterministic_byte_identical(tmp_path):
    cfg = SyntheticConfig()
    a = generate_dataset(tmp_path / "a", 5, 2, cfg, seed=4)
    b = generate_dataset(tmp_path / "b", 5, 2, cfg, seed=4)
    for pa, pb in zip(a, b):
        assert filecmp.cmp(pa, pb, shallow=False)
    names = sorted(os.listdir(tmp_path / "a" / "train"))
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / "train", tmp_path / "b" / "train",
                                               names, shallow=False)
    assert match == names and not mismatch and not errors


def test_hundred_images_under_ten_seconds(tmp_path):
    t0 = time.perf_counter()
    generate_dataset(tmp_path, 100, 0, SyntheticConfig(), seed=0)
    assert time.perf_counter() - t0 < 10


def test_manifest_round_trip(tmp_path):
    cfg = SyntheticConfig(num_classes=3, channels=6)
    train_path, _ = generate_dataset(tmp_path, 4, 2, cfg, seed=1)
    images = load_manifest(train_path)
    scenes = generate_scenes(4, cfg, [1, 0], "train")
    assert [im.image_id for im in images] == [s.image_id for s in scenes]
    np.testing.assert_array_equal(images[0].gt_boxes, scenes[0].gt_boxes)
    assert load_synthetic_config(train_path) == cfg
    store = FeatureStore(images, cfg=cfg)
    fm = store.get(images[0].image_id)
    np.testing.assert_allclose(fm, render_features(scenes[0], cfg), atol=1e-5)
    np.testing.assert_array_equal(store.get(images[0].image_id, flipped=True), fm[:, :, ::-1])


def test_manifest_requires_labels(tmp_path):
    (tmp_path / "g.txt").write_text("0 0 10 10\n")
    (tmp_path / "p.txt").write_text("0 0 10 10\n")
    (tmp_path / "m.tsv").write_text("a\t100\t100\tg.txt\tp.txt\n")
    with pytest.raises(ValueError):
        load_manifest(tmp_path / "m.tsv")


def test_scene_json_round_trip():
    sc = generate_scenes(1, SyntheticConfig(), seed=0)[0]
    assert Scene.from_json(sc.to_json()) == sc


def test_mirrored_scene_renders_flipped_map():
    """Feature flips agree with box flips (noise-free scene)."""
    cfg = SyntheticConfig(noise=0.0)
    sc = generate_scenes(1, cfg, seed=2)[0]
    W = sc.width

    def mirror(rows):
        out = []
        for r in rows:
            fb = flip_boxes(np.asarray(r[:4]), W)[0].tolist()
            out.append(fb + list(r[4:]))
        return out

    bumps = [[ch, W - cx, cy, s, a] for ch, cx, cy, s, a in sc.bumps]
    mirrored = Scene(sc.image_id, W, sc.height, mirror(sc.objects), mirror(sc.distractors), bumps,
                     sc.noise_seed, [])
    np.testing.assert_allclose(render_features(mirrored, cfg), render_features(sc, cfg)[:, :, ::-1],
                               atol=1e-12)


def test_store_rescales_for_pyramid():
    cfg = SyntheticConfig()
    sc = generate_scenes(1, cfg, seed=0)[0]
    store = FeatureStore([scene_image(sc, cfg)], [sc], cfg)
    fm = store.get(sc.image_id, 0.8)
    assert fm.shape == (cfg.channels, int(np.ceil(600 * 0.8 / 16)), int(np.ceil(sc.width * 0.8 / 16)))


def test_resize_feature_map_nearest():
    fm = np.arange(4.0).reshape(1, 2, 2)
    np.testing.assert_array_equal(resize_feature_map(fm, (4, 4))[0],
                                  [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]])


def test_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(num_classes=7, channels=8)
    with pytest.raises(ValueError):
        SyntheticConfig(min_width=650)
