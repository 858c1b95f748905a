import json
import math

import numpy as np
import pytest

from bowlrp.lrp import read_raster
from bowlrp.synthetic import (SceneConfig, Scene, Shape, build_dataset, export_dataset, gaussian_kernel,
                              generate_scene, generate_split, ground_truth_map, molecular_score, render, scene_rng)

NO_NOISE = {"square": 0.0, "circle": 0.0, "ellipse": 0.0, "global": 0.0}


def test_scene_determinism():
    a = generate_scene(SceneConfig(), scene_rng(5, "train", 3), 3)
    b = generate_scene(SceneConfig(), scene_rng(5, "train", 3), 3)
    c = generate_scene(SceneConfig(), scene_rng(5, "test", 3), 3)
    assert np.array_equal(a.pixels, b.pixels) and a.shapes == b.shapes
    assert not np.array_equal(a.pixels, c.pixels)


def test_shape_count_and_mixture_statistics():
    cfg = SceneConfig()
    scenes = [generate_scene(cfg, scene_rng(0, "stat", i), i, draw=False) for i in range(3000)]
    counts = np.array([len(s.shapes) for s in scenes])
    assert 14.8 <= counts.mean() <= 15.2
    free = np.mean([not s.has_circles for s in scenes])
    assert abs(free - 1 / 3) < 0.03
    assert all(s.counts()["circle"] == 0 for s in scenes if not s.has_circles)
    assert all(s.counts()["circle"] >= 1 for s in scenes if s.has_circles)
    others = sum(s.counts()["ellipse"] for s in scenes) / sum(s.counts()["ellipse"] + s.counts()["square"] for s in scenes)
    assert abs(others - 0.5) < 0.02


def test_shapes_inside_image():
    for s in generate_split(50, 1, "train"):
        for sh in s.shapes:
            e = sh.extent
            assert e <= sh.cx <= 299 - e and e <= sh.cy <= 299 - e


def test_score_hand_example():
    shapes = [Shape("ellipse", 50, 50, (10, 15), 0.3), Shape("ellipse", 150, 50, (10, 15)),
              Shape("circle", 100, 150, (10,)), Shape("square", 200, 200, (20,))]
    sc = Scene(shapes, np.zeros((300, 300), np.uint8), dict(NO_NOISE, square=0.05, **{"global": 0.02}))
    assert molecular_score(sc, noise=False) == pytest.approx(1.5)
    assert molecular_score(sc) == pytest.approx(1.57)


def test_score_noise_bound():
    scenes = generate_split(200, 2, "x")
    for s in scenes:
        extra = molecular_score(s) - molecular_score(s, noise=False)
        assert 0 <= extra <= 0.4
    empty = Scene([], np.zeros((300, 300), np.uint8), {"square": 0.1, "circle": 0.1, "ellipse": 0.1, "global": 0.1})
    assert molecular_score(empty) == pytest.approx(0.4)


def test_ground_truth_max_rule_and_area():
    circle = Shape("circle", 100, 100, (10.0,))
    ellipse = Shape("ellipse", 108, 100, (10.0, 15.0), 0.0)
    sc = Scene([circle, ellipse, Shape("square", 200, 200, (20,))], np.zeros((300, 300), np.uint8), NO_NOISE)
    m = ground_truth_map(sc)
    assert m[100, 108] == 1.0  # overlap takes the larger weight
    assert m[100, 91] == 0.5
    assert m[200, 200] == 0.0
    alone = ground_truth_map(Scene([circle], sc.pixels, NO_NOISE))
    assert abs((alone == 0.5).sum() - math.pi * 100) < 0.05 * math.pi * 100


def test_render_levels():
    cfg = SceneConfig(blur_sigma=0.0, pixel_noise=0.0)
    px = render([Shape("square", 50, 50, (20,))], cfg, np.random.default_rng(0))
    assert px[50, 50] == 128 and px[5, 5] == 255 and px[40, 50] == 0
    k = gaussian_kernel(5, 1.0)
    assert k.sum() == pytest.approx(1.0) and k[2, 2] == k.max()


def test_noise_amplitude():
    cfg = SceneConfig(blur_sigma=0.0)
    px = render([], cfg, np.random.default_rng(0)).astype(int)
    assert px.min() >= 254


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(count_std=-1)
    with pytest.raises(ValueError):
        SceneConfig(blur_size=4)


def test_dataset_nesting_and_labels():
    small = build_dataset(10, 4, seed=3)
    big = build_dataset(20, 4, seed=3)
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(small.train, big.train[:10]))
    assert (big.train_labels == 1).sum() == 10
    gt = np.array([molecular_score(s, noise=False) for s in big.test])
    assert np.array_equal(big.test_gt_labels, np.where(gt > np.median(gt), 1, -1))


def test_export(tmp_path):
    data = build_dataset(3, 2, seed=0)
    export_dataset(data, tmp_path)
    lines = (tmp_path / "train" / "labels.csv").read_text().splitlines()
    assert lines[0] == "id,value,label" and len(lines) == 4
    assert (tmp_path / "test" / "labels.csv").read_text().startswith("id,value,label,gt_label\n")
    meta = json.loads((tmp_path / "train" / "train-00000.json").read_text())
    assert meta["score"] == pytest.approx(data.train_scores[0])
    assert sum(meta["counts"].values()) == len(data.train[0].shapes)
    mask = read_raster(tmp_path / "test" / "masks" / "test-00001.f32")
    assert np.array_equal(mask, ground_truth_map(data.test[1]))
