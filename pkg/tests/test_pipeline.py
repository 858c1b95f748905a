import csv
import json
from dataclasses import replace

import numpy as np
import pytest
import yaml

from bowlrp.cli import main
from bowlrp.imaging import save_png
from bowlrp.lrp import read_raster
from bowlrp.pipeline import (ConfigError, StageError, load_config, load_labeled_dataset,
                             run_pipeline, save_config, task_template, validate_config)


def write_images(root, n, side=120, seed=0):
    """Noise images; the positive half carries red discs."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    yy, xx = np.mgrid[0:side, 0:side]
    labels = []
    for i in range(n):
        img = rng.uniform(0.3, 0.7, (side, side, 3))
        pos = i % 2 == 0
        for _ in range(6):
            cx, cy = rng.uniform(10, side - 10, 2)
            disc = (xx - cx) ** 2 + (yy - cy) ** 2 < 36
            img[disc] = (0.9, 0.1, 0.1) if pos else (0.1, 0.1, 0.9)
        save_png((img * 255).astype(np.uint8), root / f"img{i:02d}.png")
        labels.append(1 if pos else -1)
    return labels


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def tiny(cfg, **kw):
    feats = [replace(f, vocab_size=8, stride=12) for f in cfg.features]
    return replace(cfg, features=feats, kmeans_iters=10, codebook_image_fraction=1.0, **kw)


def test_load_labeled_dataset(tmp_path):
    write_images(tmp_path / "im", 3, side=20)
    write_csv(tmp_path / "l.csv", ["id", "label", "value", "time", "censored", "gene"],
              [["img00", 1, 0.5, 12, 1, 3.5], ["img01", -1, 0.1, 80, 0, ""], ["img02", 1, 2, 5, "", 1]])
    s = load_labeled_dataset(tmp_path / "im", tmp_path / "l.csv")
    assert [x.ident for x in s] == ["img00", "img01", "img02"]
    assert s[0].censored and not s[1].censored and s[1].time == 80.0
    assert s[0].targets == {"gene": 3.5} and s[1].targets == {}
    assert s[2].image().width == 20


@pytest.mark.parametrize("rows,message", [
    ([["img00", 1], ["img00", -1]], "duplicate id 'img00' in rows 2 and 3"),
    ([["img09", 1]], "row 2: no image"),
    ([["img00", 2]], r"label must be \+1 or -1"),
    ([["img00", "x"]], "row 2: cannot parse label"),
    ([], "no samples"),
])
def test_load_labeled_dataset_errors(tmp_path, rows, message):
    write_images(tmp_path / "im", 1, side=20)
    write_csv(tmp_path / "l.csv", ["id", "label"], rows)
    with pytest.raises(ConfigError, match=message):
        load_labeled_dataset(tmp_path / "im", tmp_path / "l.csv")


def test_missing_id_column(tmp_path):
    write_csv(tmp_path / "l.csv", ["name"], [["a"]])
    with pytest.raises(ConfigError, match="missing 'id'"):
        load_labeled_dataset(tmp_path, tmp_path / "l.csv")


def test_config_roundtrip_and_validation(tmp_path):
    cfg = task_template("lymphocyte")
    assert len(cfg.features) == 6 and cfg.kernel == "hik"
    save_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.digest() == cfg.digest()
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({"task": "synthetic", "colour": 1}))
    with pytest.raises(ConfigError, match="unknown keys"):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        validate_config(replace(cfg, kernel="chi2"))
    with pytest.raises(ConfigError):
        task_template("weather")
    assert replace(cfg, run_dir="elsewhere").digest() == cfg.digest()


@pytest.fixture(scope="module")
def image_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    for split, n, seed in (("train", 12, 0), ("test", 4, 1)):
        labels = write_images(root / split, n, seed=seed)
        rng = np.random.default_rng(seed)
        rows = [[f"img{i:02d}", y, y + rng.normal(0, 0.3), 30 + 60 * (y > 0) + rng.normal(0, 5), int(i % 5 == 4),
                 -y + rng.normal(0, 0.3)] for i, y in enumerate(labels)]
        write_csv(root / split / "labels.csv", ["id", "label", "value", "time", "censored", "marker"], rows)
    return root


def paths(root):
    return dict(images=str(root / "train"), labels=str(root / "train" / "labels.csv"),
                test_images=str(root / "test"), test_labels=str(root / "test" / "labels.csv"))


def test_lymphocyte_task_six_kernels(image_data, tmp_path):
    cfg = tiny(task_template("lymphocyte"), run_dir=str(tmp_path / "run"), **paths(image_data), heatmap_limit=2)
    res = run_pipeline(cfg)
    assert len(list((tmp_path / "run" / "vocab").glob("*.vocab"))) == 6
    assert len(list((tmp_path / "run" / "grams").glob("bow_train_*.npy"))) == 6
    kernels = json.loads((tmp_path / "run" / "grams" / "kernels.json").read_text())
    assert len(kernels) == 6 and all(k["kind"] == "hik" and k["c"] > 0 for k in kernels)
    assert 0 <= res.metrics["bac"] <= 1
    hm = read_raster(tmp_path / "run" / "heatmaps" / "img00.f32")
    assert hm.shape == (120, 120) and np.abs(hm).max() == pytest.approx(1.0, abs=1e-6)
    assert (tmp_path / "run" / "heatmaps" / "img01.png").exists()
    assert not (tmp_path / "run" / "heatmaps" / "img02.f32").exists()


def test_cancer_task_chi2(image_data, tmp_path):
    cfg = tiny(task_template("cancer"), run_dir=str(tmp_path / "run"), **paths(image_data), heatmap_limit=1)
    res = run_pipeline(cfg)
    assert res.metrics["bac"] > 0.7
    assert np.isfinite(read_raster(tmp_path / "run" / "heatmaps" / "img00.f32")).all()


def test_nested_molecular_task(image_data, tmp_path):
    cfg = tiny(task_template("molecular"), run_dir=str(tmp_path / "run"), images=str(image_data / "train"),
               labels=str(image_data / "train" / "labels.csv"), tile_side=None, tile_stride=None,
               outer_folds=3, inner_folds=2, q_grid=[0.5], C_grid=[1.0, 10.0])
    run_pipeline(cfg)
    with open(tmp_path / "run" / "reports" / "targets.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["target"] for r in rows] == ["value", "marker"]
    assert all(0 < float(r["p"]) <= 1 for r in rows)


def test_survival_task(image_data, tmp_path):
    cfg = tiny(task_template("survival"), run_dir=str(tmp_path / "run"), images=str(image_data / "train"),
               labels=str(image_data / "train" / "labels.csv"), tile_side=None, tile_stride=None, outer_folds=3)
    res = run_pipeline(cfg)
    assert "bac" in res.metrics
    assert (tmp_path / "run" / "reports" / "tail_accuracy.csv").exists()


def test_stage_error_names_stage(tmp_path, image_data):
    cfg = tiny(task_template("cancer"), run_dir=str(tmp_path / "run"), **paths(image_data))
    cfg = replace(cfg, features=[replace(f, vocab_size=100000) for f in cfg.features])
    with pytest.raises(StageError) as e:
        run_pipeline(cfg)
    assert e.value.stage == "codebook"


def test_cli_exit_codes(tmp_path, image_data, capsys):
    assert main(["stats", "hoeffding", "--bac", "0.75", "--n", "64"]) == 0
    assert "p\t0.000335462627902" in capsys.readouterr().out
    assert main(["stats", "quadrat", "1428", "8", "452", "1712"]) == 0
    assert "chi2\t2134.9257" in capsys.readouterr().out
    assert main(["run", "--set", "nonsense=1"]) == 2
    assert main(["run", "--task", "weather"]) == 2
    assert main(["stats", "bh"]) == 2
    base = ["train", "--task", "cancer", "--run-dir", str(tmp_path / "r"), "--images", str(image_data / "train"),
            "--labels", str(image_data / "train" / "labels.csv"), "--set", "kmeans_iters=2"]
    assert main(base + ["--set", "features=[{kind: sift, vocab_size: 100000}, {kind: sift}, {kind: sift}]"]) == 1
    assert main(base[:-2] + ["--set", "images=/does/not/exist"]) == 2


def test_synth_command(tmp_path, capsys):
    assert main(["synth", "--n-train", "3", "--n-test", "2", "--out", str(tmp_path / "d")]) == 0
    assert len(list((tmp_path / "d" / "train").glob("*.png"))) == 3
    assert len(list((tmp_path / "d" / "test" / "masks").glob("*.f32"))) == 2


@pytest.mark.parametrize("argv", [["--help"], ["run", "--help"], ["stats", "quadrat", "--help"],
                                  ["stats", "bh", "--help"], ["synth", "--help"]])
def test_help_renders(argv, capsys):
    assert main(argv) == 0
    assert "usage:" in capsys.readouterr().out
