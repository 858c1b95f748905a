"""Configuration, dataset loading and the staged run: extract, codebook, encode, gram, train, heatmap, stats."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import stats as st
from .codebook import (SoftMapping, Vocabulary, average_bow, bow_from_tile, kmeans_train, load_vocabulary,
                       rank_soft_map_batch, save_vocabulary)
from .features import DescriptorSet, extract_descriptors, fit_metric_weights, read_descriptors, write_descriptors
from .imaging import RasterImage, Tile, load_png, save_png, tile_grid
from .kernels import GramCache, KernelSpec, estimate_bandwidth, hilbert_normalize, kernel_matrix
from .lrp import (DimensionRelevance, TileRelevance, chi2_root_point, chi2_taylor_relevance, hik_relevance,
                  local_feature_relevance, pixel_heatmap, render_heatmap, spread_to_tiles, write_raster)
from .svm import (C_GRID, Q_GRID, KernelMachine, TrainedSvm, balanced_accuracy, decision_value, nested_cv,
                  select_C, smo_train, survival_cv, tail_accuracy, threshold_labels)

log = logging.getLogger(__name__)

TASKS = ("cancer", "lymphocyte", "molecular", "survival", "synthetic")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class ConfigError(ValueError):
    """Invalid configuration or input data."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


def substream(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(label.encode())])


@dataclass(frozen=True)
class FeatureSpec:
    kind: str = "sift"
    channels: tuple[str, ...] = ("grey",)
    scale: float = 2.0
    stride: int = 6
    vocab_size: int = 510

    @property
    def name(self) -> str:
        return f"{self.kind}_{'-'.join(self.channels)}_s{self.scale:g}_d{self.stride}_k{self.vocab_size}"


@dataclass
class PipelineConfig:
    task: str = "synthetic"
    seed: int = 0
    run_dir: str = "run"
    cache_dir: str | None = None
    # labeled image data (all tasks but synthetic)
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    # synthetic world
    n_train: int = 100
    n_test: int = 100
    # tiling of each sample image; None means one tile covering the image
    tile_side: int | None = None
    tile_stride: int | None = None
    features: list[FeatureSpec] = field(default_factory=lambda: [FeatureSpec()])
    codebook_image_fraction: float = 0.3
    codebook_feature_fraction: float = 0.3
    kmeans_iters: int = 100
    kernel: str = "hik"
    kernel_weights: list[float] | None = None
    bandwidth_convention: str = "inverse"
    # training: "select" (C by k-fold CV on the training set), "fixed", "nested", "survival"
    cv_mode: str = "select"
    C: float = 1.0
    C_grid: list[float] = field(default_factory=lambda: [4.0 ** n for n in range(-2, 3)])
    cv_folds: int = 5
    selection: str = "balanced"
    outer_folds: int = 10
    inner_folds: int = 9
    q_grid: list[float] = field(default_factory=lambda: list(Q_GRID))
    survival_cutoff: float = 60.0
    tail_thresholds: list[float] = field(default_factory=lambda: [0.0, 0.5, 1.0])
    smo_tol: float = 1e-3
    # explanation
    heatmaps: bool = True
    heatmap_mode: str = "averaged"
    normalize_tiles: bool = True
    heatmap_limit: int | None = None
    root_candidates: int = 30
    overlay_alpha: float = 0.5
    # statistics
    quadrat_side: int = 50
    heatmap_threshold: float = 0.0
    quadrat_presence: str = "mean"
    fdr_alpha: float = 0.05

    def __post_init__(self):
        self.features = [f if isinstance(f, FeatureSpec) else FeatureSpec(**{**f, "channels": tuple(f.get("channels", ("grey",)))})
                         for f in self.features]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = [{**asdict(f), "channels": list(f.channels)} for f in self.features]
        return d

    def digest(self) -> str:
        d = self.to_dict()
        d.pop("run_dir")
        d.pop("cache_dir")
        return hashlib.sha1(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    @property
    def weights(self) -> list[float]:
        return list(self.kernel_weights) if self.kernel_weights else [1.0] * len(self.features)


def task_template(task: str, **overrides) -> PipelineConfig:
    """Default configuration for each task."""
    if task == "cancer":
        feats = [FeatureSpec("sift+gnq", ("red", "blue"), s, 6, 510) for s in (1.5, 2.0, 2.5)]
        cfg = PipelineConfig(task=task, tile_side=102, tile_stride=34, features=feats, kernel="chi2",
                             cv_mode="fixed", C=1.0, heatmap_mode="per_tile")
    elif task == "lymphocyte":
        feats = [FeatureSpec(k, ("red", "green", "blue"), s, 6, 510 if k == "sift" else 384)
                 for k in ("gnq", "ciq", "sift") for s in (1.5, 2.0)]
        cfg = PipelineConfig(task=task, tile_side=102, tile_stride=34, features=feats, kernel="hik",
                             cv_mode="fixed", C=1.0, heatmap_mode="per_tile")
    elif task in ("molecular", "survival"):
        feats = [FeatureSpec("sift", ("red", "blue"), 2.0, 3, 510)]
        cfg = PipelineConfig(task=task, tile_side=201, tile_stride=67, features=feats, kernel="hik",
                             cv_mode="nested" if task == "molecular" else "survival",
                             C_grid=list(C_GRID), heatmap_mode="averaged")
    elif task == "synthetic":
        cfg = PipelineConfig(task=task)
    else:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return replace(cfg, **overrides) if overrides else cfg


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    if cfg.task not in TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}")
    if not cfg.features:
        raise ConfigError("at least one feature is required")
    if cfg.kernel not in ("hik", "chi2"):
        raise ConfigError(f"kernel must be hik or chi2, got {cfg.kernel!r}")
    if len(cfg.weights) != len(cfg.features):
        raise ConfigError("one kernel weight per feature is required")
    if cfg.task == "cancer" and (len(cfg.features) != 3 or cfg.kernel != "chi2"):
        raise ConfigError("cancer task expects 3 BoW features with a chi2 kernel sum")
    if cfg.task == "lymphocyte" and (len(cfg.features) != 6 or cfg.kernel != "hik"):
        raise ConfigError("lymphocyte task expects 6 BoW features with an HIK sum")
    if cfg.cv_mode not in ("select", "fixed", "nested", "survival"):
        raise ConfigError(f"unknown cv_mode {cfg.cv_mode!r}")
    if cfg.heatmap_mode not in ("averaged", "per_tile"):
        raise ConfigError(f"unknown heatmap_mode {cfg.heatmap_mode!r}")
    if (cfg.tile_side is None) != (cfg.tile_stride is None):
        raise ConfigError("tile_side and tile_stride must be given together")
    if not (0 < cfg.codebook_image_fraction <= 1 and 0 < cfg.codebook_feature_fraction <= 1):
        raise ConfigError("codebook fractions must lie in (0, 1]")
    if cfg.task != "synthetic":
        for key in ("images", "labels"):
            p = getattr(cfg, key)
            if p is None or not Path(p).exists():
                raise ConfigError(f"{key} path {p!r} does not exist")
        if (cfg.test_images is None) != (cfg.test_labels is None):
            raise ConfigError("test_images and test_labels must be given together")
    return cfg


def load_config(path) -> PipelineConfig:
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    task = data.pop("task", "synthetic")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    base = task_template(task)
    if "features" in data:
        data["features"] = [FeatureSpec(**{**f, "channels": tuple(f.get("channels", ("grey",)))}) for f in data["features"]]
    return replace(base, **data)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


@dataclass
class Sample:
    ident: str
    loader: Callable[[], RasterImage] = field(repr=False)
    value: float | None = None
    label: int | None = None
    split: str = "train"
    row: int = 0
    targets: dict[str, float] = field(default_factory=dict)
    time: float | None = None
    censored: bool = False
    gt_label: int | None = None
    mask: Callable[[], np.ndarray] | None = field(default=None, repr=False)

    def image(self) -> RasterImage:
        return self.loader()


def _resolve_image(root: Path, ident: str) -> Path | None:
    p = root / ident
    if p.is_file():
        return p
    for suf in IMAGE_SUFFIXES:
        q = root / f"{ident}{suf}"
        if q.is_file():
            return q
    return None


def _parse_number(text: str, what: str, row: int, path) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ConfigError(f"{path}: row {row}: cannot parse {what} {text!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{path}: row {row}: {what} is not finite")
    return v


def load_labeled_dataset(images_dir, labels_csv, split: str = "train") -> list[Sample]:
    """Samples in CSV order.  Columns: ``id`` plus any of ``label`` (+1/-1), ``value``,
    ``time`` and ``censored``; remaining columns are numeric targets."""
    images_dir, labels_csv = Path(images_dir), Path(labels_csv)
    with open(labels_csv, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise ConfigError(f"{labels_csv}: missing 'id' column")
        fixed = {"id", "label", "value", "time", "censored", "split", "gt_label"}
        target_cols = [c for c in reader.fieldnames if c not in fixed]
        samples: list[Sample] = []
        seen: dict[str, int] = {}
        for row_no, rec in enumerate(reader, start=2):
            ident = (rec.get("id") or "").strip()
            if not ident:
                raise ConfigError(f"{labels_csv}: row {row_no}: empty id")
            if ident in seen:
                raise ConfigError(f"{labels_csv}: duplicate id {ident!r} in rows {seen[ident]} and {row_no}")
            seen[ident] = row_no
            path = _resolve_image(images_dir, ident)
            if path is None:
                raise ConfigError(f"{labels_csv}: row {row_no}: no image for id {ident!r} in {images_dir}")
            s = Sample(ident, (lambda p=path: load_png(p)), split=split, row=row_no)
            if rec.get("label") not in (None, ""):
                lab = _parse_number(rec["label"], "label", row_no, labels_csv)
                if lab not in (-1.0, 1.0):
                    raise ConfigError(f"{labels_csv}: row {row_no}: label must be +1 or -1")
                s.label = int(lab)
            if rec.get("gt_label") not in (None, ""):
                s.gt_label = int(_parse_number(rec["gt_label"], "gt_label", row_no, labels_csv))
            if rec.get("value") not in (None, ""):
                s.value = _parse_number(rec["value"], "value", row_no, labels_csv)
            if rec.get("time") not in (None, ""):
                s.time = _parse_number(rec["time"], "time", row_no, labels_csv)
                cen = (rec.get("censored") or "0").strip().lower()
                if cen not in ("0", "1", "true", "false"):
                    raise ConfigError(f"{labels_csv}: row {row_no}: censored must be 0/1")
                s.censored = cen in ("1", "true")
            for c in target_cols:
                if rec.get(c) not in (None, ""):
                    s.targets[c] = _parse_number(rec[c], c, row_no, labels_csv)
            samples.append(s)
    if not samples:
        raise ConfigError(f"{labels_csv}: no samples")
    return samples


def synthetic_samples(cfg: PipelineConfig):
    from .synthetic import build_dataset, ground_truth_map

    data = build_dataset(cfg.n_train, cfg.n_test, cfg.seed)
    train = [Sample(s.ident, (lambda s=s: s.image), float(v), int(y), "train", i)
             for i, (s, v, y) in enumerate(zip(data.train, data.train_scores, data.train_labels))]
    test = [Sample(s.ident, (lambda s=s: s.image), float(v), int(y), "test", i, gt_label=int(g),
                   mask=(lambda s=s: ground_truth_map(s)))
            for i, (s, v, y, g) in enumerate(zip(data.test, data.test_scores, data.test_labels, data.test_gt_labels))]
    return train, test


def load_samples(cfg: PipelineConfig) -> tuple[list[Sample], list[Sample]]:
    if cfg.task == "synthetic":
        return synthetic_samples(cfg)
    train = load_labeled_dataset(cfg.images, cfg.labels, "train")
    test = load_labeled_dataset(cfg.test_images, cfg.test_labels, "test") if cfg.test_images else []
    return train, test


class RunDir:
    """Fixed layout: config.resolved.yaml, vocab/, grams/, models/, reports/, heatmaps/ (+ cache/)."""

    def __init__(self, root, cache=None):
        self.root = Path(root)
        self.cache = Path(cache) if cache else self.root / "cache"
        for d in ("vocab", "grams", "models", "reports", "heatmaps"):
            (self.root / d).mkdir(parents=True, exist_ok=True)

    def __truediv__(self, other) -> Path:
        return self.root / other

    def descriptor_dir(self, tag: str, spec: FeatureSpec, ident: str) -> Path:
        return self.cache / tag / spec.name / ident


def image_tiles(img: RasterImage, cfg: PipelineConfig) -> list[Tile]:
    if cfg.tile_side is None:
        if img.width != img.height:
            side = min(img.width, img.height)
            return tile_grid(img, side, side)
        return [Tile(0, 0, img.width)]
    return tile_grid(img, cfg.tile_side, cfg.tile_stride)


def data_tag(cfg: PipelineConfig) -> str:
    """Cache namespace for descriptors: depends on the data, not on the model settings."""
    if cfg.task == "synthetic":
        return f"synthetic-seed{cfg.seed}"
    h = hashlib.sha1(f"{Path(cfg.images).resolve()}|{cfg.test_images and Path(cfg.test_images).resolve()}".encode())
    return f"{cfg.task}-{h.hexdigest()[:10]}"


def tile_tag(cfg: PipelineConfig) -> str:
    return "whole" if cfg.tile_side is None else f"t{cfg.tile_side}-{cfg.tile_stride}"


def extract_stage(samples: Sequence[Sample], cfg: PipelineConfig, run: RunDir) -> None:
    """Descriptors per (image, feature, tile), written once to the cache."""
    tag = f"{data_tag(cfg)}/{tile_tag(cfg)}"
    for i, s in enumerate(samples):
        pending = [f for f in cfg.features if not (run.descriptor_dir(tag, f, s.ident) / "done").exists()]
        if not pending:
            continue
        img = s.image()
        tiles = image_tiles(img, cfg)
        for spec in pending:
            d = run.descriptor_dir(tag, spec, s.ident)
            for t_i, tile in enumerate(tiles):
                ds = extract_descriptors(img, tile, spec.kind, spec.channels, spec.scale, spec.stride)
                write_descriptors(d / f"t{t_i:04d}.bin", ds)
            (d / "done").write_text(f"{len(tiles)}\n")
        if (i + 1) % 50 == 0:
            log.info("extracted %d/%d images", i + 1, len(samples))


def load_tiles(run: RunDir, cfg: PipelineConfig, spec: FeatureSpec, ident: str) -> list[DescriptorSet]:
    d = run.descriptor_dir(f"{data_tag(cfg)}/{tile_tag(cfg)}", spec, ident)
    n = int((d / "done").read_text())
    return [read_descriptors(d / f"t{t:04d}.bin") for t in range(n)]


def codebook_stage(train: Sequence[Sample], cfg: PipelineConfig, run: RunDir) -> list[Vocabulary]:
    vocabs = []
    for u, spec in enumerate(cfg.features):
        path = run / "vocab" / f"{u}_{spec.name}.vocab"
        if path.exists():
            vocabs.append(load_vocabulary(path))
            continue
        rng = substream(cfg.seed, f"codebook/{spec.name}")
        n_img = max(1, int(round(cfg.codebook_image_fraction * len(train))))
        chosen = np.sort(rng.choice(len(train), n_img, replace=False))
        parts = []
        for i in chosen:
            vals = np.concatenate([ds.values for ds in load_tiles(run, cfg, spec, train[i].ident)])
            if len(vals) == 0:
                continue
            m = max(1, int(round(cfg.codebook_feature_fraction * len(vals))))
            parts.append(vals[np.sort(rng.choice(len(vals), m, replace=False))])
        if not parts:
            raise RuntimeError(f"no descriptors available for vocabulary {spec.name}")
        sample = np.concatenate(parts).astype(np.float64)
        ref = load_tiles(run, cfg, spec, train[chosen[0]].ident)[0]
        metric = fit_metric_weights(sample, ref.part_dims)
        vocab = kmeans_train(sample, spec.vocab_size, cfg.kmeans_iters, seed=int(rng.integers(2 ** 31)),
                             metric=metric, kind=spec.kind)
        save_vocabulary(vocab, path)
        vocabs.append(load_vocabulary(path))
        log.info("vocabulary %s: %d words from %d descriptors", spec.name, spec.vocab_size, len(sample))
    return vocabs


@dataclass
class EncodedImage:
    """Per-feature tile mappings, centers and BoWs of one image."""

    tiles: list[Tile]
    mappings: list[list[SoftMapping]]
    centers: list[list[np.ndarray]]
    radii: list[float]
    tile_bows: list[np.ndarray]
    bows: list[np.ndarray]


def encode_image(run: RunDir, cfg: PipelineConfig, vocabs: Sequence[Vocabulary], s: Sample,
                 tiles: list[Tile] | None = None) -> EncodedImage:
    mappings, centers, tile_bows, bows, radii = [], [], [], [], []
    for spec, vocab in zip(cfg.features, vocabs):
        sets = load_tiles(run, cfg, spec, s.ident)
        maps = [rank_soft_map_batch(ds.values, vocab) for ds in sets]
        tb = [bow_from_tile(m) for m in maps]
        mappings.append(maps)
        centers.append([ds.centers.astype(np.float64) for ds in sets])
        radii.append(sets[0].radius)
        tile_bows.append(np.stack([b.values for b in tb]))
        bows.append(average_bow(tb).values)
    if tiles is None:
        tiles = image_tiles(s.image(), cfg)
    return EncodedImage(tiles, mappings, centers, radii, tile_bows, bows)


def encode_stage(samples: Sequence[Sample], cfg: PipelineConfig, run: RunDir, vocabs, name: str) -> list[np.ndarray]:
    """Image-level BoW matrix per feature, cached as .npy under grams/."""
    paths = [run / "grams" / f"bow_{name}_{u}.npy" for u in range(len(cfg.features))]
    if all(p.exists() for p in paths):
        return [np.load(p) for p in paths]
    rows = [[] for _ in cfg.features]
    for s in samples:
        enc = encode_image(run, cfg, vocabs, s, tiles=[])
        for u, b in enumerate(enc.bows):
            rows[u].append(b)
    X = [np.stack(r) for r in rows]
    for p, x in zip(paths, X):
        np.save(p, x)
    return X


def kernel_specs(cfg: PipelineConfig, Xtr: Sequence[np.ndarray]) -> list[KernelSpec]:
    """sigma (chi2) from all training histograms and c from the training Gram."""
    specs = []
    for u, (X, w) in enumerate(zip(Xtr, cfg.weights)):
        sigma = None
        if cfg.kernel == "chi2":
            sigma = estimate_bandwidth(X, rng=substream(cfg.seed, f"bandwidth/{u}"), convention=cfg.bandwidth_convention)
        specs.append(KernelSpec(cfg.kernel, sigma, w))
    return specs


def gram_stage(cfg: PipelineConfig, run: RunDir, Xtr, Xte):
    """Raw train/test Gram blocks per kernel plus calibrated specs."""
    cache = GramCache(run / "grams")
    specs = kernel_specs(cfg, Xtr)
    raw_tr, raw_te, calibrated = [], [], []
    for spec, A, B in zip(specs, Xtr, Xte):
        R = cache.raw(spec, A, A)
        c, _ = hilbert_normalize(R)
        calibrated.append(replace(spec, c=c))
        raw_tr.append(R)
        raw_te.append(cache.raw(spec, B, A) if len(B) else np.zeros((0, len(A))))
    (run / "grams" / "kernels.json").write_text(json.dumps([asdict(s) for s in calibrated], indent=1) + "\n")
    return calibrated, raw_tr, raw_te


def combined(specs: Sequence[KernelSpec], raws: Sequence[np.ndarray]) -> np.ndarray:
    return sum(s.weight * R / s.c for s, R in zip(specs, raws))


def save_model(path, model: TrainedSvm, ids: Sequence[str], specs: Sequence[KernelSpec]) -> None:
    sv = model.support
    doc = {"b": model.b, "C": model.C, "kkt_gap": model.kkt_gap, "n_updates": model.n_updates,
           "objective": model.objective, "support": [ids[i] for i in sv],
           "alpha": [float(a) for a in model.alpha[sv]], "y": [int(v) for v in model.y[sv]],
           "kernels": [{**asdict(s), "digest": s.digest()} for s in specs]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


@dataclass
class RunResult:
    run_dir: Path
    metrics: dict
    test_scores: np.ndarray | None = None
    heatmaps: dict = field(default_factory=dict)


def _train_select(cfg, run, train, test, specs, raw_tr, raw_te, metrics):
    y = np.array([s.label for s in train])
    K = combined(specs, raw_tr)
    if cfg.cv_mode == "select":
        C, errs = select_C(K, y, cfg.C_grid, cfg.cv_folds, substream(cfg.seed, "select-C"), cfg.selection, cfg.smo_tol)
        st.write_csv(run / "reports" / "c_selection.csv", [{"C": c, "cv_error": e} for c, e in zip(cfg.C_grid, errs)])
    else:
        C = cfg.C
    model = smo_train(K, y, C, cfg.smo_tol)
    save_model(run / "models" / "model.json", model, [s.ident for s in train], specs)
    metrics.update({"C": C, "n_train": len(train), "n_support": len(model.support)})
    scores = None
    if test:
        scores = decision_value(model, combined(specs, raw_te))
        rows = [{"id": s.ident, "score": f, "label": s.label, "gt_label": s.gt_label} for s, f in zip(test, scores)]
        st.write_csv(run / "reports" / "predictions.csv", rows, ["id", "score", "label", "gt_label"])
        if all(s.label is not None for s in test):
            metrics["bac"] = balanced_accuracy(scores, [s.label for s in test])
        if all(s.gt_label is not None for s in test):
            metrics["bac_gt"] = balanced_accuracy(scores, [s.gt_label for s in test])
    return model, scores


def _train_nested(cfg, run, train, specs, raw_tr, metrics):
    targets = {}
    if all(s.value is not None for s in train):
        targets["value"] = np.array([s.value for s in train])
    names = sorted({k for s in train for k in s.targets})
    for k in names:
        if all(k in s.targets for s in train):
            targets[k] = np.array([s.targets[k] for s in train])
    if not targets:
        raise ConfigError("nested CV needs a 'value' column or numeric target columns")
    fold_rows, summary = [], []
    for t_i, (name, vals) in enumerate(targets.items()):
        res = nested_cv(raw_tr, vals, cfg.q_grid, cfg.outer_folds, cfg.inner_folds, cfg.C_grid,
                        seed=int(substream(cfg.seed, f"nested/{name}").integers(2 ** 31)),
                        betas=[s.weight for s in specs], target=name, criterion=cfg.selection, tol=cfg.smo_tol)
        for rep in res.reports.values():
            fold_rows += rep.csv_rows()
        best = res.best
        p = st.hoeffding_pvalue(best.mean_bac, len(vals), best.q)
        summary.append({"target": name, "quantile": best.q, "bac": best.mean_bac, "n_pos": best.n_pos,
                        "n_neg": best.n_neg, "p": p.p, "log10_p": p.log10_p, "n_eff": p.n_eff})
    bh = st.benjamini_hochberg([r["p"] for r in summary], cfg.fdr_alpha)
    for r, thr, up, lit in zip(summary, bh.thresholds, bh.step_up, bh.first_violation):
        r.update({"bh_threshold": thr, "significant": bool(up), "significant_first_violation": bool(lit)})
    st.write_csv(run / "reports" / "cv_folds.csv", fold_rows, ["target", "quantile", "fold", "C", "bac"])
    st.write_csv(run / "reports" / "targets.csv", summary)
    metrics.update({"n_targets": len(summary), "n_significant": bh.n_step_up})


def _train_survival(cfg, run, train, specs, raw_tr, metrics):
    if any(s.time is None for s in train):
        raise ConfigError("survival task needs 'time' and 'censored' columns")
    times = np.array([s.time for s in train])
    cens = np.array([s.censored for s in train])
    K = combined(specs, raw_tr)
    res = survival_cv(K, times, cens, cfg.survival_cutoff, cfg.outer_folds, cfg.C,
                      int(substream(cfg.seed, "survival").integers(2 ** 31)), cfg.smo_tol)
    groups = np.where(res.scores > 0, 1, -1)
    rows = [{"id": s.ident, "score": f, "fold": int(k), "time": s.time, "censored": s.censored}
            for s, f, k in zip(train, res.scores, res.fold_of)]
    st.write_csv(run / "reports" / "survival_scores.csv", rows)
    metrics["bac"] = res.bac
    if len(np.unique(groups)) == 2:
        lr = st.logrank_test(times, ~cens, groups)
        metrics.update({"logrank_statistic": lr.statistic, "logrank_p": lr.p})
    tails = []
    for t in cfg.tail_thresholds:
        ta = tail_accuracy(res.scores[res.uncensored], res.labels, t)
        tails.append({"t": t, **asdict(ta)})
    st.write_csv(run / "reports" / "tail_accuracy.csv", tails)


def relevance_for(machine: KernelMachine, x: list[np.ndarray], candidates: list[np.ndarray] | None,
                  n_candidates: int) -> DimensionRelevance:
    if machine.specs[0].kind == "hik":
        return hik_relevance(machine, x)
    if candidates is None:
        raise ValueError("chi2 relevance needs root candidates")
    root = chi2_root_point(machine, x, candidates, n_candidates)
    return chi2_taylor_relevance(machine, x, root)


def explain_image(machine: KernelMachine, enc: EncodedImage, img_shape: tuple[int, int], cfg: PipelineConfig,
                  candidates: list[np.ndarray] | None = None):
    """Pixel heatmap for one encoded image."""
    T = len(enc.tiles)
    if cfg.heatmap_mode == "averaged":
        rel = relevance_for(machine, enc.bows, candidates, cfg.root_candidates)
        tile_rel = spread_to_tiles(rel, enc.tile_bows).tiles
    else:
        tile_rel = [relevance_for(machine, [tb[t] for tb in enc.tile_bows], candidates, cfg.root_candidates).values
                    for t in range(T)]
        rel = None
    records = []
    for t, tile in enumerate(enc.tiles):
        R, bg = [], 0.0
        for u in range(len(cfg.features)):
            lr = local_feature_relevance(tile_rel[t][u], enc.mappings[u][t])
            R.append(lr.values)
            bg += lr.background
        records.append(TileRelevance(tile, [enc.centers[u][t] for u in range(len(cfg.features))], enc.radii, R, bg))
    return pixel_heatmap(img_shape, records, cfg.normalize_tiles), rel


def heatmap_stage(cfg, run, machine, samples: Sequence[Sample], vocabs, candidates=None) -> dict:
    out = {}
    for s in samples:
        img = s.image()
        enc = encode_image(run, cfg, vocabs, s, image_tiles(img, cfg))
        hm, _ = explain_image(machine, enc, (img.height, img.width), cfg, candidates)
        write_raster(run / "heatmaps" / f"{s.ident}.f32", hm.values)
        save_png(render_heatmap(hm, img, cfg.overlay_alpha), run / "heatmaps" / f"{s.ident}.png")
        out[s.ident] = hm.values
    return out


def quadrat_stage(cfg, run, samples: Sequence[Sample], maps: dict) -> st.TestResult | None:
    if not samples or any(s.mask is None for s in samples):
        return None
    table = None
    rows = []
    for s in samples:
        pm = st.quadrat_presence(s.mask(), cfg.quadrat_side, 0.0, "any")
        ph = st.quadrat_presence(maps[s.ident], cfg.quadrat_side, cfg.heatmap_threshold, cfg.quadrat_presence)
        t = st.table_from_presence(pm, ph, cfg.quadrat_side)
        rows.append({"id": s.ident, **asdict(t)})
        table = t if table is None else table + t
    res = st.chi2_from_table(table)
    st.write_csv(run / "reports" / "quadrat_tiles.csv", rows)
    st.write_csv(run / "reports" / "quadrat.csv", [{**asdict(table), "chi2": res.statistic, "p": res.p,
                                                   "log10_p": res.log10_p, "r_cl": res.extra["r_cl"]}])
    return res


STAGES = ("extract", "codebook", "gram", "train", "heatmap")


def run_pipeline(cfg: PipelineConfig, until: str | None = None) -> RunResult:
    """Run every stage (or those up to ``until``); cached stage outputs are reused."""
    if until is not None and until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; expected one of {STAGES}")
    validate_config(cfg)
    run = RunDir(cfg.run_dir, cfg.cache_dir)
    save_config(cfg, run / "config.resolved.yaml")
    metrics: dict = {"task": cfg.task, "seed": cfg.seed, "config": cfg.digest()}

    def stage(name, fn, *a):
        try:
            return fn(*a)
        except (ConfigError, StageError):
            raise
        except Exception as e:
            raise StageError(name, e) from e

    train, test = stage("load", load_samples, cfg)
    if cfg.cv_mode in ("select", "fixed") and any(s.label is None for s in train):
        for s, y in zip(train, threshold_labels([s.value for s in train], 0.5)):
            s.label = int(y)
    stage("extract", extract_stage, list(train) + list(test), cfg, run)
    if until == "extract":
        return RunResult(run.root, metrics)
    vocabs = stage("codebook", codebook_stage, train, cfg, run)
    if until == "codebook":
        return RunResult(run.root, metrics)
    Xtr = stage("encode", encode_stage, train, cfg, run, vocabs, "train")
    Xte = stage("encode", encode_stage, test, cfg, run, vocabs, "test") if test else [np.zeros((0, v.k)) for v in vocabs]
    specs, raw_tr, raw_te = stage("gram", gram_stage, cfg, run, Xtr, Xte)
    if until == "gram":
        return RunResult(run.root, metrics)

    scores, heatmaps = None, {}
    if cfg.cv_mode in ("select", "fixed"):
        model, scores = stage("train", _train_select, cfg, run, train, test, specs, raw_tr, raw_te, metrics)
        if cfg.heatmaps and test and until != "train":
            machine = KernelMachine.from_svm(model, specs, Xtr)
            targets = test[:cfg.heatmap_limit] if cfg.heatmap_limit else test
            # held-out histograms; chi2_root_point keeps the opposite-sign ones
            cands = Xte if cfg.kernel == "chi2" else None
            heatmaps = stage("heatmap", heatmap_stage, cfg, run, machine, targets, vocabs, cands)
            q = stage("stats", quadrat_stage, cfg, run, targets, heatmaps)
            if q is not None:
                metrics.update({"quadrat_chi2": q.statistic, "quadrat_log10_p": q.log10_p})
    elif cfg.cv_mode == "nested":
        stage("cv", _train_nested, cfg, run, train, specs, raw_tr, metrics)
    else:
        stage("cv", _train_survival, cfg, run, train, specs, raw_tr, metrics)

    st.write_csv(run / "reports" / "summary.csv", [{"metric": k, "value": v} for k, v in metrics.items()])
    return RunResult(run.root, metrics, scores, heatmaps)
