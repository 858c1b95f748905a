"""Synthetic shapes world: gray circles, ellipses and squares whose counts drive a molecular score."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .imaging import RasterImage, save_png
from .lrp import write_raster
from .svm import threshold_labels

SHAPE_KINDS = ("square", "circle", "ellipse")
WEIGHTS = {"ellipse": 0.6, "circle": 0.3, "square": 0.0}
FILL = 128 / 255
EDGE = 0.0
MAX_ATTEMPTS = 1000


@dataclass(frozen=True)
class SceneConfig:
    side: int = 300
    count_mean: float = 15.0
    count_std: float = 2.0
    square_mean: float = 20.0
    square_std: float = 1.0
    circle_mean: float = 10.0
    circle_std: float = 1.0
    ellipse_means: tuple[float, float] = (10.0, 15.0)
    ellipse_stds: tuple[float, float] = (0.0, 1.0)
    circle_free_fraction: float = 1 / 3
    circle_ratio: tuple[float, float] = (0.10, 1.00)
    blur_size: int = 5
    blur_sigma: float = 1.0
    pixel_noise: float = 1.0  # on the 8-bit scale
    score_noise: float = 0.1

    def __post_init__(self):
        stds = (self.count_std, self.square_std, self.circle_std, *self.ellipse_stds, self.blur_sigma)
        if min(stds) < 0:
            raise ValueError("standard deviations must be nonnegative")
        lo, hi = self.circle_ratio
        if not (0 <= self.circle_free_fraction <= 1 and 0 <= lo <= hi <= 1):
            raise ValueError("fractions must lie in [0, 1]")
        if self.side < 8 or self.blur_size % 2 == 0:
            raise ValueError("image side must be >= 8 and blur size odd")


@dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    size: tuple[float, ...]  # square: (side,), circle: (r,), ellipse: (a, b)
    angle: float = 0.0

    @property
    def extent(self) -> float:
        if self.kind == "square":
            return self.size[0] / 2
        return max(self.size)

    def inside(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        dx, dy = xs - self.cx, ys - self.cy
        if self.kind == "square":
            h = self.size[0] / 2
            return (np.abs(dx) <= h) & (np.abs(dy) <= h)
        if self.kind == "circle":
            return dx * dx + dy * dy <= self.size[0] ** 2
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.size[0]) ** 2 + (v / self.size[1]) ** 2 <= 1.0


@dataclass
class Scene:
    shapes: list[Shape]
    pixels: np.ndarray  # uint8 (side, side)
    score_noise: dict[str, float]
    index: int = 0
    split: str = "train"
    has_circles: bool = True

    @property
    def image(self) -> RasterImage:
        return RasterImage(self.pixels.astype(np.float64) / 255.0)

    def counts(self) -> dict[str, int]:
        return {k: sum(s.kind == k for s in self.shapes) for k in SHAPE_KINDS}

    @property
    def ident(self) -> str:
        return f"{self.split}-{self.index:05d}"


def _shape_masks(shape: Shape, side: int):
    """Filled region and its inner 4-neighbour boundary, restricted to a bounding box."""
    e = shape.extent + 2
    x0, x1 = max(0, int(math.floor(shape.cx - e))), min(side, int(math.ceil(shape.cx + e)) + 1)
    y0, y1 = max(0, int(math.floor(shape.cy - e))), min(side, int(math.ceil(shape.cy + e)) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    fill = shape.inside(xs.astype(np.float64), ys.astype(np.float64))
    p = np.pad(fill, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return (slice(y0, y1), slice(x0, x1)), fill, fill & ~interior


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def render(shapes: list[Shape], cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Gray fill with black edges on white, blurred, with uniform pixel noise; 8-bit output."""
    canvas = np.ones((cfg.side, cfg.side))
    for s in shapes:
        box, fill, edge = _shape_masks(s, cfg.side)
        sub = canvas[box]
        sub[fill] = FILL
        sub[edge] = EDGE
    if cfg.blur_sigma > 0:
        canvas = convolve(canvas, gaussian_kernel(cfg.blur_size, cfg.blur_sigma), mode="nearest")
    canvas = canvas + rng.uniform(-cfg.pixel_noise, cfg.pixel_noise, canvas.shape) / 255.0
    return np.round(np.clip(canvas, 0.0, 1.0) * 255.0).astype(np.uint8)


def _sample_size(kind: str, cfg: SceneConfig, rng: np.random.Generator) -> tuple[float, ...]:
    limit = cfg.side / 2 - 1
    for _ in range(MAX_ATTEMPTS):
        if kind == "square":
            size = (rng.normal(cfg.square_mean, cfg.square_std),)
        elif kind == "circle":
            size = (rng.normal(cfg.circle_mean, cfg.circle_std),)
        else:
            size = tuple(rng.normal(m, s) for m, s in zip(cfg.ellipse_means, cfg.ellipse_stds))
        ext = size[0] / 2 if kind == "square" else max(size)
        if min(size) > 0.5 and ext < limit:
            return tuple(float(v) for v in size)
    raise RuntimeError(f"could not sample a {kind} that fits a {cfg.side}px image")


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, index: int = 0, split: str = "train",
                   draw: bool = True) -> Scene:
    """Sample shapes and score noise, then render (``draw=False`` leaves a blank canvas)."""
    n = max(1, int(round(rng.normal(cfg.count_mean, cfg.count_std))))
    circle_free = rng.random() < cfg.circle_free_fraction
    if circle_free:
        n_circles = 0
    else:
        ratio = rng.uniform(*cfg.circle_ratio)
        n_circles = min(n, max(1, int(round(ratio * n))))
    kinds = ["circle"] * n_circles + [("ellipse" if rng.random() < 0.5 else "square") for _ in range(n - n_circles)]
    kinds = [kinds[i] for i in rng.permutation(n)]
    shapes = []
    for kind in kinds:
        size = _sample_size(kind, cfg, rng)
        ext = size[0] / 2 if kind == "square" else max(size)
        cx, cy = rng.uniform(ext, cfg.side - 1 - ext, size=2)
        angle = float(rng.uniform(0.0, math.pi)) if kind == "ellipse" else 0.0
        shapes.append(Shape(kind, float(cx), float(cy), size, angle))
    noise = {k: float(rng.uniform(0.0, cfg.score_noise)) for k in (*SHAPE_KINDS, "global")}
    pixels = render(shapes, cfg, rng) if draw else np.full((cfg.side, cfg.side), 255, dtype=np.uint8)
    return Scene(shapes, pixels, noise, index, split, not circle_free)


def molecular_score(scene: Scene, noise: bool = True) -> float:
    """sum_i (a_i |s_i| + eps_i) + eps over shape kinds; ``noise=False`` drops the eps terms."""
    counts = scene.counts()
    total = sum(WEIGHTS[k] * counts[k] for k in SHAPE_KINDS)
    if noise:
        total += sum(scene.score_noise.values())
    return float(total)


def ground_truth_map(scene: Scene, side: int | None = None) -> np.ndarray:
    """Ellipse pixels 1, circle pixels 0.5, others 0; overlaps take the maximum."""
    side = side or scene.pixels.shape[0]
    mask = np.zeros((side, side))
    for s in scene.shapes:
        w = WEIGHTS[s.kind] / WEIGHTS["ellipse"]
        if w == 0:
            continue
        box, fill, _ = _shape_masks(s, side)
        sub = mask[box]
        sub[fill] = np.maximum(sub[fill], w)
    return mask


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(split.encode()), int(index)])


def generate_split(n: int, seed: int, split: str, cfg: SceneConfig | None = None, start: int = 0) -> list[Scene]:
    cfg = cfg or SceneConfig()
    return [generate_scene(cfg, scene_rng(seed, split, i), i, split) for i in range(start, start + n)]


@dataclass
class SyntheticData:
    train: list[Scene]
    test: list[Scene]
    train_scores: np.ndarray
    train_labels: np.ndarray
    test_scores: np.ndarray
    test_labels: np.ndarray
    test_gt_labels: np.ndarray
    seed: int = 0
    config: SceneConfig = field(default_factory=SceneConfig)


def build_dataset(n_train: int, n_test: int = 100, seed: int = 0, cfg: SceneConfig | None = None) -> SyntheticData:
    """Training scenes are the first ``n_train`` of one seeded stream, so smaller sets nest in larger ones."""
    cfg = cfg or SceneConfig()
    if n_train < 2 or n_test < 2:
        raise ValueError("need at least two training and two test scenes")
    train = generate_split(n_train, seed, "train", cfg)
    test = generate_split(n_test, seed, "test", cfg)
    trs = np.array([molecular_score(s) for s in train])
    tes = np.array([molecular_score(s) for s in test])
    gt = np.array([molecular_score(s, noise=False) for s in test])
    return SyntheticData(train, test, trs, threshold_labels(trs, 0.5), tes, threshold_labels(tes, 0.5),
                         threshold_labels(gt, 0.5), seed, cfg)


def export_dataset(data: SyntheticData, root) -> Path:
    """PNG per scene with a JSON sidecar, a labels CSV per split and ground-truth masks for test scenes."""
    root = Path(root)
    for split, scenes, scores, labels in (("train", data.train, data.train_scores, data.train_labels),
                                          ("test", data.test, data.test_scores, data.test_labels)):
        lines = ["id,value,label" + (",gt_label" if split == "test" else "")]
        for i, (sc, v, y) in enumerate(zip(scenes, scores, labels)):
            save_png(np.repeat(sc.pixels[:, :, None], 3, axis=2), root / split / f"{sc.ident}.png")
            meta = {"id": sc.ident, "score": float(v), "label": int(y), "counts": sc.counts(),
                    "score_noise": sc.score_noise, "shapes": [asdict(s) for s in sc.shapes]}
            line = f"{sc.ident},{float(v)!r},{int(y)}"
            if split == "test":
                meta["gt_label"] = int(data.test_gt_labels[i])
                line += f",{int(data.test_gt_labels[i])}"
                write_raster(root / split / "masks" / f"{sc.ident}.f32", ground_truth_map(sc))
            (root / split / f"{sc.ident}.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
            lines.append(line)
        (root / split / "labels.csv").write_text("\n".join(lines) + "\n")
    return root
