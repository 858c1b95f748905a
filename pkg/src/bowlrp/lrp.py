"""Relevance propagation from kernel SVM scores to BoW dimensions, local features and pixels.

The HIK decomposition is exact.  For the chi2 kernel the score is expanded to
first order around a root point found on a line towards an opposite-sign
sample.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .codebook import SoftMapping
from .features import disc_offsets
from .imaging import RasterImage, Tile
from .kernels import kernel_gradient, kernel_matrix
from .svm import KernelMachine

log = logging.getLogger(__name__)

ROOT_TOL = 1e-6
ROOT_MAX_ITER = 60
N_ROOT_CANDIDATES = 30


@dataclass
class DimensionRelevance:
    """Relevance per BoW dimension, one array per kernel."""

    values: list[np.ndarray]
    method: str
    score: float
    tiles: list[list[np.ndarray]] | None = None

    @property
    def total(self) -> float:
        return float(sum(v.sum() for v in self.values))


def _as_features(machine: KernelMachine, x) -> list[np.ndarray]:
    if isinstance(x, np.ndarray) and x.ndim == 1:
        x = [x]
    feats = [np.asarray(v, dtype=np.float64) for v in x]
    if len(feats) != len(machine.specs):
        raise ValueError(f"expected {len(machine.specs)} feature vectors, got {len(feats)}")
    for v, sv in zip(feats, machine.sv_features):
        if v.shape != (sv.shape[1],):
            raise ValueError(f"feature of shape {v.shape} does not match dimension {sv.shape[1]}")
    return feats


def _bias_share(machine: KernelMachine) -> np.ndarray:
    """b * beta_u / sum_u' beta_u' D_u' per kernel."""
    betas = machine.betas
    dims = np.array([sv.shape[1] for sv in machine.sv_features])
    denom = float((betas * dims).sum())
    if denom <= 0:
        raise ValueError("all kernel weights are zero")
    return machine.b * betas / denom


def hik_relevance(machine: KernelMachine, x) -> DimensionRelevance:
    """Closed-form decomposition of f(x) = b + sum_u beta_u sum_i a_i y_i sum_d min(x_id, x_d) / c_u."""
    bad = [s.kind for s in machine.specs if s.kind != "hik"]
    if bad:
        raise ValueError(f"closed-form relevance needs HIK kernels, model has {bad}")
    feats = _as_features(machine, x)
    share = _bias_share(machine)
    values = []
    for u, (spec, sv, v) in enumerate(zip(machine.specs, machine.sv_features, feats)):
        contrib = machine.coef @ np.minimum(sv, v[None, :])
        values.append(share[u] + spec.weight * contrib / spec.c)
    return DimensionRelevance(values, "hik-exact", machine(feats))


def spread_to_tiles(rel: DimensionRelevance, tile_features: Sequence[np.ndarray]) -> DimensionRelevance:
    """Split relevance of an averaged BoW over its T tiles so that the tile mean recovers r.

    Tile t gets r_d * x_d^(t) / x_d; dimensions with x_d = 0 give every tile r_d.
    ``tile_features`` holds one (T, D_u) array per kernel.
    """
    if len(tile_features) != len(rel.values):
        raise ValueError("one tile feature matrix per kernel is required")
    n_tiles = {len(np.atleast_2d(t)) for t in tile_features}
    if len(n_tiles) != 1:
        raise ValueError("kernels disagree on the tile count")
    T = n_tiles.pop()
    per_kernel = []
    for r, Xt in zip(rel.values, tile_features):
        Xt = np.atleast_2d(np.asarray(Xt, dtype=np.float64))
        x = Xt.mean(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(x > 0, Xt / np.where(x > 0, x, 1.0), 1.0)
        per_kernel.append(r[None, :] * ratio)
    tiles = [[pk[t] for pk in per_kernel] for t in range(T)]
    return DimensionRelevance(rel.values, rel.method, rel.score, tiles)


@dataclass
class RootPoint:
    x0: list[np.ndarray]
    residual: float
    candidate: int
    distance: float
    alpha: float
    n_iter: int


def _line(x, v, a):
    return [a * xu + (1.0 - a) * vu for xu, vu in zip(x, v)]


def hilbert_distance(machine: KernelMachine, x: Sequence[np.ndarray], z: Sequence[np.ndarray]) -> float:
    """sum_u beta_u (k_u(x,x) - 2 k_u(x,z) + k_u(z,z)) with normalized kernels."""
    total = 0.0
    for spec, xu, zu in zip(machine.specs, x, z):
        A = np.stack([xu, zu])
        K = kernel_matrix(spec, A, A)
        total += spec.weight * (K[0, 0] - 2.0 * K[0, 1] + K[1, 1])
    return float(total)


def chi2_root_point(machine: KernelMachine, x, candidates: Sequence[np.ndarray],
                    n_candidates: int = N_ROOT_CANDIDATES, tol: float = ROOT_TOL,
                    max_iter: int = ROOT_MAX_ITER) -> RootPoint:
    """Root of f on the segments from x to opposite-sign candidates, closest in the kernel metric.

    ``candidates`` holds one (N, D_u) array per kernel.  The first
    ``n_candidates`` opposite-sign rows are used.
    """
    feats = _as_features(machine, x)
    cands = [np.atleast_2d(np.asarray(c, dtype=np.float64)) for c in candidates]
    if len(cands) != len(feats):
        raise ValueError("one candidate matrix per kernel is required")
    fx = machine(feats)
    fc = machine.decision(cands)
    opposite = np.flatnonzero(fx * fc < 0)
    if opposite.size == 0:
        raise ValueError("no candidate with a score of opposite sign")
    if opposite.size < n_candidates:
        log.warning("only %d opposite-sign root candidates (wanted %d)", opposite.size, n_candidates)
    best = None
    for i in opposite[:n_candidates]:
        v = [c[i] for c in cands]
        lo, hi = 0.0, 1.0  # f(line(0)) = f(v), f(line(1)) = f(x)
        flo = fc[i]
        found = None
        for it in range(1, max_iter + 1):
            mid = 0.5 * (lo + hi)
            pt = _line(feats, v, mid)
            fm = machine(pt)
            if abs(fm) < tol:
                found = (mid, pt, fm, it)
                break
            if (fm < 0) == (flo < 0):
                lo, flo = mid, fm
            else:
                hi = mid
        if found is None:
            log.debug("bisection towards candidate %d did not reach |f| < %g", i, tol)
            continue
        a, pt, fm, it = found
        dist = hilbert_distance(machine, feats, pt)
        if best is None or dist < best.distance:
            best = RootPoint(pt, abs(fm), int(i), dist, a, it)
    if best is None:
        raise RuntimeError("root search failed on every candidate line")
    return best


def chi2_taylor_relevance(machine: KernelMachine, x, root: RootPoint, tol: float = ROOT_TOL) -> DimensionRelevance:
    """First-order expansion of f around the root point, distributed over dimensions."""
    bad = [s.kind for s in machine.specs if s.kind not in ("chi2", "linear")]
    if bad:
        raise ValueError(f"Taylor relevance needs differentiable kernels, model has {bad}")
    feats = _as_features(machine, x)
    x0 = _as_features(machine, root.x0)
    f0 = machine(x0)
    if abs(f0) > tol:
        raise ValueError(f"root point residual {abs(f0):.3g} exceeds {tol}")
    l1 = float(np.abs(machine.betas).sum())
    values = []
    for spec, sv, xu, x0u in zip(machine.specs, machine.sv_features, feats, x0):
        grad = machine.coef @ kernel_gradient(spec, sv, x0u)
        values.append(spec.weight * (f0 / (len(xu) * l1) + (xu - x0u) * grad))
    return DimensionRelevance(values, "chi2-taylor", machine(feats))


@dataclass
class LocalRelevance:
    values: np.ndarray
    background: float = 0.0

    @property
    def total(self) -> float:
        return float(self.values.sum() + self.background)


def local_feature_relevance(r: np.ndarray, mappings: SoftMapping | np.ndarray) -> LocalRelevance:
    """R(l) = sum_{d not in Z} r_d m_d(l) / sum_i m_d(i) + sum_{d in Z} r_d / N.

    Z are the dimensions no local feature maps onto.  A tile without local
    features puts all its relevance into the background record.
    """
    r = np.asarray(r, dtype=np.float64)
    if isinstance(mappings, SoftMapping):
        if mappings.k != len(r):
            raise ValueError("mapping vocabulary size does not match relevance dimension")
        n = len(mappings)
        if n == 0:
            return LocalRelevance(np.zeros(0), float(r.sum()))
        mass = np.bincount(mappings.indices.ravel(), mappings.weights.ravel(), minlength=len(r))
        share = np.where(mass > 0, r / np.where(mass > 0, mass, 1.0), 0.0)
        R = (mappings.weights * share[mappings.indices]).sum(axis=1)
    else:
        m = np.asarray(mappings, dtype=np.float64).reshape(-1, len(r))
        n = len(m)
        if n == 0:
            return LocalRelevance(np.zeros(0), float(r.sum()))
        mass = m.sum(axis=0)
        share = np.where(mass > 0, r / np.where(mass > 0, mass, 1.0), 0.0)
        R = m @ share
    R = R + r[mass <= 0].sum() / n
    return LocalRelevance(R)


@dataclass
class TileRelevance:
    """Local-feature relevances of one tile, possibly from several descriptor sets."""

    tile: Tile
    centers: list[np.ndarray]
    radii: list[float]
    relevance: list[np.ndarray]
    background: float = 0.0


@dataclass
class Heatmap:
    values: np.ndarray
    mean_map: np.ndarray
    coverage: np.ndarray
    scale: float
    per_tile_normalized: bool = True
    background: float = field(default=0.0)


def tile_pixel_relevance(rec: TileRelevance) -> np.ndarray:
    """rel(p) over the tile: sum of R(l) over the discs covering p."""
    side = rec.tile.side
    acc = np.zeros(side * side)
    for centers, radius, R in zip(rec.centers, rec.radii, rec.relevance):
        if len(R) == 0:
            continue
        dy, dx = disc_offsets(radius)
        cx = np.rint(centers[:, 0]).astype(np.int64) - rec.tile.x
        cy = np.rint(centers[:, 1]).astype(np.int64) - rec.tile.y
        px = cx[:, None] + dx[None, :]
        py = cy[:, None] + dy[None, :]
        w = np.broadcast_to(R[:, None], px.shape)
        ok = (px >= 0) & (px < side) & (py >= 0) & (py < side)
        acc += np.bincount((py * side + px)[ok], w[ok], minlength=side * side)
    return acc.reshape(side, side)


def pixel_heatmap(shape: tuple[int, int], records: Sequence[TileRelevance], normalize_tiles: bool = True) -> Heatmap:
    """Per-tile pixel maps (optionally scaled by their max |rel|), averaged over covering tiles, then scaled to [-1, 1]."""
    H, W = shape
    total = np.zeros((H, W))
    cover = np.zeros((H, W), dtype=np.int64)
    background = 0.0
    for rec in records:
        t = rec.tile
        if t.x < 0 or t.y < 0 or t.x + t.side > W or t.y + t.side > H:
            raise ValueError(f"tile {t} lies outside the {W}x{H} image")
        rel = tile_pixel_relevance(rec)
        if normalize_tiles:
            m = np.abs(rel).max()
            if m > 0:
                rel = rel / m
        total[t.y:t.y + t.side, t.x:t.x + t.side] += rel
        cover[t.y:t.y + t.side, t.x:t.x + t.side] += 1
        background += rec.background
    mean = np.where(cover > 0, total / np.maximum(cover, 1), 0.0)
    scale = float(np.abs(mean).max())
    values = mean / scale if scale > 0 else mean.copy()
    return Heatmap(values, mean, cover, scale, normalize_tiles, background)


_ANCHORS = np.array([-1.0, 0.0, 0.5, 1.0])
_COLORS = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


def colormap(values: np.ndarray) -> np.ndarray:
    """Blue (-1) to green (0) to yellow (+0.5) to red (+1), shape (..., 3)."""
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.stack([np.interp(v, _ANCHORS, _COLORS[:, i]) for i in range(3)], axis=-1)


def render_heatmap(hm: Heatmap | np.ndarray, base: RasterImage | None = None, alpha: float = 0.5) -> RasterImage:
    values = hm.values if isinstance(hm, Heatmap) else np.asarray(hm, dtype=np.float64)
    if np.abs(values).max(initial=0.0) > 1.0 + 1e-12:
        raise ValueError("heatmap values must lie in [-1, 1]")
    rgb = colormap(values)
    if base is not None:
        if (base.height, base.width) != values.shape:
            raise ValueError(f"base image {base.width}x{base.height} does not match heatmap {values.shape[::-1]}")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        grey = base.pixels.mean(axis=2, keepdims=True)
        rgb = alpha * rgb + (1.0 - alpha) * grey
    return RasterImage(np.clip(rgb, 0.0, 1.0))


_RASTER_MAGIC = b"F32R"


def write_raster(path, values: np.ndarray) -> None:
    """Raw heatmap values: magic, uint32 height and width, little-endian float32 row-major."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ValueError("raster must be 2-D")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_RASTER_MAGIC)
        fh.write(struct.pack("<II", *v.shape))
        fh.write(v.astype("<f4").tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != _RASTER_MAGIC:
            raise ValueError(f"{path}: not a raster file")
        h, w = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(4 * h * w), dtype="<f4").reshape(h, w).astype(np.float64)
