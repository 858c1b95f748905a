"""Dense local descriptors: rotation-normalized SIFT and half-disc quantiles.

All extractors work on batches of keypoints sharing one radius. Keypoints
are sampled on a regular grid and kept only if their whole disc fits in
the tile. Every descriptor is computed per color channel with that
channel's own dominant orientation; channel blocks are concatenated in
the requested order, and composite kinds are laid out part by part
(e.g. ``sift+gnq`` over red/blue is ``[sift_r, sift_b, gnq_r, gnq_b]``).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import GradientField, RasterImage, Tile, color_transform, sobel_gradients

log = logging.getLogger(__name__)

RADIUS_PER_SCALE = 6.0
N_ORIENT_BINS = 36
SIFT_CELLS = 4
SIFT_ORIENTS = 8
SIFT_CLAMP = 0.2
QUANTILES = tuple(i / 10 for i in range(1, 10))

PART_DIMS = {"sift": SIFT_CELLS * SIFT_CELLS * SIFT_ORIENTS, "gnq": 2 * len(QUANTILES), "ciq": 2 * len(QUANTILES)}
KINDS = ("sift", "gnq", "ciq", "sift+gnq", "sift+ciq", "sift+ciq+gnq")


def kind_parts(kind: str) -> list[str]:
    parts = kind.split("+")
    if kind not in KINDS:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    return parts


def descriptor_dim(kind: str, n_channels: int) -> int:
    return sum(PART_DIMS[p] for p in kind_parts(kind)) * n_channels


@dataclass(frozen=True)
class Keypoint:
    x: int
    y: int
    scale: float

    @property
    def radius(self) -> float:
        return RADIUS_PER_SCALE * self.scale


@lru_cache(maxsize=32)
def disc_offsets(radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer (dy, dx) offsets of all pixels with dx^2 + dy^2 <= radius^2."""
    m = int(math.floor(radius))
    dy, dx = np.mgrid[-m:m + 1, -m:m + 1]
    keep = dx * dx + dy * dy <= radius * radius + 1e-9
    dy, dx = dy[keep], dx[keep]
    dy.setflags(write=False)
    dx.setflags(write=False)
    return dy, dx


def _grid_axis(side: int, radius: float, stride: int) -> np.ndarray:
    margin = int(math.ceil(radius - 1e-9))
    return np.arange(margin, side - margin, stride)


def dense_keypoints(tile: Tile, stride: int, scales: Sequence[float]) -> list[Keypoint]:
    """Grid keypoints per scale, in parent-image coordinates.

    The grid starts at the disc radius and keeps only keypoints whose disc
    lies completely inside the tile.
    """
    if stride < 1:
        raise ValueError("keypoint stride must be >= 1")
    if not scales:
        raise ValueError("at least one scale is required")
    out = []
    for s in scales:
        axis = _grid_axis(tile.side, RADIUS_PER_SCALE * s, stride)
        out.extend(Keypoint(int(tile.x + x), int(tile.y + y), float(s)) for y in axis for x in axis)
    return out


def grid_centers(side: int, radius: float, stride: int) -> np.ndarray:
    """Tile-local (x, y) grid centers for one radius, row-major, shape (N, 2)."""
    axis = _grid_axis(side, radius, stride)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.int64)


def _gather(arr: np.ndarray, centers: np.ndarray, radius: float) -> np.ndarray:
    dy, dx = disc_offsets(radius)
    rows = centers[:, 1:2] + dy[None, :]
    cols = centers[:, 0:1] + dx[None, :]
    h, w = arr.shape
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= h or cols.max() >= w):
        raise ValueError("keypoint disc leaves the plane")
    return arr[rows, cols]


def dominant_orientations(fld: GradientField, centers: np.ndarray, radius: float):
    """Peak of a norm-weighted 36-bin orientation histogram per keypoint.

    Angles are soft-binned between the two nearest bin centers; the peak is
    refined by a parabola through its neighbours. Returns ``(theta, degenerate)``
    where degenerate marks discs with no gradient energy (theta is 0 there).
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    n = len(centers)
    ang = _gather(fld.angle, centers, radius)
    w = _gather(fld.norm, centers, radius)
    t = np.mod(ang, 2 * np.pi) * (N_ORIENT_BINS / (2 * np.pi))
    b0 = np.floor(t).astype(np.int64)
    frac = t - b0
    b0 %= N_ORIENT_BINS
    b1 = (b0 + 1) % N_ORIENT_BINS
    row = np.arange(n)[:, None] * N_ORIENT_BINS
    hist = np.bincount((row + b0).ravel(), (w * (1 - frac)).ravel(), minlength=n * N_ORIENT_BINS)
    hist += np.bincount((row + b1).ravel(), (w * frac).ravel(), minlength=n * N_ORIENT_BINS)
    hist = hist.reshape(n, N_ORIENT_BINS)

    k = np.argmax(hist, axis=1)
    r = np.arange(n)
    hc = hist[r, k]
    hl = hist[r, (k - 1) % N_ORIENT_BINS]
    hr = hist[r, (k + 1) % N_ORIENT_BINS]
    denom = hl - 2 * hc + hr
    with np.errstate(invalid="ignore", divide="ignore"):
        offset = np.where(denom < 0, 0.5 * (hl - hr) / denom, 0.0)
    theta = np.mod((k + offset) * (2 * np.pi / N_ORIENT_BINS), 2 * np.pi)
    degenerate = hist.sum(axis=1) <= 0
    theta[degenerate] = 0.0
    return theta, degenerate


def sift_descriptors(fld: GradientField, centers: np.ndarray, radius: float, theta: np.ndarray) -> np.ndarray:
    """4x4x8 SIFT histograms over the keypoint disc, rotated by ``theta``.

    Gaussian window with sigma = radius / 2, trilinear binning, then L2
    normalization, clamping at 0.2 and renormalization. Discs without
    gradient energy yield zero vectors.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    n = len(centers)
    dy, dx = disc_offsets(radius)
    ang = _gather(fld.angle, centers, radius)
    mag = _gather(fld.norm, centers, radius)
    c = np.cos(theta)[:, None]
    s = np.sin(theta)[:, None]
    bin_width = radius / 2.0
    u = (c * dx + s * dy) / bin_width + (SIFT_CELLS - 1) / 2.0
    v = (-s * dx + c * dy) / bin_width + (SIFT_CELLS - 1) / 2.0
    o = np.mod(ang - theta[:, None], 2 * np.pi) * (SIFT_ORIENTS / (2 * np.pi))
    sigma = radius / 2.0
    wgt = mag * np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))[None, :]

    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    o0 = np.floor(o).astype(np.int64)
    fu, fv, fo = u - u0, v - v0, o - o0
    dim = SIFT_CELLS * SIFT_CELLS * SIFT_ORIENTS
    # cells padded by one on each side so out-of-grid spill needs no masking
    pc = SIFT_CELLS + 2
    pdim = pc * pc * SIFT_ORIENTS
    row = np.arange(n)[:, None] * pdim
    acc = np.zeros(n * pdim)
    for dv in (0, 1):
        wv = fv if dv else 1 - fv
        for du in (0, 1):
            wuv = wgt * wv * (fu if du else 1 - fu)
            cell = row + ((v0 + dv + 1) * pc + (u0 + du + 1)) * SIFT_ORIENTS
            for do in (0, 1):
                oo = (o0 + do) % SIFT_ORIENTS
                acc += np.bincount((cell + oo).ravel(), (wuv * (fo if do else 1 - fo)).ravel(), minlength=n * pdim)
    h = acc.reshape(n, pc, pc, SIFT_ORIENTS)[:, 1:-1, 1:-1, :].reshape(n, dim)
    return _normalize_sift(h)


def _normalize_sift(h: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(h, axis=1, keepdims=True)
    live = nrm[:, 0] > 0
    h = h.copy()
    h[live] /= nrm[live]
    np.minimum(h, SIFT_CLAMP, out=h)
    nrm = np.linalg.norm(h, axis=1, keepdims=True)
    h[live] /= nrm[live]
    return h


def quantile_estimate(q: float, values: Sequence[float]) -> float:
    """Linear-interpolation quantile of ascending ``values`` with I = q (N - 1)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("quantile of an empty set")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    i = q * (v.size - 1)
    lo = int(math.floor(i))
    if lo >= v.size - 1:
        return float(v[-1])
    f = i - lo
    return float((1 - f) * v[lo] + f * v[lo + 1])


def _row_quantiles(vals: np.ndarray, mask: np.ndarray) -> np.ndarray:
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("half disc is empty; radius too small")
    srt = np.sort(np.where(mask, vals, np.inf), axis=1)
    r = np.arange(len(vals))
    out = np.empty((len(vals), len(QUANTILES)))
    for j, q in enumerate(QUANTILES):
        i = q * (counts - 1)
        lo = np.floor(i).astype(np.int64)
        f = i - lo
        hi = np.minimum(lo + 1, counts - 1)
        out[:, j] = (1 - f) * srt[r, lo] + f * srt[r, hi]
    return out


def quantile_descriptors(source: np.ndarray, centers: np.ndarray, radius: float, theta: np.ndarray) -> np.ndarray:
    """Nine deciles on each half of the disc split orthogonally to ``theta``.

    ``source`` is the plane being summarized (gradient norms or intensities).
    The half the orientation vector points into comes first; pixels on the
    dividing line belong to it.
    """
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    dy, dx = disc_offsets(radius)
    vals = _gather(np.asarray(source, dtype=np.float64), centers, radius)
    proj = np.cos(theta)[:, None] * dx + np.sin(theta)[:, None] * dy
    front = proj >= -1e-9
    return np.concatenate([_row_quantiles(vals, front), _row_quantiles(vals, ~front)], axis=1)


@dataclass(frozen=True)
class LocalDescriptor:
    values: np.ndarray
    kind: str
    channels: tuple[str, ...]
    keypoint: Keypoint | None = None


def _single(kp: Keypoint) -> np.ndarray:
    return np.array([[kp.x, kp.y]], dtype=np.int64)


def dominant_orientation(fld: GradientField, kp: Keypoint) -> tuple[float, bool]:
    theta, degenerate = dominant_orientations(fld, _single(kp), kp.radius)
    return float(theta[0]), bool(degenerate[0])


def sift_descriptor(fields: GradientField | Sequence[GradientField], kp: Keypoint,
                    channels: Sequence[str] = ("grey",)) -> LocalDescriptor:
    fields = [fields] if isinstance(fields, GradientField) else list(fields)
    c = _single(kp)
    blocks = []
    for fld in fields:
        theta, _ = dominant_orientations(fld, c, kp.radius)
        blocks.append(sift_descriptors(fld, c, kp.radius, theta)[0])
    return LocalDescriptor(np.concatenate(blocks), "sift", tuple(channels), kp)


def quantile_descriptor(source: str, plane_or_field, kp: Keypoint,
                        fld: GradientField | None = None, channel: str = "grey") -> LocalDescriptor:
    """Single-keypoint gnq (``source="gradient"``) or ciq (``source="intensity"``) descriptor."""
    if source == "gradient":
        fld = plane_or_field if isinstance(plane_or_field, GradientField) else sobel_gradients(plane_or_field)
        plane, kind = fld.norm, "gnq"
    elif source == "intensity":
        plane = np.asarray(plane_or_field, dtype=np.float64)
        fld = fld if fld is not None else sobel_gradients(plane)
        kind = "ciq"
    else:
        raise ValueError("source must be 'gradient' or 'intensity'")
    c = _single(kp)
    theta, _ = dominant_orientations(fld, c, kp.radius)
    return LocalDescriptor(quantile_descriptors(plane, c, kp.radius, theta)[0], kind, (channel,), kp)


@dataclass(frozen=True)
class MetricWeights:
    """Per-dimension multipliers applied before Euclidean distances."""

    weights: np.ndarray
    part_dims: tuple[int, ...] = ()

    @classmethod
    def identity(cls, dim: int) -> "MetricWeights":
        return cls(np.ones(dim), (dim,))


def fit_metric_weights(values: np.ndarray, part_dims: Sequence[int]) -> MetricWeights:
    """1/std per dimension, then each part scaled by 1/(its dimensionality).

    A single-part descriptor gets identity weights.
    """
    values = np.asarray(values, dtype=np.float64)
    part_dims = tuple(int(d) for d in part_dims)
    if sum(part_dims) != values.shape[1]:
        raise ValueError("part dimensions do not add up to the descriptor size")
    if len(part_dims) == 1:
        return MetricWeights.identity(values.shape[1])
    std = values.std(axis=0)
    zero = std <= 0
    if zero.any():
        log.warning("%d descriptor dimensions have zero variance; their weight is set to 0", int(zero.sum()))
    w = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, std))
    start = 0
    for d in part_dims:
        w[start:start + d] /= d
        start += d
    return MetricWeights(w, part_dims)


def concat_descriptors(parts: Sequence[LocalDescriptor], metric: MetricWeights | None = None) -> LocalDescriptor:
    kps = {p.keypoint for p in parts}
    if len(kps) > 1:
        raise ValueError("descriptors to concatenate must share one keypoint")
    values = np.concatenate([p.values for p in parts])
    if metric is not None:
        values = values * metric.weights
    kind = "+".join(p.kind for p in parts)
    channels = tuple(c for p in parts for c in p.channels)
    return LocalDescriptor(values, kind, channels, parts[0].keypoint)


@dataclass
class DescriptorSet:
    """All descriptors of one kind/scale extracted from one tile."""

    kind: str
    channels: tuple[str, ...]
    scale: float
    centers: np.ndarray
    values: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def radius(self) -> float:
        return RADIUS_PER_SCALE * self.scale

    @property
    def part_dims(self) -> tuple[int, ...]:
        return tuple(PART_DIMS[p] * len(self.channels) for p in kind_parts(self.kind))


def extract_descriptors(image: RasterImage, tile: Tile, kind: str, channels: Sequence[str],
                        scale: float, stride: int) -> DescriptorSet:
    """Dense descriptors of one kind on a tile; centers are in image coordinates."""
    parts = kind_parts(kind)
    channels = tuple(channels)
    radius = RADIUS_PER_SCALE * scale
    planes = color_transform(image.crop(tile), channels)
    centers = grid_centers(tile.side, radius, stride)
    dim = descriptor_dim(kind, len(channels))
    if len(centers) == 0:
        return DescriptorSet(kind, channels, scale, np.zeros((0, 2), np.int64), np.zeros((0, dim), np.float32),
                             np.zeros(0, dtype=bool))
    blocks: dict[str, list[np.ndarray]] = {p: [] for p in parts}
    degenerate = np.zeros(len(centers), dtype=bool)
    for plane in planes:
        fld = sobel_gradients(plane)
        theta, deg = dominant_orientations(fld, centers, radius)
        degenerate |= deg
        for p in parts:
            if p == "sift":
                blocks[p].append(sift_descriptors(fld, centers, radius, theta))
            elif p == "gnq":
                blocks[p].append(quantile_descriptors(fld.norm, centers, radius, theta))
            else:
                blocks[p].append(quantile_descriptors(plane, centers, radius, theta))
    values = np.concatenate([b for p in parts for b in blocks[p]], axis=1).astype(np.float32)
    centers = centers + np.array([tile.x, tile.y])
    return DescriptorSet(kind, channels, scale, centers, values, degenerate)


# magic, u4 header (dim, count, channel-string length, kind index), f4 scale, channel string,
# then flat records: kind tag, keypoint (x, y, scale), f32 values
_MAGIC = b"BOWDESC2"


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("kind", "u1"), ("x", "<f4"), ("y", "<f4"), ("scale", "<f4"), ("values", "<f4", (dim,))])


def write_descriptors(path, ds: DescriptorSet) -> None:
    dim = ds.values.shape[1]
    rec = np.zeros(len(ds), dtype=_record_dtype(dim))
    rec["kind"] = KINDS.index(ds.kind)
    rec["x"] = ds.centers[:, 0]
    rec["y"] = ds.centers[:, 1]
    rec["scale"] = ds.scale
    rec["values"] = ds.values
    chan = ",".join(ds.channels).encode()
    header = np.array([dim, len(ds), len(chan), KINDS.index(ds.kind)], dtype="<u4").tobytes()
    header += np.array([ds.scale], dtype="<f4").tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + header + chan)
        fh.write(rec.tobytes())


def read_descriptors(path) -> DescriptorSet:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a descriptor file")
        dim, count, nchan, kind_idx = np.frombuffer(fh.read(16), dtype="<u4")
        scale = float(np.frombuffer(fh.read(4), dtype="<f4")[0])
        channels = tuple(fh.read(int(nchan)).decode().split(","))
        rec = np.frombuffer(fh.read(), dtype=_record_dtype(int(dim)), count=int(count))
    kind = KINDS[int(kind_idx)]
    centers = np.stack([rec["x"], rec["y"]], axis=1).astype(np.int64)
    return DescriptorSet(kind, channels, scale, centers, np.array(rec["values"], dtype=np.float32),
                         np.zeros(int(count), dtype=bool))
