"""Visual vocabularies (k-means) and rank-weighted soft Bag-of-Words encoding."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import MetricWeights

log = logging.getLogger(__name__)

RANK_CUTOFF = 4
_CHUNK = 8192


@dataclass(frozen=True)
class Vocabulary:
    centers: np.ndarray
    weights: np.ndarray
    kind: str = "sift"
    seed: int = 0
    n_train: int = 0

    def __post_init__(self):
        if self.centers.ndim != 2 or len(self.centers) < 1:
            raise ValueError("vocabulary needs at least one center")
        if self.weights.shape != (self.centers.shape[1],):
            raise ValueError("metric weights must match the descriptor dimension")
        if (self.weights < 0).any():
            raise ValueError("metric weights must be nonnegative")

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def _sq_dists(x: np.ndarray, c: np.ndarray, c_sq: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + c_sq[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _assign(xw: np.ndarray, cw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c_sq = (cw * cw).sum(axis=1)
    labels = np.empty(len(xw), dtype=np.int64)
    mind = np.empty(len(xw))
    for s in range(0, len(xw), _CHUNK):
        d = _sq_dists(xw[s:s + _CHUNK], cw, c_sq)
        labels[s:s + _CHUNK] = np.argmin(d, axis=1)
        mind[s:s + _CHUNK] = d[np.arange(len(d)), labels[s:s + _CHUNK]]
    return labels, mind


def _kmeanspp(xw: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(xw)
    idx = [int(rng.integers(n))]
    d = ((xw - xw[idx[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d.sum()
        if total <= 0:
            # remaining points coincide with chosen centers
            nxt = int(rng.integers(n))
        else:
            nxt = int(np.searchsorted(np.cumsum(d), rng.random() * total, side="right"))
            nxt = min(nxt, n - 1)
        idx.append(nxt)
        d = np.minimum(d, ((xw - xw[nxt]) ** 2).sum(axis=1))
    return xw[idx].copy()


def kmeans_train(descriptors: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
                 metric: MetricWeights | None = None, kind: str = "sift", rel_tol: float = 1e-6) -> Vocabulary:
    """Lloyd's k-means under a weighted Euclidean metric with k-means++ seeding.

    Centers are rounded to float32 so a saved and reloaded vocabulary maps
    descriptors identically.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or len(x) < k or k < 1:
        raise ValueError(f"need at least k={k} descriptors, got {len(x)}")
    w = metric.weights if metric is not None else np.ones(x.shape[1])
    xw = x * w
    if len(np.unique(xw, axis=0)) < k:
        raise ValueError(f"fewer than k={k} distinct descriptors")
    rng = np.random.default_rng(seed)
    cw = _kmeanspp(xw, k, rng)

    prev = np.inf
    labels, mind = _assign(xw, cw)
    for it in range(max_iters):
        distortion = mind.sum()
        if distortion > prev * (1 + 1e-9) + 1e-12:
            raise RuntimeError(f"k-means distortion increased at iteration {it}: {prev} -> {distortion}")
        if prev < np.inf and prev - distortion <= rel_tol * max(prev, 1e-300):
            break
        prev = distortion
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(cw)
        np.add.at(sums, labels, xw)
        live = counts > 0
        cw[live] = sums[live] / counts[live, None]
        # an empty cluster takes over the worst-fit point, which can only lower distortion
        for j in np.flatnonzero(~live):
            far = int(np.argmax(mind))
            cw[j] = xw[far]
            mind[far] = 0.0
        labels, mind = _assign(xw, cw)
    log.debug("k-means finished with distortion %.6g", mind.sum())

    with np.errstate(divide="ignore", invalid="ignore"):
        centers = np.where(w > 0, cw / np.where(w > 0, w, 1.0), 0.0)
    # dims with zero weight carry no distance information; keep the plain mean there
    if (w <= 0).any():
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros((k, x.shape[1]))
        np.add.at(sums, labels, x)
        means = sums / np.maximum(counts, 1)[:, None]
        centers[:, w <= 0] = means[:, w <= 0]
    centers = centers.astype(np.float32).astype(np.float64)
    return Vocabulary(centers, np.asarray(w, dtype=np.float64), kind, int(seed), len(x))


def distortion(descriptors: np.ndarray, vocab: Vocabulary) -> float:
    xw = np.asarray(descriptors, dtype=np.float64) * vocab.weights
    return float(_assign(xw, vocab.centers * vocab.weights)[1].sum())


@dataclass(frozen=True)
class SoftMapping:
    """Sparse rank mappings of N local descriptors: word ids and weights, shape (N, r)."""

    indices: np.ndarray
    weights: np.ndarray
    k: int

    def __len__(self) -> int:
        return len(self.indices)

    def dense(self) -> np.ndarray:
        out = np.zeros((len(self), self.k))
        rows = np.repeat(np.arange(len(self)), self.indices.shape[1])
        np.add.at(out, (rows, self.indices.ravel()), self.weights.ravel())
        return out


def rank_soft_map_batch(descriptors: np.ndarray, vocab: Vocabulary, cutoff: int = RANK_CUTOFF) -> SoftMapping:
    """Weight 2^-rank on the ``cutoff`` nearest words; equal distances rank the lower word id first."""
    x = np.asarray(descriptors, dtype=np.float64).reshape(-1, vocab.dim)
    r = min(cutoff, vocab.k)
    cw = vocab.centers * vocab.weights
    c_sq = (cw * cw).sum(axis=1)
    idx = np.empty((len(x), r), dtype=np.int64)
    for s in range(0, len(x), _CHUNK):
        d = _sq_dists(x[s:s + _CHUNK] * vocab.weights, cw, c_sq)
        rows = np.arange(len(d))
        for j in range(r):
            # argmin returns the first minimum, i.e. the lowest word index on ties
            a = np.argmin(d, axis=1)
            idx[s:s + len(d), j] = a
            d[rows, a] = np.inf
    weights = np.broadcast_to(2.0 ** -np.arange(1, r + 1), idx.shape).copy()
    return SoftMapping(idx, weights, vocab.k)


def rank_soft_map(descriptor: np.ndarray, vocab: Vocabulary, cutoff: int = RANK_CUTOFF) -> np.ndarray:
    """Dense mapping vector of a single descriptor."""
    return rank_soft_map_batch(np.asarray(descriptor)[None, :], vocab, cutoff).dense()[0]


@dataclass(frozen=True)
class BowVector:
    values: np.ndarray
    empty: bool = False

    @property
    def k(self) -> int:
        return len(self.values)


def bow_from_tile(mappings: SoftMapping | np.ndarray, k: int | None = None) -> BowVector:
    """Sum of the tile's mappings, L1-normalized; an empty tile gives a flagged zero vector."""
    if isinstance(mappings, SoftMapping):
        k = mappings.k
        total = np.bincount(mappings.indices.ravel(), mappings.weights.ravel(), minlength=k)
    else:
        m = np.asarray(mappings, dtype=np.float64)
        if m.ndim != 2:
            if k is None:
                raise ValueError("vocabulary size is needed for an empty mapping list")
            m = m.reshape(0, k)
        total = m.sum(axis=0)
        k = m.shape[1]
    s = total.sum()
    if s <= 0:
        return BowVector(np.zeros(k), empty=True)
    return BowVector(total / s)


def average_bow(tile_bows: Sequence[BowVector]) -> BowVector:
    live = [b.values for b in tile_bows if not b.empty]
    if not tile_bows:
        raise ValueError("no tiles to average")
    if not live:
        raise ValueError("all tiles are empty")
    return BowVector(np.mean(live, axis=0))


_VOCAB_MAGIC = b"BOWVOCAB"
_VOCAB_VERSION = 1


def save_vocabulary(vocab: Vocabulary, path) -> None:
    kind = vocab.kind.encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_VOCAB_MAGIC)
        fh.write(struct.pack("<IIIIqq", _VOCAB_VERSION, len(kind), vocab.k, vocab.dim, vocab.seed, vocab.n_train))
        fh.write(kind)
        fh.write(vocab.centers.astype("<f4").tobytes())
        fh.write(vocab.weights.astype("<f8").tobytes())


def load_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as fh:
        if fh.read(len(_VOCAB_MAGIC)) != _VOCAB_MAGIC:
            raise ValueError(f"{path}: not a vocabulary file")
        version, klen, k, dim, seed, n_train = struct.unpack("<IIIIqq", fh.read(32))
        if version != _VOCAB_VERSION:
            raise ValueError(f"{path}: unsupported vocabulary version {version}")
        kind = fh.read(klen).decode()
        centers = np.frombuffer(fh.read(4 * k * dim), dtype="<f4").reshape(k, dim).astype(np.float64)
        weights = np.frombuffer(fh.read(8 * dim), dtype="<f8").astype(np.float64)
    return Vocabulary(centers, weights, kind, seed, n_train)
