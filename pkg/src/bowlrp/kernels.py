"""Histogram-intersection and chi-squared kernels on BoW histograms.

Every kernel is divided by its Hilbert-space spread ``c`` computed once on
the training Gram matrix; the same constant is reused for test rows.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

C_TOL = 1e-12
_ROW_BLOCK = 32

KERNEL_KINDS = ("hik", "chi2", "linear")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    sigma: float | None = None
    weight: float = 1.0
    c: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("kernel weight must be nonnegative")
        if self.kind == "chi2" and self.sigma is not None and self.sigma <= 0:
            raise ValueError("chi2 bandwidth must be positive")

    @property
    def calibrated(self) -> bool:
        return self.c is not None and (self.kind != "chi2" or self.sigma is not None)

    def digest(self) -> str:
        return hashlib.sha1(repr((self.kind, self.sigma, self.weight, self.c)).encode()).hexdigest()[:16]


def hik_eval(x, z) -> float:
    x, z = np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError("dimension mismatch")
    return float(np.minimum(x, z).sum())


def chi2_distance(x, z) -> float:
    x, z = np.asarray(x, dtype=np.float64), np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ValueError("dimension mismatch")
    s = x + z
    live = s > 0
    return float((((x - z) ** 2)[live] / s[live]).sum())


def chi2_eval(x, z, sigma: float) -> float:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return math.exp(-sigma * chi2_distance(x, z))


def hik_matrix(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    X, Z = np.atleast_2d(X), np.atleast_2d(Z)
    out = np.empty((len(X), len(Z)))
    for s in range(0, len(X), _ROW_BLOCK):
        out[s:s + _ROW_BLOCK] = np.minimum(X[s:s + _ROW_BLOCK, None, :], Z[None, :, :]).sum(axis=2)
    return out


def chi2_distance_matrix(X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    X, Z = np.atleast_2d(X), np.atleast_2d(Z)
    out = np.empty((len(X), len(Z)))
    for s in range(0, len(X), _ROW_BLOCK):
        xb = X[s:s + _ROW_BLOCK, None, :]
        den = xb + Z[None, :, :]
        num = (xb - Z[None, :, :]) ** 2
        with np.errstate(invalid="ignore", divide="ignore"):
            out[s:s + _ROW_BLOCK] = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0).sum(axis=2)
    return out


def raw_kernel_matrix(spec: KernelSpec, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Kernel values before Hilbert normalization."""
    if spec.kind == "hik":
        return hik_matrix(X, Z)
    if spec.kind == "linear":
        return np.atleast_2d(X) @ np.atleast_2d(Z).T
    if spec.sigma is None:
        raise ValueError("chi2 kernel has no bandwidth yet")
    return np.exp(-spec.sigma * chi2_distance_matrix(X, Z))


def kernel_matrix(spec: KernelSpec, X: np.ndarray, Z: np.ndarray) -> np.ndarray:
    if not spec.calibrated:
        raise ValueError(f"{spec.kind} kernel is not calibrated")
    return raw_kernel_matrix(spec, X, Z) / spec.c


def kernel_gradient(spec: KernelSpec, Z: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """d k(z_i, x) / d x at x0 for every row z_i, normalized by c; shape (S, D).

    For chi2, coordinates with x_d + z_d = 0 contribute nothing.
    """
    if not spec.calibrated:
        raise ValueError(f"{spec.kind} kernel is not calibrated")
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    x0 = np.asarray(x0, dtype=np.float64)
    if spec.kind == "linear":
        return Z / spec.c
    if spec.kind == "hik":
        # subgradient: 1 where x0 is the smaller coordinate
        return (x0[None, :] < Z).astype(np.float64) / spec.c
    s = x0[None, :] + Z
    diff = x0[None, :] - Z
    with np.errstate(invalid="ignore", divide="ignore"):
        term = np.where(s > 0, diff ** 2 / np.where(s > 0, s, 1.0), 0.0)
        dterm = np.where(s > 0, diff * (x0[None, :] + 3 * Z) / np.where(s > 0, s, 1.0) ** 2, 0.0)
    k = np.exp(-spec.sigma * term.sum(axis=1))
    return -spec.sigma * k[:, None] * dterm / spec.c


def estimate_bandwidth(X: np.ndarray, subset: int = 2000, rng: np.random.Generator | None = None,
                       convention: str = "inverse") -> float:
    """Chi2 bandwidth from the mean pairwise chi2 distance over (a subset of) training histograms.

    ``convention="inverse"`` returns 1/mean so an average pair maps to exp(-1);
    ``"mean"`` returns the mean distance itself.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) < 2:
        raise ValueError("bandwidth needs at least two histograms")
    if len(X) > subset:
        rng = rng if rng is not None else np.random.default_rng(0)
        X = X[np.sort(rng.choice(len(X), subset, replace=False))]
    D = chi2_distance_matrix(X, X)
    iu = np.triu_indices(len(X), k=1)
    mu = float(D[iu].mean())
    if mu <= 0:
        raise ValueError("all histograms are identical; chi2 bandwidth undefined")
    if convention == "inverse":
        return 1.0 / mu
    if convention == "mean":
        return mu
    raise ValueError(f"unknown bandwidth convention {convention!r}")


def hilbert_spread(G: np.ndarray) -> float:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("Gram matrix must be square")
    return float(np.mean(np.diag(G)) - G.mean())


def hilbert_normalize(G: np.ndarray) -> tuple[float, np.ndarray]:
    c = hilbert_spread(G)
    if c <= C_TOL:
        raise ValueError(f"degenerate kernel: Hilbert-space spread {c:.3g} <= {C_TOL}")
    return c, np.asarray(G, dtype=np.float64) / c


def calibrate(spec: KernelSpec, X_train: np.ndarray, *, rng: np.random.Generator | None = None,
              bandwidth_convention: str = "inverse", bandwidth_subset: int = 2000) -> tuple[KernelSpec, np.ndarray]:
    """Fit sigma (chi2) and c on training histograms; returns the spec and the normalized training Gram."""
    if spec.kind == "chi2" and spec.sigma is None:
        spec = replace(spec, sigma=estimate_bandwidth(X_train, bandwidth_subset, rng, bandwidth_convention))
    raw = raw_kernel_matrix(spec, X_train, X_train)
    c, G = hilbert_normalize(raw)
    return replace(spec, c=c), G


def gram_build(specs: Sequence[KernelSpec], features_rows: Sequence[np.ndarray],
               features_cols: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Weighted sum of normalized kernels, one feature matrix per spec."""
    if len(specs) != len(features_rows):
        raise ValueError("one feature matrix per kernel spec is required")
    features_cols = features_rows if features_cols is None else features_cols
    total = None
    for spec, Xr, Xc in zip(specs, features_rows, features_cols):
        if not spec.calibrated:
            raise ValueError(f"{spec.kind} kernel is not calibrated")
        K = spec.weight * kernel_matrix(spec, Xr, Xc)
        total = K if total is None else total + K
    return total


class GramCache:
    """On-disk cache of raw Gram blocks keyed by feature and spec hashes."""

    def __init__(self, root):
        self.root = Path(root)

    @staticmethod
    def key(spec: KernelSpec, Xr: np.ndarray, Xc: np.ndarray) -> str:
        h = hashlib.sha1()
        for a in (Xr, Xc):
            a = np.ascontiguousarray(a, dtype=np.float64)
            h.update(str(a.shape).encode())
            h.update(a.tobytes())
        h.update(repr((spec.kind, spec.sigma)).encode())
        return h.hexdigest()[:24]

    def raw(self, spec: KernelSpec, Xr: np.ndarray, Xc: np.ndarray) -> np.ndarray:
        path = self.root / f"{spec.kind}-{self.key(spec, Xr, Xc)}.npy"
        if path.exists():
            return np.load(path)
        K = raw_kernel_matrix(spec, Xr, Xc)
        self.root.mkdir(parents=True, exist_ok=True)
        np.save(path, K)
        return K
