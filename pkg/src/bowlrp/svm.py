"""Dual kernel SVM (SMO), label thresholding, balanced accuracy and cross-validation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .features import quantile_estimate
from .kernels import KernelSpec, hilbert_normalize, kernel_matrix

log = logging.getLogger(__name__)

Q_GRID = tuple(round(0.1 * i, 1) for i in range(1, 10))
C_GRID = tuple(10 ** (p / 2) for p in range(-2, 3))
MAX_UPDATES = 10 ** 7


class SolverError(RuntimeError):
    pass


def threshold_labels(values: Sequence[float], q: float) -> np.ndarray:
    """+1 for values strictly above the q-quantile, -1 otherwise (ties go low)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values to threshold")
    t = quantile_estimate(q, np.sort(v))
    y = np.where(v > t, 1, -1)
    if (y == 1).all() or (y == -1).all():
        raise ValueError(f"threshold at q={q} leaves one class empty")
    return y


def _labels_pm1(labels) -> np.ndarray:
    y = np.asarray(labels)
    if not np.isin(y, (-1, 1)).all():
        raise ValueError("labels must be +1/-1")
    return y.astype(np.int64)


def predict_sign(scores) -> np.ndarray:
    """sign with sign(0) = -1"""
    return np.where(np.asarray(scores) > 0, 1, -1)


def balanced_accuracy(scores, labels) -> float:
    y = _labels_pm1(labels)
    pos, neg = y == 1, y == -1
    if not pos.any() or not neg.any():
        raise ValueError("balanced accuracy needs both classes")
    pred = predict_sign(scores)
    return 0.5 * (float((pred[pos] == 1).mean()) + float((pred[neg] == -1).mean()))


@dataclass
class TrainedSvm:
    alpha: np.ndarray
    y: np.ndarray
    b: float
    C: float
    kkt_gap: float
    n_updates: int
    objective: float

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.alpha > 0)

    @property
    def dual_coef(self) -> np.ndarray:
        return self.alpha * self.y


def dual_objective(alpha, y, K) -> float:
    v = alpha * y
    return float(alpha.sum() - 0.5 * v @ K @ v)


def smo_train(K: np.ndarray, labels, C: float, tol: float = 1e-3, max_updates: int = MAX_UPDATES) -> TrainedSvm:
    """Maximize sum(a) - 1/2 (a*y)' K (a*y) s.t. 0 <= a <= C, y'a = 0.

    Each step moves the maximal KKT-violating pair analytically; training stops
    once the violation m(a) - M(a) drops to ``tol``.
    """
    K = np.asarray(K, dtype=np.float64)
    y = _labels_pm1(labels)
    n = len(y)
    if K.shape != (n, n):
        raise ValueError(f"Gram matrix shape {K.shape} does not match {n} labels")
    if (y == 1).all() or (y == -1).all():
        raise ValueError("SVM training needs both classes")
    if C <= 0:
        raise ValueError("C must be positive")
    yf = y.astype(np.float64)
    diag = np.diag(K).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a, Q = yy' * K
    pos = y == 1
    updates = 0
    while True:
        yg = -yf * grad
        up = np.where(pos, alpha < C, alpha > 0)
        low = np.where(pos, alpha > 0, alpha < C)
        i = int(np.argmax(np.where(up, yg, -np.inf)))
        j = int(np.argmin(np.where(low, yg, np.inf)))
        m, M = yg[i], yg[j]
        gap = m - M
        if gap <= tol:
            break
        if updates >= max_updates:
            raise SolverError(f"SMO did not converge after {updates} updates (KKT gap {gap:.3g}, tol {tol})")
        # a_i += y_i t, a_j -= y_j t keeps y'a fixed
        curv = diag[i] + diag[j] - 2.0 * K[i, j]
        t = gap / (curv if curv > 1e-12 else 1e-12)
        lim_i = C - alpha[i] if pos[i] else alpha[i]
        lim_j = alpha[j] if pos[j] else C - alpha[j]
        t = min(t, lim_i, lim_j)
        alpha[i] += yf[i] * t
        alpha[j] -= yf[j] * t
        for k in (i, j):
            if alpha[k] < 1e-12 * C:
                alpha[k] = 0.0
            elif alpha[k] > C * (1 - 1e-12):
                alpha[k] = C
        grad += yf * t * (K[:, i] - K[:, j])
        updates += 1

    free = (alpha > 0) & (alpha < C)
    b = float(yg[free].mean()) if free.any() else float(0.5 * (m + M))
    return TrainedSvm(alpha, y, b, float(C), float(max(gap, 0.0)), updates, dual_objective(alpha, y, K))


def decision_value(model: TrainedSvm, kernel_rows) -> np.ndarray | float:
    """f(x) = b + sum_i a_i y_i k(x_i, x) for one row (n_train,) or many (m, n_train)."""
    rows = np.asarray(kernel_rows, dtype=np.float64)
    if rows.shape[-1] != len(model.alpha):
        raise ValueError(f"kernel row length {rows.shape[-1]} does not match {len(model.alpha)} training samples")
    f = model.b + rows @ model.dual_coef
    return float(f) if rows.ndim == 1 else f


def primal_objective(model: TrainedSvm, K) -> float:
    f = decision_value(model, K)
    hinge = np.maximum(0.0, 1.0 - model.y * f)
    v = model.dual_coef
    return float(0.5 * v @ K @ v + model.C * hinge.sum())


@dataclass
class KernelMachine:
    """Trained SVM bundled with its calibrated kernels and support-vector histograms."""

    specs: list[KernelSpec]
    sv_features: list[np.ndarray]
    coef: np.ndarray
    b: float
    C: float = 1.0

    @classmethod
    def from_svm(cls, model: TrainedSvm, specs: Sequence[KernelSpec], train_features: Sequence[np.ndarray]):
        sv = model.support
        return cls(list(specs), [np.asarray(X)[sv] for X in train_features], model.dual_coef[sv], model.b, model.C)

    @property
    def betas(self) -> np.ndarray:
        return np.array([s.weight for s in self.specs])

    def kernel_rows(self, features: Sequence[np.ndarray]) -> np.ndarray:
        rows = None
        for spec, sv, X in zip(self.specs, self.sv_features, features):
            K = spec.weight * kernel_matrix(spec, np.atleast_2d(X), sv)
            rows = K if rows is None else rows + K
        return rows

    def decision(self, features: Sequence[np.ndarray]) -> np.ndarray:
        """Scores for histograms given per kernel as (m, D_u) arrays."""
        if len(features) != len(self.specs):
            raise ValueError("one feature matrix per kernel is required")
        return self.b + self.kernel_rows(features) @ self.coef

    def __call__(self, x: Sequence[np.ndarray]) -> float:
        if isinstance(x, np.ndarray) and x.ndim == 1:
            x = [x]
        return float(self.decision([np.asarray(v)[None, :] for v in x])[0])


def stratified_folds(labels, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample; each class is shuffled then dealt round-robin."""
    y = np.asarray(labels)
    if len(y) < n_folds:
        raise ValueError(f"{len(y)} samples cannot fill {n_folds} folds")
    fold = np.empty(len(y), dtype=np.int64)
    offset = 0
    for cls in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == cls))
        fold[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset += len(idx)
    return fold


def cv_scores(K: np.ndarray, y, C: float, folds: np.ndarray, tol: float = 1e-3) -> np.ndarray:
    """Out-of-fold decision values on a precomputed Gram matrix."""
    y = _labels_pm1(y)
    scores = np.empty(len(y))
    for f in np.unique(folds):
        te = folds == f
        tr = ~te
        model = smo_train(K[np.ix_(tr, tr)], y[tr], C, tol)
        scores[te] = decision_value(model, K[np.ix_(te, tr)])
    return scores


def select_C(K: np.ndarray, y, C_grid: Sequence[float], n_folds: int, rng: np.random.Generator,
             criterion: str = "balanced", tol: float = 1e-3) -> tuple[float, list[float]]:
    """Regularization constant with the lowest cross-validated error (first on ties)."""
    y = _labels_pm1(y)
    folds = stratified_folds(y, n_folds, rng)
    errors = []
    for C in C_grid:
        s = cv_scores(K, y, C, folds, tol)
        if criterion == "balanced":
            errors.append(1.0 - balanced_accuracy(s, y))
        elif criterion == "error":
            errors.append(float((predict_sign(s) != y).mean()))
        else:
            raise ValueError(f"unknown selection criterion {criterion!r}")
    return float(C_grid[int(np.argmin(errors))]), errors


def _normalized_blocks(raw_grams: Sequence[np.ndarray], betas: Sequence[float], tr: np.ndarray, te: np.ndarray):
    Ktr = Kte = 0.0
    for R, beta in zip(raw_grams, betas):
        c, G = hilbert_normalize(R[np.ix_(tr, tr)])
        Ktr = Ktr + beta * G
        Kte = Kte + beta * R[np.ix_(te, tr)] / c
    return Ktr, Kte


@dataclass
class CvReport:
    target: str
    q: float
    fold_bac: list[float]
    fold_C: list[float]
    scores: np.ndarray
    labels: np.ndarray
    fold_of: np.ndarray
    train_sets: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def mean_bac(self) -> float:
        return float(np.mean(self.fold_bac))

    @property
    def n_pos(self) -> int:
        return int((self.labels == 1).sum())

    @property
    def n_neg(self) -> int:
        return int((self.labels == -1).sum())

    def csv_rows(self) -> list[dict]:
        return [{"target": self.target, "quantile": self.q, "fold": f, "C": c, "bac": b}
                for f, (c, b) in enumerate(zip(self.fold_C, self.fold_bac))]


@dataclass
class NestedCvResult:
    target: str
    reports: dict[float, CvReport]

    @property
    def best(self) -> CvReport:
        # reporting convention: best quantile on test folds, optimistically biased
        return max(self.reports.values(), key=lambda r: r.mean_bac)


def nested_cv(raw_grams: Sequence[np.ndarray] | np.ndarray, values, q_grid: Sequence[float] = Q_GRID,
              outer: int = 10, inner: int = 9, C_grid: Sequence[float] = C_GRID, seed: int = 0,
              betas: Sequence[float] | None = None, target: str = "target", criterion: str = "balanced",
              tol: float = 1e-3, trainer: Callable | None = None) -> NestedCvResult:
    """Stratified outer CV with C chosen by an inner CV on each outer training part.

    Kernels are passed unnormalized; each outer fold rescales them by the
    Hilbert spread of its own training block.
    """
    if isinstance(raw_grams, np.ndarray) and raw_grams.ndim == 2:
        raw_grams = [raw_grams]
    betas = [1.0] * len(raw_grams) if betas is None else list(betas)
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < outer:
        raise ValueError(f"{n} samples cannot fill {outer} outer folds")
    if not q_grid:
        raise ValueError("empty quantile grid")
    train = trainer or smo_train
    reports = {}
    for qi, q in enumerate(q_grid):
        y = threshold_labels(values, q)
        rng = np.random.default_rng([seed, qi])
        if min((y == 1).sum(), (y == -1).sum()) < outer:
            raise ValueError(f"q={q}: a class has fewer samples than outer folds")
        folds = stratified_folds(y, outer, rng)
        scores = np.empty(n)
        fold_bac, fold_C, train_sets = [], [], []
        for f in range(outer):
            te = np.flatnonzero(folds == f)
            tr = np.flatnonzero(folds != f)
            assert np.intersect1d(tr, te).size == 0
            Ktr, Kte = _normalized_blocks(raw_grams, betas, tr, te)
            C, _ = select_C(Ktr, y[tr], C_grid, inner, rng, criterion, tol)
            model = train(Ktr, y[tr], C, tol)
            scores[te] = decision_value(model, Kte)
            fold_bac.append(balanced_accuracy(scores[te], y[te]))
            fold_C.append(C)
            train_sets.append(tr)
        reports[q] = CvReport(target, q, fold_bac, fold_C, scores, y, folds, train_sets)
    return NestedCvResult(target, reports)


@dataclass(frozen=True)
class TailAccuracy:
    acc_neg: float
    n_neg: int
    acc_pos: float
    n_pos: int


def tail_accuracy(scores, labels, t: float) -> TailAccuracy:
    """Accuracy on {f <= -t} (predicted -1) and on {f >= t} (predicted +1); NaN for empty tails."""
    if t < 0:
        raise ValueError("tail threshold must be nonnegative")
    f = np.asarray(scores, dtype=np.float64)
    y = _labels_pm1(labels)
    neg, pos = f <= -t, f >= t
    acc_neg = float((y[neg] == -1).mean()) if neg.any() else math.nan
    acc_pos = float((y[pos] == 1).mean()) if pos.any() else math.nan
    return TailAccuracy(acc_neg, int(neg.sum()), acc_pos, int(pos.sum()))


def survival_labels(times, censored, cutoff: float = 60.0) -> tuple[np.ndarray, np.ndarray]:
    """Labels of uncensored samples (+1 if survival exceeds ``cutoff``) and their indices."""
    times = np.asarray(times, dtype=np.float64)
    censored = np.asarray(censored, dtype=bool)
    idx = np.flatnonzero(~censored)
    if idx.size == 0:
        raise ValueError("no uncensored samples")
    y = np.where(times[idx] > cutoff, 1, -1)
    if (y == 1).all() or (y == -1).all():
        raise ValueError("uncensored samples fall into a single survival class")
    return y, idx


@dataclass
class SurvivalCv:
    scores: np.ndarray
    labels: np.ndarray
    uncensored: np.ndarray
    fold_of: np.ndarray
    bac: float


def survival_cv(raw_gram: np.ndarray, times, censored, cutoff: float = 60.0, n_folds: int = 10,
                C: float = 1.0, seed: int = 0, tol: float = 1e-3) -> SurvivalCv:
    """Out-of-fold scores for uncensored samples; each censored sample is scored by one random fold model."""
    times = np.asarray(times, dtype=np.float64)
    censored = np.asarray(censored, dtype=bool)
    y, unc = survival_labels(times, censored, cutoff)
    cen = np.flatnonzero(censored)
    rng = np.random.default_rng(seed)
    folds_unc = stratified_folds(y, n_folds, rng)
    fold_of = np.empty(len(times), dtype=np.int64)
    fold_of[unc] = folds_unc
    fold_of[cen] = rng.integers(n_folds, size=len(cen))
    scores = np.empty(len(times))
    for f in range(n_folds):
        tr = unc[folds_unc != f]
        te = np.flatnonzero(fold_of == f)
        assert not np.isin(tr, cen).any()
        Ktr, Kte = _normalized_blocks([raw_gram], [1.0], tr, te)
        model = smo_train(Ktr, y[folds_unc != f], C, tol)
        scores[te] = decision_value(model, Kte)
    return SurvivalCv(scores, y, unc, fold_of, balanced_accuracy(scores[unc], y))
