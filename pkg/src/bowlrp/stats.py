"""Significance tests: Hoeffding p-values, FDR control, quadrat co-localization, log-rank, Spearman enrichment."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import rankdata


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p: float
    n_eff: float | None = None
    log10_p: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p-value {self.p} outside [0, 1]")


def effective_sample_size(n: int, q: float) -> float:
    return 4.0 * q * (1.0 - q) * n


def hoeffding_pvalue(bac: float, n: int, q: float) -> TestResult:
    """exp(-max(bac - 1/2, 0)^2 * 8 q (1-q) n): chance of reaching ``bac`` with an uninformed classifier."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    gap = max(bac - 0.5, 0.0)
    n_eff = effective_sample_size(n, q)
    expo = -gap * gap * 2.0 * n_eff
    return TestResult(bac, math.exp(expo), n_eff, expo / math.log(10.0))


@dataclass
class BhResult:
    pvalues: np.ndarray
    thresholds: np.ndarray
    step_up: np.ndarray
    first_violation: np.ndarray
    alpha: float

    @property
    def significant(self) -> np.ndarray:
        return self.step_up

    @property
    def n_step_up(self) -> int:
        return int(self.step_up.sum())

    @property
    def n_first_violation(self) -> int:
        return int(self.first_violation.sum())


def benjamini_hochberg(pvalues: Sequence[float], alpha: float = 0.05) -> BhResult:
    """Both decision rules on p_(k) <= alpha k / K.

    ``step_up`` rejects the k smallest p-values for the largest k meeting
    the bound; ``first_violation`` counts up from k = 1 and stops at the
    first rank that fails.  ``thresholds`` is indexed by input position.
    """
    p = np.asarray(pvalues, dtype=np.float64)
    K = len(p)
    if K < 1:
        raise ValueError("no p-values")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    order = np.argsort(p, kind="stable")
    bound = alpha * np.arange(1, K + 1) / K
    ok = p[order] <= bound
    n_up = int(np.flatnonzero(ok).max()) + 1 if ok.any() else 0
    n_lit = int(np.argmin(ok)) if not ok.all() else K
    step_up = np.zeros(K, dtype=bool)
    step_up[order[:n_up]] = True
    literal = np.zeros(K, dtype=bool)
    literal[order[:n_lit]] = True
    thresholds = np.empty(K)
    thresholds[order] = bound
    return BhResult(p, thresholds, step_up, literal, alpha)


def monte_carlo_fdr(true_bacs: Sequence[float], permuted_bacs: Sequence[float], t: float) -> float:
    """min(1, P(Bac >= t | permuted labels) / P(Bac >= t | true labels))."""
    true_bacs = np.asarray(true_bacs, dtype=np.float64)
    permuted_bacs = np.asarray(permuted_bacs, dtype=np.float64)
    if true_bacs.size == 0 or permuted_bacs.size == 0:
        raise ValueError("both score lists must be nonempty")
    p_true = float((true_bacs >= t).mean())
    if p_true == 0:
        raise ValueError(f"no discoveries at threshold {t}")
    return min(1.0, float((permuted_bacs >= t).mean()) / p_true)


def permute_labels(values, seed) -> np.ndarray:
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("nothing to permute")
    return np.random.default_rng(seed).permutation(values)


def chi2_sf_1df(x: float) -> tuple[float, float]:
    """Survival function of chi2 with one degree of freedom and its log10."""
    if x < 0:
        raise ValueError("chi2 statistic must be nonnegative")
    s = math.sqrt(x)
    return math.erfc(s / math.sqrt(2.0)), float((math.log(2.0) + log_ndtr(-s)) / math.log(10.0))


@dataclass(frozen=True)
class QuadratTable:
    both: int
    only_morph: int
    only_molec: int
    neither: int
    side: int = 0

    def __post_init__(self):
        if min(self.both, self.only_morph, self.only_molec, self.neither) < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.both + self.only_morph + self.only_molec + self.neither

    def __add__(self, other: "QuadratTable") -> "QuadratTable":
        if self.side and other.side and self.side != other.side:
            raise ValueError("cannot pool tables with different quadrat sizes")
        return QuadratTable(self.both + other.both, self.only_morph + other.only_morph,
                            self.only_molec + other.only_molec, self.neither + other.neither,
                            self.side or other.side)

    @property
    def colocalization_ratio(self) -> float:
        """Odds ratio both*neither / (only_morph*only_molec); zero cells count as 0.5 here only."""
        cells = [c if c > 0 else 0.5 for c in (self.both, self.neither, self.only_morph, self.only_molec)]
        return cells[0] * cells[1] / (cells[2] * cells[3])


def quadrat_presence(field_: np.ndarray, side: int, threshold: float = 0.0, rule: str = "any") -> np.ndarray:
    """Per-quadrat presence grid over non-overlapping side x side quadrats; partial border quadrats are dropped.

    ``rule="any"``: some pixel exceeds ``threshold``; ``rule="mean"``: the quadrat mean does.
    """
    f = np.asarray(field_, dtype=np.float64)
    if f.ndim != 2:
        raise ValueError("presence needs a 2-D field")
    if side < 1:
        raise ValueError("quadrat side must be positive")
    nr, nc = f.shape[0] // side, f.shape[1] // side
    if nr * nc < 4:
        raise ValueError(f"only {nr * nc} quadrats of side {side}; need at least 4")
    q = f[:nr * side, :nc * side].reshape(nr, side, nc, side)
    if rule == "any":
        return (q > threshold).any(axis=(1, 3))
    if rule == "mean":
        return q.mean(axis=(1, 3)) > threshold
    raise ValueError(f"unknown presence rule {rule!r}")


def table_from_presence(pa: np.ndarray, pb: np.ndarray, side: int = 0) -> QuadratTable:
    pa, pb = np.asarray(pa, dtype=bool), np.asarray(pb, dtype=bool)
    if pa.shape != pb.shape:
        raise ValueError("presence grids differ in shape")
    return QuadratTable(int((pa & pb).sum()), int((pa & ~pb).sum()), int((~pa & pb).sum()),
                        int((~pa & ~pb).sum()), side)


def quadrat_table(mask_morph: np.ndarray, mask_molec: np.ndarray, side: int) -> QuadratTable:
    """Presence/absence counts of two binary masks over non-overlapping quadrats."""
    a = np.asarray(mask_morph, dtype=bool)
    b = np.asarray(mask_molec, dtype=bool)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"masks must share a 2-D shape, got {a.shape} and {b.shape}")
    return table_from_presence(quadrat_presence(a, side, 0.5), quadrat_presence(b, side, 0.5), side)


def chi2_from_table(table: QuadratTable) -> TestResult:
    """Pearson chi2 (no continuity correction, 1 df) for the 2x2 table."""
    a, b, c, d = table.both, table.only_morph, table.only_molec, table.neither
    n = a + b + c + d
    margins = (a + b) * (c + d) * (a + c) * (b + d)
    if margins == 0:
        raise ValueError("a marginal total is zero; chi2 undefined")
    stat = n * float(a * d - b * c) ** 2 / float(margins)
    p, lp = chi2_sf_1df(stat)
    return TestResult(stat, p, None, lp, {"r_cl": table.colocalization_ratio, "quadrats": n})


def quadrat_test(mask_morph: np.ndarray, mask_molec: np.ndarray, tile_fraction: float = 0.10,
                 side: int | None = None) -> tuple[QuadratTable, TestResult]:
    """Quadrat co-localization test; the quadrat side defaults to ``tile_fraction`` of the image width."""
    if side is None:
        side = max(1, int(round(tile_fraction * np.shape(mask_morph)[1])))
    table = quadrat_table(mask_morph, mask_molec, side)
    return table, chi2_from_table(table)


@dataclass
class KaplanMeier:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    censor_times: np.ndarray

    def __call__(self, t: float) -> float:
        i = np.searchsorted(self.times, t, side="right")
        return 1.0 if i == 0 else float(self.survival[i - 1])


def kaplan_meier(times, events) -> KaplanMeier:
    """Product-limit estimate S(t) = prod (1 - d_j / n_j) over event times t_j <= t."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    if times.size == 0:
        raise ValueError("no subjects")
    uniq = np.unique(times[events])
    n_risk = np.array([(times >= t).sum() for t in uniq], dtype=np.int64)
    d = np.array([(events & (times == t)).sum() for t in uniq], dtype=np.int64)
    surv = np.cumprod(1.0 - d / n_risk) if uniq.size else np.zeros(0)
    return KaplanMeier(uniq, surv, n_risk, d, np.sort(times[~events]))


@dataclass
class LogRankResult:
    statistic: float
    p: float
    observed: tuple[float, float]
    expected: tuple[float, float]
    curves: dict


def logrank_test(times, events, groups) -> LogRankResult:
    """Two-sample log-rank test; ``groups`` holds two distinct labels."""
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events, dtype=bool)
    groups = np.asarray(groups)
    if not times.shape == events.shape == groups.shape:
        raise ValueError("times, events and groups must have equal length")
    labels = list(dict.fromkeys(np.sort(groups).tolist()))
    if len(labels) != 2:
        raise ValueError(f"log-rank test needs exactly two groups with subjects, got {labels}")
    if not events.any():
        raise ValueError("no events")
    in_a = groups == labels[0]
    o_a = e_a = var = 0.0
    for t in np.unique(times[events]):
        risk = times >= t
        n = risk.sum()
        n_a = (risk & in_a).sum()
        dead = events & (times == t)
        d = dead.sum()
        o_a += (dead & in_a).sum()
        e_a += d * n_a / n
        if n > 1:
            var += d * (n_a / n) * (1 - n_a / n) * (n - d) / (n - 1)
    if var <= 0:
        stat, p = 0.0, 1.0
    else:
        stat = (o_a - e_a) ** 2 / var
        p = chi2_sf_1df(stat)[0]
    total = float(events.sum())
    curves = {g: kaplan_meier(times[groups == g], events[groups == g]) for g in labels}
    return LogRankResult(float(stat), float(p), (o_a, total - o_a), (e_a, total - e_a), curves)


@dataclass
class SpearmanResult:
    r: float
    r_binned: float | None
    p: float
    n_perm: int


def _spearman(a: np.ndarray, b: np.ndarray) -> float:
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float((ra * ra).sum() * (rb * rb).sum()))
    if den == 0:
        raise ValueError("Spearman correlation undefined for constant input")
    return float((ra * rb).sum() / den)


def binned_spearman(indicator, scores, bins: int) -> float:
    """Spearman correlation of bin means after sorting by score into equal-count bins."""
    if bins < 2:
        raise ValueError("binned correlation needs at least 2 bins")
    indicator = np.asarray(indicator, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if bins > len(scores):
        raise ValueError("more bins than samples")
    order = np.argsort(scores, kind="stable")
    parts = np.array_split(order, bins)
    return _spearman(np.array([indicator[p].mean() for p in parts]), np.array([scores[p].mean() for p in parts]))


def spearman_permutation(indicator, scores, n_perm: int = 1000, bins: int | None = None,
                         seed: int = 0) -> SpearmanResult:
    """Spearman r between a 0/1 indicator and scores, with a two-sided permutation p-value."""
    ind = np.asarray(indicator, dtype=np.float64)
    sc = np.asarray(scores, dtype=np.float64)
    if ind.shape != sc.shape or ind.ndim != 1:
        raise ValueError("indicator and scores must be 1-D of equal length")
    if len(np.unique(ind)) != 2:
        raise ValueError("indicator must take two values")
    if np.ptp(sc) == 0:
        raise ValueError("scores are constant")
    r = _spearman(ind, sc)
    rng = np.random.default_rng(seed)
    hits = sum(abs(_spearman(ind, rng.permutation(sc))) >= abs(r) - 1e-12 for _ in range(n_perm))
    rb = binned_spearman(ind, sc, bins) if bins is not None else None
    return SpearmanResult(r, rb, (1 + hits) / (n_perm + 1), n_perm)


def format_value(v) -> str:
    """Locale-free, run-stable text for CSV cells."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def write_csv(path, rows: Sequence[dict], fields: Sequence[str] | None = None) -> None:
    fields = list(fields) if fields is not None else (list(rows[0]) if rows else [])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([format_value(row.get(f, "")) for f in fields])
