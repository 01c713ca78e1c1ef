"""ROC/AUC machinery with DeLong variance, confidence intervals and paired
curve comparison, plus operating-point selection and the four-threshold
severity ROC suite.

AUC is the trapezoid area under the ROC built from all distinct score
thresholds; equal scores collapse into a single threshold step, which makes
the trapezoid area identical to the Mann-Whitney statistic with half credit
for ties. Variances follow the structural-component (midrank) construction
of DeLong, DeLong and Clarke-Pearson.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .records import grade_at_least


@dataclass(frozen=True)
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray
    unit: str = "eye"

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=bool)
        if scores.shape != labels.shape or scores.ndim != 1:
            raise ValueError(
                f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-d")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    @property
    def n_positive(self):
        return int(self.labels.sum())

    @property
    def n_negative(self):
        return int((~self.labels).sum())

    def require_both_classes(self):
        if self.n_positive == 0 or self.n_negative == 0:
            raise ValueError(
                f"need both classes, got {self.n_positive} positive / "
                f"{self.n_negative} negative")


@dataclass(frozen=True)
class RocCurve:
    points: tuple               # ((fpr, tpr), ...) from (0, 0) to (1, 1)
    auc: float
    delong_variance: float
    ci95: tuple


def roc_points(s: ScoredSet):
    """ROC points over distinct thresholds, descending, from (0,0) to (1,1)."""
    s.require_both_classes()
    order = np.argsort(-s.scores, kind="stable")
    scores = s.scores[order]
    labels = s.labels[order]
    m = s.n_positive
    n = s.n_negative
    # group equal scores into one step
    boundaries = np.flatnonzero(np.diff(scores)) + 1
    starts = np.r_[0, boundaries]
    tp = np.concatenate([[0], np.add.reduceat(labels.astype(np.int64), starts).cumsum()])
    fp = np.concatenate([[0], np.add.reduceat((~labels).astype(np.int64), starts).cumsum()])
    return np.stack([fp / n, tp / m], axis=1)


def auc(s: ScoredSet) -> float:
    pts = roc_points(s)
    return float(np.trapezoid(pts[:, 1], pts[:, 0]))


def _midrank(x):
    order = np.argsort(x, kind="stable")
    z = x[order]
    n = len(x)
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j < n and z[j] == z[i]:
            j += 1
        ranks[i:j] = 0.5 * (i + j - 1) + 1
        i = j
    out = np.empty(n, dtype=np.float64)
    out[order] = ranks
    return out


def delong_components(s: ScoredSet):
    """Structural components (V10 over positives, V01 over negatives) and AUC."""
    s.require_both_classes()
    pos = s.scores[s.labels]
    neg = s.scores[~s.labels]
    m, n = len(pos), len(neg)
    tz = _midrank(np.concatenate([pos, neg]))
    tx = _midrank(pos)
    ty = _midrank(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    theta = tz[:m].sum() / (m * n) - (m + 1) / (2.0 * n)
    return v10, v01, float(theta)


def delong_variance(s: ScoredSet) -> float:
    v10, v01, _ = delong_components(s)
    if len(v10) < 2 or len(v01) < 2:
        raise ValueError("DeLong variance needs at least 2 cases per class")
    return float(v10.var(ddof=1) / len(v10) + v01.var(ddof=1) / len(v01))


def delong_ci(s: ScoredSet, level=0.95):
    """(variance, (lo, hi)) Wald interval on the raw AUC scale, clipped to [0,1]."""
    if not 0 < level < 1:
        raise ValueError(f"level must be in (0, 1), got {level}")
    var = delong_variance(s)
    a = auc(s)
    z = norm.ppf(0.5 + level / 2.0)
    half = z * np.sqrt(var)
    return var, (float(np.clip(a - half, 0.0, 1.0)), float(np.clip(a + half, 0.0, 1.0)))


def delong_paired_test(a: ScoredSet, b: ScoredSet):
    """Two-sided z-test for the AUC difference of two score sets on the same cases."""
    if a.scores.shape != b.scores.shape or not np.array_equal(a.labels, b.labels):
        raise ValueError("paired test requires identical cases and labels")
    v10a, v01a, ta = delong_components(a)
    v10b, v01b, tb = delong_components(b)
    m, n = len(v10a), len(v01a)
    if m < 2 or n < 2:
        raise ValueError("paired test needs at least 2 cases per class")
    var_a = v10a.var(ddof=1) / m + v01a.var(ddof=1) / n
    var_b = v10b.var(ddof=1) / m + v01b.var(ddof=1) / n
    cov = (np.cov(v10a, v10b, ddof=1)[0, 1] / m
           + np.cov(v01a, v01b, ddof=1)[0, 1] / n)
    denom = var_a + var_b - 2.0 * cov
    diff = ta - tb
    if denom <= 0:
        z = 0.0 if abs(diff) < 1e-12 else np.sign(diff) * np.inf
    else:
        z = diff / np.sqrt(denom)
    p = float(2.0 * norm.sf(abs(z)))
    return float(z), p


def roc_curve_with_ci(s: ScoredSet, level=0.95) -> RocCurve:
    var, ci = delong_ci(s, level)
    return RocCurve(points=tuple(map(tuple, roc_points(s))), auc=auc(s),
                    delong_variance=var, ci95=ci)


def format_auc_ci(auc_value, ci) -> str:
    return f"{auc_value:.3f} (95% CI: {ci[0]:.3f}-{ci[1]:.3f})"


def operating_point(s: ScoredSet, sensitivity=None, specificity=None):
    """Threshold meeting a sensitivity or specificity constraint.

    Decision rule is score >= threshold. A sensitivity constraint picks the
    largest threshold still meeting it (maximizing specificity); a
    specificity constraint picks the smallest threshold meeting it
    (maximizing sensitivity). Returns (threshold, sensitivity, specificity).
    """
    if (sensitivity is None) == (specificity is None):
        raise ValueError("specify exactly one of sensitivity/specificity")
    s.require_both_classes()
    target = sensitivity if sensitivity is not None else specificity
    if not 0.0 <= target <= 1.0:
        raise ValueError(f"constraint must lie in [0, 1], got {target}")

    thresholds = np.unique(s.scores)[::-1]          # descending
    thresholds = np.concatenate([[thresholds[0] + 1.0], thresholds])
    pos = np.sort(s.scores[s.labels])
    neg = np.sort(s.scores[~s.labels])
    m, n = len(pos), len(neg)
    sens = 1.0 - np.searchsorted(pos, thresholds, side="left") / m
    spec = np.searchsorted(neg, thresholds, side="left") / n

    if sensitivity is not None:
        feasible = np.flatnonzero(sens >= target - 1e-12)
        if len(feasible) == 0:
            raise ValueError(
                f"sensitivity {target} unachievable; closest achievable is "
                f"{sens.max():.6f}")
        i = feasible[0]                             # largest threshold
    else:
        feasible = np.flatnonzero(spec >= target - 1e-12)
        if len(feasible) == 0:
            raise ValueError(
                f"specificity {target} unachievable; closest achievable is "
                f"{spec.max():.6f}")
        i = feasible[-1]                            # smallest threshold
    return float(thresholds[i]), float(sens[i]), float(spec[i])


def severity_roc_suite(grade_ge_scores, grades, level=0.95):
    """One ROC curve per binarization grade >= t, t in 1..4.

    ``grade_ge_scores`` is (N, 4): per-eye scores for thresholds 1..4.
    Binarizations with a single class are omitted with a warning.
    """
    scores = np.asarray(grade_ge_scores, dtype=np.float64)
    grades = np.asarray(grades)
    if scores.ndim != 2 or scores.shape[1] != 4 or scores.shape[0] != len(grades):
        raise ValueError(f"expected (N, 4) scores matching {len(grades)} grades, "
                         f"got {scores.shape}")
    curves = {}
    for t in (1, 2, 3, 4):
        labels = np.array([grade_at_least(int(g), t) for g in grades])
        if labels.all() or not labels.any():
            warnings.warn(f"severity binarization grade>={t} has one class only; "
                          f"curve omitted")
            continue
        try:
            curves[t] = roc_curve_with_ci(ScoredSet(scores[:, t - 1], labels), level)
        except ValueError as exc:  # a class too small for a DeLong variance
            warnings.warn(f"severity binarization grade>={t} degenerate "
                          f"({exc}); curve omitted")
    return curves
