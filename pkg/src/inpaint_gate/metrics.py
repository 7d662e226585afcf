"""Correlation and filtering metrics over labeled scores.

Scores come with binary labels (1 = human pass). "Filtered" means the gate
predicts fail: score < threshold. Gate rates are kept as exact rationals
until report time so the defining count identities hold without rounding;
0/0 ratios surface as None instead of a fabricated 0 or 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

LabeledScore = tuple[float, int]


def _columns(x, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{what} must be 1-d")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite values")
    return arr


def _check_xy(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = _columns(x, "x")
    ya = _columns(y, "y")
    if len(xa) != len(ya):
        raise ValueError(f"length mismatch: {len(xa)} vs {len(ya)}")
    if len(xa) < 2:
        raise ValueError("need at least 2 points")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise ValueError("correlation is undefined for constant input (zero variance)")
    return xa, ya


def plcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson linear correlation coefficient."""
    xa, ya = _check_xy(x, y)
    dx = xa - xa.mean()
    dy = ya - ya.mean()
    return float((dx * dy).sum() / np.sqrt((dx * dx).sum() * (dy * dy).sum()))


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their rank range."""
    xa = _columns(x, "x")
    order = np.argsort(xa, kind="stable")
    ranks = np.empty(len(xa), dtype=np.float64)
    i = 0
    while i < len(xa):
        j = i
        while j + 1 < len(xa) and xa[order[j + 1]] == xa[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    xa, ya = _check_xy(x, y)
    return plcc(average_ranks(xa), average_ranks(ya))


# -------------------------------------------------------- filter counts


@dataclass
class FilterCounts:
    n_filtered: int
    n_filtered_low: int
    n_orig_low: int
    n_kept_high: int
    n_orig_high: int


@dataclass
class GateRates:
    """Filter precision/recalls as exact rationals; None when undefined (0/0)."""

    pb: Fraction | None
    rb: Fraction | None
    rg: Fraction | None

    def to_floats(self) -> dict[str, float | None]:
        return {
            "pb": None if self.pb is None else float(self.pb),
            "rb": None if self.rb is None else float(self.rb),
            "rg": None if self.rg is None else float(self.rg),
        }


def _check_entries(entries: Sequence[LabeledScore]) -> None:
    for score, label in entries:
        if not np.isfinite(score):
            raise ValueError(f"non-finite score {score}")
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")


def filter_counts(entries: Sequence[LabeledScore], theta: float) -> FilterCounts:
    """Tally the filter decision (score < theta means filtered) by label."""
    _check_entries(entries)
    n_filtered = sum(1 for s, _ in entries if s < theta)
    n_filtered_low = sum(1 for s, lab in entries if s < theta and lab == 0)
    n_orig_low = sum(1 for _, lab in entries if lab == 0)
    n_orig_high = len(entries) - n_orig_low
    n_kept_high = sum(1 for s, lab in entries if s >= theta and lab == 1)
    return FilterCounts(
        n_filtered=n_filtered,
        n_filtered_low=n_filtered_low,
        n_orig_low=n_orig_low,
        n_kept_high=n_kept_high,
        n_orig_high=n_orig_high,
    )


def pb_rb_rg(counts: FilterCounts) -> GateRates:
    """Filter precision (Pb), low-quality recall (Rb), high-quality retention (Rg)."""
    if counts.n_filtered_low > counts.n_filtered or counts.n_filtered_low > counts.n_orig_low:
        raise ValueError(f"inconsistent counts: {counts}")
    pb = Fraction(counts.n_filtered_low, counts.n_filtered) if counts.n_filtered else None
    rb = Fraction(counts.n_filtered_low, counts.n_orig_low) if counts.n_orig_low else None
    rg = Fraction(counts.n_kept_high, counts.n_orig_high) if counts.n_orig_high else None
    return GateRates(pb=pb, rb=rb, rg=rg)


# --------------------------------------------------------------- curves


def _sweep_groups(entries: Sequence[LabeledScore], positive: str):
    """Tie-grouped (pos_count, neg_count) in descending score order.

    positive="high" treats label 1 as the positive class; positive="low"
    negates scores so that "higher score = more positive" holds uniformly.
    """
    if positive not in ("low", "high"):
        raise ValueError(f"positive must be 'low' or 'high', got {positive!r}")
    _check_entries(entries)
    if positive == "low":
        transformed = [(-s, 1 - lab) for s, lab in entries]
    else:
        transformed = [(s, lab) for s, lab in entries]
    n_pos = sum(lab for _, lab in transformed)
    n_neg = len(transformed) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present to sweep a curve")
    transformed.sort(key=lambda e: -e[0])
    groups = []
    i = 0
    while i < len(transformed):
        j = i
        pos = 0
        while j < len(transformed) and transformed[j][0] == transformed[i][0]:
            pos += transformed[j][1]
            j += 1
        groups.append((pos, (j - i) - pos))
        i = j
    return groups, n_pos, n_neg


def pr_curve(entries: Sequence[LabeledScore], positive: str = "low") -> list[tuple[float, float]]:
    """(recall, precision) points swept over distinct scores.

    Includes the empty-prediction sentinel (0, 1) by convention; recall is
    non-decreasing along the sweep; consecutive duplicate points collapse.
    """
    groups, n_pos, _ = _sweep_groups(entries, positive)
    points = [(0.0, 1.0)]
    tp = 0
    fp = 0
    for pos, neg in groups:
        tp += pos
        fp += neg
        point = (tp / n_pos, tp / (tp + fp))
        if point != points[-1]:
            points.append(point)
    return points


def roc_curve(
    entries: Sequence[LabeledScore], positive: str = "low"
) -> tuple[list[tuple[float, float]], float]:
    """(fpr, tpr) points plus trapezoidal AUC.

    TP/FP run as integers and the trapezoid area is accumulated as an
    integer numerator over 2*P*N, so the AUC equals the tie-aware pairwise
    concordance ratio exactly.
    """
    groups, n_pos, n_neg = _sweep_groups(entries, positive)
    points = [(0.0, 0.0)]
    tp = 0
    fp = 0
    area2 = 0  # accumulates 2 * area * P * N
    for pos, neg in groups:
        area2 += neg * (2 * tp + pos)
        tp += pos
        fp += neg
        point = (fp / n_neg, tp / n_pos)
        if point != points[-1]:
            points.append(point)
    auc = float(Fraction(area2, 2 * n_pos * n_neg))
    return points, auc
