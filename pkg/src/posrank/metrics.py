"""Ranking metrics: AUC and its impression-weighted per-position average.

The per-position average scores relevance ranking quality at each display
slot separately, so adding any constant to all scores at one position
leaves it unchanged. Positions where all labels agree have no defined AUC
and are dropped from both the numerator and the denominator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UndefinedMetricError, UsageError


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Rank-sum (Mann-Whitney) computation, ties credited 0.5. O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise UsageError(f"auc: scores/labels must be equal-length vectors, got {s.shape}/{y.shape}")
    if not np.all(np.isfinite(s)):
        raise UsageError("auc: scores must be finite")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise UsageError("auc: labels must be 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc undefined: only one class present")

    order = np.argsort(s, kind="stable")
    sorted_s = s[order]
    # midranks: average 1-based rank within each tie group
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_oracle(scores, labels) -> float:
    """Explicit O(n^2) pair counting; the independent verifier for `auc`."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("auc undefined: only one class present")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


@dataclass
class PositionAuc:
    position: int
    impressions: int
    auc: float | None
    included: bool


@dataclass
class PaucReport:
    """Per-position AUC breakdown plus the impression-weighted average."""

    pauc: float
    overall_auc: float | None
    positions: list[PositionAuc] = field(default_factory=list)

    def to_tsv(self) -> str:
        lines = ["k\tn\tauc_k\tincluded"]
        for row in self.positions:
            auc_txt = f"{row.auc:.6f}" if row.auc is not None else "NA"
            lines.append(f"{row.position}\t{row.impressions}\t{auc_txt}\t{int(row.included)}")
        overall = f"{self.overall_auc:.6f}" if self.overall_auc is not None else "NA"
        lines.append(f"# pauc={self.pauc:.6f}\toverall_auc={overall}")
        return "\n".join(lines) + "\n"


def pauc(scores, labels, positions) -> PaucReport:
    """Impression-weighted mean of per-position AUCs.

    Groups impressions by display position; positions with a single label
    class are flagged and excluded from both sums.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    k = np.asarray(positions)
    if not (s.shape == y.shape == k.shape) or s.ndim != 1 or s.size == 0:
        raise UsageError("pauc: scores, labels and positions must be equal-length non-empty vectors")

    rows: list[PositionAuc] = []
    weighted = 0.0
    total = 0
    for pos in sorted(set(int(v) for v in k)):
        mask = k == pos
        n = int(mask.sum())
        try:
            a = auc(s[mask], y[mask])
        except UndefinedMetricError:
            rows.append(PositionAuc(pos, n, None, False))
            continue
        rows.append(PositionAuc(pos, n, a, True))
        weighted += n * a
        total += n
    if total == 0:
        raise UndefinedMetricError("pauc undefined: every position has a single label class")

    try:
        overall = auc(s, y)
    except UndefinedMetricError:
        overall = None
    return PaucReport(pauc=weighted / total, overall_auc=overall, positions=rows)
