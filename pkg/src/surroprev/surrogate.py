"""Log-only prevalence: bucket impression shares times calibrated bucket prevalences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationTable, bucket_impressions
from .datamodel import Bucketization, DomainError, ImpressionLog, ScoreTable, Segment
from .hh import PrevalenceEstimate, ZTest, make_estimate, two_sample_z_test


class EmptyCalibrationBucketError(DomainError):
    """A segment has traffic in a bucket the calibration table cannot estimate."""

    def __init__(self, buckets: list[int], category: str):
        self.buckets = buckets
        names = ", ".join(str(b) for b in buckets)
        super().__init__(
            f"segment has impressions in calibration bucket(s) {names} of {category!r}, "
            "which are empty in the calibration table"
        )


@dataclass(frozen=True, eq=False)
class BucketShares:
    category: str
    segment: str
    buckets: Bucketization
    shares: np.ndarray
    impressions: np.ndarray
    total_impressions: int

    def to_records(self) -> list[dict]:
        b = self.buckets.boundaries
        return [
            {
                "category": self.category,
                "segment": self.segment,
                "bucket": j + 1,
                "lower": b[j],
                "upper": b[j + 1],
                "impressions": int(self.impressions[j]),
                "share": float(self.shares[j]),
            }
            for j in range(self.buckets.n_buckets)
        ]


def shares_from_counts(
    counts, buckets: Bucketization, category: str = "", segment: str = ""
) -> BucketShares:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise DomainError(f"segment {segment!r} has no impressions")
    return BucketShares(category, segment, buckets, counts / total, counts.astype(np.int64), int(total))


def impression_shares(
    log: ImpressionLog,
    scores: ScoreTable,
    buckets: Bucketization,
    category: str,
    segment: Segment | None = None,
    warn_missing_scores: bool = True,
) -> BucketShares:
    """Fraction of the segment's impressions whose item score lies in each bucket."""
    sub = log.segment(segment)
    counts = bucket_impressions(sub, scores, buckets, category, warn=warn_missing_scores)
    name = segment.name if segment is not None else "all"
    return shares_from_counts(counts, buckets, category, name)


def _check_compatible(shares: BucketShares, table: CalibrationTable) -> None:
    if shares.buckets.boundaries != table.buckets.boundaries:
        raise DomainError("shares and calibration table use different bucketizations")
    if shares.category and shares.category != table.category:
        raise DomainError(f"shares are for {shares.category!r}, table for {table.category!r}")
    bad = np.flatnonzero((shares.shares > 0) & (table.empty | np.isnan(table.prevalence)))
    if bad.size:
        raise EmptyCalibrationBucketError([int(b) + 1 for b in bad], table.category)


def surrogate_variance(shares: BucketShares, table: CalibrationTable) -> float:
    """``sum_b c_b**2 * Var(P_b)``, buckets treated as independent."""
    _check_compatible(shares, table)
    used = shares.shares > 0
    v = np.where(used, table.variance, 0.0)
    if np.isnan(v).any():
        return float("nan")
    return float(np.sum(shares.shares[used] ** 2 * v[used]))


def surrogate_prevalence(shares: BucketShares, table: CalibrationTable) -> PrevalenceEstimate:
    _check_compatible(shares, table)
    used = shares.shares > 0
    point = float(np.sum(shares.shares[used] * table.prevalence[used]))
    var = surrogate_variance(shares, table)
    return make_estimate(
        point,
        var,
        shares.total_impressions,
        "surrogate",
        variance_available=not np.isnan(var),
        category=table.category,
        segment=shares.segment,
        meta={
            "calibration_version": table.version,
            "variance_assumption": "independent buckets, exact shares",
        },
    )


def arm_delta(treatment: PrevalenceEstimate, control: PrevalenceEstimate) -> ZTest:
    """Treatment minus control with a two-sided z-test."""
    tv = treatment.meta.get("calibration_version")
    cv = control.meta.get("calibration_version")
    if tv is not None and cv is not None and tv != cv:
        raise DomainError("arm estimates come from different calibration snapshots")
    return two_sample_z_test(treatment, control)


def day_arm_bucket_impressions(
    log: ImpressionLog, scores: ScoreTable, buckets: Bucketization, category: str, warn_missing_scores: bool = True
) -> tuple[list, np.ndarray, np.ndarray]:
    """Impressions per (day, arm, bucket) in one pass.

    Returns the sorted days, the arm vocabulary of ``log`` and a
    ``(days, arms, buckets)`` integer array.
    """
    item_scores = scores.scores_for_log(log, category, warn=warn_missing_scores)
    days, day_idx = np.unique(log.day, return_inverse=True)
    A, B = len(log.arms), buckets.n_buckets
    flat = (day_idx.ravel() * A + log.arm) * B + buckets.assign(item_scores)[log.item]
    counts = np.bincount(flat, weights=log.impressions, minlength=days.size * A * B)
    return [d.astype(object) for d in days], log.arms, counts.reshape(days.size, A, B).astype(np.int64)
