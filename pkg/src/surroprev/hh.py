"""Hansen–Hurwitz estimation of category impressions and prevalence."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
from scipy import stats

from .datamodel import DomainError

Z_95 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class LabeledSampleItem:
    item_id: str
    label: int
    segment_impressions: int
    sampling_probability: float


@dataclass(frozen=True, eq=False)
class LabeledSample:
    """Columnar labeled sample: label ``Z``, segment impressions ``I(S)``, probability ``p``."""

    labels: np.ndarray
    impressions: np.ndarray
    probabilities: np.ndarray
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        z = np.asarray(self.labels, dtype=np.float64)
        i = np.asarray(self.impressions, dtype=np.float64)
        p = np.asarray(self.probabilities, dtype=np.float64)
        if not (z.shape == i.shape == p.shape):
            raise DomainError("labels, impressions and probabilities must align")
        object.__setattr__(self, "labels", z)
        object.__setattr__(self, "impressions", i)
        object.__setattr__(self, "probabilities", p)

    @classmethod
    def from_items(cls, items: Iterable[LabeledSampleItem]) -> "LabeledSample":
        items = list(items)
        return cls(
            np.array([it.label for it in items], dtype=np.float64),
            np.array([it.segment_impressions for it in items], dtype=np.float64),
            np.array([it.sampling_probability for it in items], dtype=np.float64),
            np.array([it.item_id for it in items], dtype=str),
        )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def terms(self) -> np.ndarray:
        """Per-draw contributions ``Z * I(S) / p``."""
        if len(self) == 0:
            raise DomainError("empty sample")
        if (self.probabilities <= 0).any() or np.isnan(self.probabilities).any():
            raise DomainError("sampling probabilities must be positive")
        return self.labels * self.impressions / self.probabilities


@dataclass(frozen=True)
class PrevalenceEstimate:
    point: float
    variance: float
    ci_low: float
    ci_high: float
    n: int
    method: str
    raw_point: float = math.nan
    variance_available: bool = True
    category: str = ""
    segment: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def se(self) -> float:
        return math.sqrt(self.variance) if self.variance_available else math.nan

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "category": self.category,
            "segment": self.segment,
            "point": self.point,
            "raw_point": self.raw_point,
            "variance": self.variance if self.variance_available else None,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n": self.n,
            **self.meta,
        }


def normal_interval(point: float, variance: float) -> tuple[float, float]:
    """``point +/- 1.96 sd`` clamped to ``[0, 1]``."""
    half = Z_95 * math.sqrt(max(variance, 0.0))
    return max(0.0, point - half), min(1.0, point + half)


def make_estimate(
    raw_point: float,
    variance: float,
    n: int,
    method: str,
    *,
    variance_available: bool = True,
    **kw,
) -> PrevalenceEstimate:
    point = min(max(raw_point, 0.0), 1.0)
    if variance_available:
        lo, hi = normal_interval(point, variance)
    else:
        lo, hi = math.nan, math.nan
    meta = dict(kw.pop("meta", {}))
    meta.setdefault("ci_method", "normal")
    return PrevalenceEstimate(
        point=point, variance=variance if variance_available else math.nan,
        ci_low=lo, ci_high=hi, n=n, method=method, raw_point=raw_point,
        variance_available=variance_available, meta=meta, **kw,
    )


def hh_total(sample: LabeledSample) -> float:
    """``(1/n) * sum(Z * I(S) / p)``."""
    return float(sample.terms().mean())


def hh_total_variance(sample: LabeledSample) -> float:
    """With-replacement variance of :func:`hh_total`; NaN when ``n < 2``."""
    y = sample.terms()
    n = y.shape[0]
    if n < 2:
        return math.nan
    return float(((y - y.mean()) ** 2).sum() / (n * (n - 1)))


def hh_variance(sample: LabeledSample, total_segment_impressions: float) -> float:
    if not total_segment_impressions > 0:
        raise DomainError("total segment impressions must be positive")
    return hh_total_variance(sample) / float(total_segment_impressions) ** 2


def hh_prevalence(
    sample: LabeledSample, total_segment_impressions: float, **kw
) -> PrevalenceEstimate:
    if not total_segment_impressions > 0:
        raise DomainError("total segment impressions must be positive")
    raw = hh_total(sample) / float(total_segment_impressions)
    var = hh_variance(sample, total_segment_impressions)
    return make_estimate(
        raw, var, len(sample), "hansen-hurwitz", variance_available=not math.isnan(var), **kw
    )


class ZTest(NamedTuple):
    delta: float
    z: float
    p_value: float
    degenerate: bool = False


def two_sample_z_test(a: PrevalenceEstimate, b: PrevalenceEstimate) -> ZTest:
    """Two-sided normal test of ``a.point - b.point`` with independent variances."""
    if not (a.variance_available and b.variance_available):
        raise DomainError("both estimates need variances for a z-test")
    delta = a.point - b.point
    var = a.variance + b.variance
    if var <= 0:
        if delta == 0:
            return ZTest(0.0, 0.0, 1.0, False)
        return ZTest(delta, math.copysign(math.inf, delta), 0.0, True)
    z = delta / math.sqrt(var)
    return ZTest(delta, z, float(2 * stats.norm.sf(abs(z))), False)
