"""Day-level delta aggregation: empirical intervals and the exact sign test."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .datamodel import DomainError


@dataclass(frozen=True, eq=False)
class DailyDeltaSeries:
    """Treatment minus control per day, all under one calibration snapshot."""

    days: tuple[date, ...]
    deltas: np.ndarray
    calibration_version: str | None = None
    category: str = ""
    experiment: str = ""
    baseline: float | None = None

    def __post_init__(self):
        d = np.asarray(self.deltas, dtype=np.float64)
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "days", tuple(self.days))
        if len(self.days) != d.shape[0]:
            raise DomainError("one delta per day")
        if any(not (a < b) for a, b in zip(self.days, self.days[1:])):
            raise DomainError("days must be strictly increasing")
        if np.isnan(d).any():
            raise DomainError("deltas must be finite")

    def __len__(self) -> int:
        return int(self.deltas.shape[0])

    @classmethod
    def from_records(
        cls, records: Sequence[dict], experiment: str = "", category: str | None = None
    ) -> "DailyDeltaSeries":
        """Build from per-day records carrying ``day``, ``delta`` and ``calibration_version``."""
        versions = {r.get("calibration_version") for r in records}
        if len(versions) > 1:
            raise DomainError(f"daily deltas mix calibration versions: {sorted(map(str, versions))}")
        cats = {r.get("category", "") for r in records}
        if category is None:
            if len(cats) > 1:
                raise DomainError("daily deltas mix categories")
            category = cats.pop() if cats else ""
        rows = sorted(records, key=lambda r: r["day"])
        baseline = None
        ctrl = [r["control_point"] for r in rows if r.get("control_point") is not None]
        if ctrl:
            baseline = float(np.mean(ctrl))
        return cls(
            tuple(date.fromisoformat(r["day"]) if isinstance(r["day"], str) else r["day"] for r in rows),
            np.array([r["delta"] for r in rows], dtype=np.float64),
            versions.pop() if versions else None,
            category,
            experiment,
            baseline,
        )


def empirical_ci(series: DailyDeltaSeries, level: float = 0.95) -> tuple[float, float]:
    """Central ``level`` interval from linearly interpolated order statistics."""
    if len(series) < 2:
        raise DomainError("an empirical interval needs at least two days")
    if not (0.0 < level <= 1.0):
        raise DomainError("level must lie in (0, 1]")
    lo, hi = np.quantile(series.deltas, [(1 - level) / 2, (1 + level) / 2], method="linear")
    return float(lo), float(hi)


class SignTest(NamedTuple):
    n_pos: int
    n_neg: int
    n_zero: int
    p_value: float


def sign_test(series: DailyDeltaSeries) -> SignTest:
    """Two-sided exact binomial sign test; zero deltas are dropped."""
    d = series.deltas
    n_pos = int((d > 0).sum())
    n_neg = int((d < 0).sum())
    n_zero = int((d == 0).sum())
    m = n_pos + n_neg
    if m == 0:
        return SignTest(n_pos, n_neg, n_zero, 1.0)
    tail = float(stats.binom.cdf(min(n_pos, n_neg), m, 0.5))
    return SignTest(n_pos, n_neg, n_zero, min(1.0, 2 * min(tail, 0.5)))


@dataclass(frozen=True)
class DeltaReport:
    experiment: str
    category: str
    n_days: int
    mean_delta: float
    relative_delta: float | None
    ci_low: float | None
    ci_high: float | None
    ci_level: float
    sign: SignTest
    alpha: float
    significant: bool
    calibration_version: str | None

    def to_record(self) -> dict:
        return {
            "experiment": self.experiment,
            "category": self.category,
            "n_days": self.n_days,
            "mean_delta": self.mean_delta,
            "relative_delta": self.relative_delta,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "ci_level": self.ci_level,
            "n_pos": self.sign.n_pos,
            "n_neg": self.sign.n_neg,
            "n_zero": self.sign.n_zero,
            "p_value": self.sign.p_value,
            "alpha": self.alpha,
            "significant": self.significant,
            "calibration_version": self.calibration_version,
            "test": "exact two-sided sign test",
        }


def decide(
    series: DailyDeltaSeries,
    alpha: float = 0.05,
    baseline: float | None = None,
    level: float = 0.95,
) -> DeltaReport:
    """Sign-test decision plus descriptive summary of the daily deltas."""
    if len(series) < 1:
        raise DomainError("empty delta series")
    st = sign_test(series)
    mean = float(series.deltas.mean())
    base = baseline if baseline is not None else series.baseline
    rel = mean / base if base else None
    lo, hi = empirical_ci(series, level) if len(series) >= 2 else (None, None)
    return DeltaReport(
        experiment=series.experiment,
        category=series.category,
        n_days=len(series),
        mean_delta=mean,
        relative_delta=rel,
        ci_low=lo,
        ci_high=hi,
        ci_level=level,
        sign=st,
        alpha=alpha,
        significant=st.p_value < alpha,
        calibration_version=series.calibration_version,
    )
