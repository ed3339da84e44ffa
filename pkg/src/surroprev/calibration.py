"""Bucket-level prevalence calibration from one global labeled sample.

The table is the hand-off between offline calibration and online
estimation.  For each score bucket ``b`` it stores

* the joint estimate ``P(Z=1, impression in b)`` from the labeled sample,
* the exact marginal ``P(impression in b)`` from the full logs,
* their ratio (the bucket prevalence) and its Hansen–Hurwitz variance
  with the segment restricted to ``b``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import special

from .datamodel import (
    Bucketization,
    DomainError,
    ImpressionLog,
    IngestError,
    LabelSource,
    MISSING_LABEL,
    ScoreTable,
    Segment,
)
from .hh import LabeledSample, hh_total, hh_variance
from .sampling import DrawnSample, SampleWeightScheme, WeightScheme, compute_weight, ppswor_sample, scheme_name

FORMAT_NAME = "surroprev.calibration"
FORMAT_VERSION = 1
LOGIT_EPS = 1e-6
DEFAULT_LOW_CONFIDENCE_FLOOR = 30


class MissingLabelError(DomainError):
    """A sampled item has no label; dropping it would bias the bucket totals."""


@dataclass(frozen=True, eq=False)
class CalibrationTable:
    category: str
    buckets: Bucketization
    prevalence: np.ndarray
    raw_prevalence: np.ndarray
    variance: np.ndarray
    labeled_count: np.ndarray
    marginal: np.ndarray
    flags: tuple[tuple[str, ...], ...]
    total_impressions: int
    sample_size: int
    seed: int | None = None
    scheme: str = ""
    window: tuple[str, str] | None = None
    low_confidence_floor: int = DEFAULT_LOW_CONFIDENCE_FLOOR
    sample: DrawnSample | None = field(default=None, repr=False)

    @property
    def n_buckets(self) -> int:
        return self.buckets.n_buckets

    @property
    def empty(self) -> np.ndarray:
        return np.array(["empty" in f for f in self.flags], dtype=bool)

    @property
    def low_confidence(self) -> np.ndarray:
        return np.array(["low-confidence" in f for f in self.flags], dtype=bool)

    def _content(self) -> dict:
        rows = []
        for b in range(self.n_buckets):
            rows.append({
                "index": b + 1,
                "prevalence": _num(self.prevalence[b]),
                "raw_prevalence": _num(self.raw_prevalence[b]),
                "variance": _num(self.variance[b]),
                "labeled_count": int(self.labeled_count[b]),
                "marginal": _num(self.marginal[b]),
                "flags": list(self.flags[b]),
            })
        return {
            "format": FORMAT_NAME,
            "format_version": FORMAT_VERSION,
            "category": self.category,
            "bucketization": self.buckets.to_dict(),
            "window": list(self.window) if self.window else None,
            "seed": self.seed,
            "scheme": self.scheme,
            "sample_size": self.sample_size,
            "total_impressions": self.total_impressions,
            "low_confidence_floor": self.low_confidence_floor,
            "buckets": rows,
        }

    @property
    def version(self) -> str:
        """Content digest identifying this calibration snapshot."""
        blob = json.dumps(self._content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> str:
        doc = self._content()
        doc["version"] = self.version
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _num(x: float):
    x = float(x)
    return None if math.isnan(x) else x


def _from_num(x) -> float:
    return math.nan if x is None else float(x)


def write_calibration(path: str | Path, table: CalibrationTable) -> None:
    Path(path).write_text(table.to_json(), encoding="utf-8")


def read_calibration(path: str | Path) -> CalibrationTable:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise IngestError(f"invalid calibration JSON ({exc.msg})", path) from None
    if doc.get("format") != FORMAT_NAME or doc.get("format_version") != FORMAT_VERSION:
        raise IngestError("not a supported calibration table", path)
    try:
        rows = sorted(doc["buckets"], key=lambda r: r["index"])
        bz = doc["bucketization"]
        table = CalibrationTable(
            category=str(doc["category"]),
            buckets=Bucketization(tuple(bz["boundaries"]), bz.get("scheme", "explicit")),
            prevalence=np.array([_from_num(r["prevalence"]) for r in rows]),
            raw_prevalence=np.array([_from_num(r["raw_prevalence"]) for r in rows]),
            variance=np.array([_from_num(r["variance"]) for r in rows]),
            labeled_count=np.array([int(r["labeled_count"]) for r in rows], dtype=np.int64),
            marginal=np.array([_from_num(r["marginal"]) for r in rows]),
            flags=tuple(tuple(r["flags"]) for r in rows),
            total_impressions=int(doc["total_impressions"]),
            sample_size=int(doc["sample_size"]),
            seed=doc.get("seed"),
            scheme=doc.get("scheme", ""),
            window=tuple(doc["window"]) if doc.get("window") else None,
            low_confidence_floor=int(doc.get("low_confidence_floor", DEFAULT_LOW_CONFIDENCE_FLOOR)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise IngestError(f"malformed calibration table ({exc})", path) from None
    if len(rows) != table.n_buckets:
        raise IngestError("bucket rows do not match the bucketization", path)
    if doc.get("version") not in (None, table.version):
        raise IngestError("calibration version does not match its content", path)
    return table


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def joint_probability(
    sample: LabeledSample,
    item_buckets,
    bucket: int,
    total_population_impressions: float,
) -> float:
    """HH estimate of ``P(Z=1, impression in bucket)``; ``bucket`` is one-based.

    ``sample.impressions`` hold each sampled item's impressions over the
    calibration window; items outside ``bucket`` contribute zero.
    """
    if len(sample) == 0:
        raise DomainError("empty sample")
    if not total_population_impressions > 0:
        raise DomainError("total population impressions must be positive")
    inside = np.asarray(item_buckets) == bucket - 1
    restricted = LabeledSample(sample.labels, np.where(inside, sample.impressions, 0.0), sample.probabilities)
    return hh_total(restricted) / float(total_population_impressions)


def bucket_impressions(
    log: ImpressionLog, scores: ScoreTable, buckets: Bucketization, category: str, warn: bool = True
) -> np.ndarray:
    """Impressions per bucket (zero-based array)."""
    item_scores = scores.scores_for_log(log, category, warn=warn)
    per_item = log.item_totals()
    return np.bincount(buckets.assign(item_scores), weights=per_item, minlength=buckets.n_buckets)


def marginal_bucket_probability(
    log: ImpressionLog, scores: ScoreTable, buckets: Bucketization, bucket: int, category: str
) -> float:
    """Share of all impressions whose item score falls in ``bucket`` (one-based)."""
    per_bucket = bucket_impressions(log, scores, buckets, category)
    total = per_bucket.sum()
    if total <= 0:
        raise DomainError("no impressions")
    return float(per_bucket[bucket - 1] / total)


def bucket_prevalence(joint: float, marginal: float) -> tuple[float, float]:
    """``(clamped, raw)`` conditional prevalence; ``(nan, nan)`` for an empty bucket."""
    if marginal <= 0:
        return math.nan, math.nan
    raw = joint / marginal
    return min(max(raw, 0.0), 1.0), raw


def calibrate(
    log: ImpressionLog,
    scores: ScoreTable,
    labels: LabelSource,
    buckets: Bucketization,
    *,
    category: str,
    n: int,
    seed: int,
    scheme: WeightScheme = SampleWeightScheme.IMPRESSIONS_X_SCORE,
    segment: Segment | None = None,
    low_confidence_floor: int = DEFAULT_LOW_CONFIDENCE_FLOOR,
    warn_missing_scores: bool = True,
) -> CalibrationTable:
    """Draw one global PPSWOR sample and estimate every bucket from it."""
    sub = log.segment(segment)
    totals = sub.item_totals()
    present = np.flatnonzero(totals > 0)
    if present.size == 0:
        raise DomainError("calibration window has no impressions")
    item_scores = scores.scores_for_log(sub, category, warn=warn_missing_scores)[present]
    imps = totals[present].astype(np.float64)
    bk = buckets.assign(item_scores)
    total_imps = float(imps.sum())
    B = buckets.n_buckets
    per_bucket = np.bincount(bk, weights=imps, minlength=B)
    marginal = per_bucket / total_imps

    weights = compute_weight(imps, item_scores, scheme)
    sample, chosen = ppswor_sample(sub.items[present], weights, n, seed, scheme_name(scheme))
    z = labels.labels(category, sample.item_ids)
    if (z == MISSING_LABEL).any():
        missing = sample.item_ids[z == MISSING_LABEL]
        raise MissingLabelError(
            f"label source has no {category!r} label for {missing.size} sampled item(s), e.g. {missing[0]!r}"
        )
    labeled = LabeledSample(z, imps[chosen], sample.probabilities, sample.item_ids)
    sample_buckets = bk[chosen]
    counts = np.bincount(sample_buckets, minlength=B)

    prev = np.full(B, math.nan)
    raw = np.full(B, math.nan)
    var = np.full(B, math.nan)
    flags = []
    for b in range(B):
        f: list[str] = []
        if per_bucket[b] <= 0:
            f.append("empty")
        else:
            joint = joint_probability(labeled, sample_buckets, b + 1, total_imps)
            prev[b], raw[b] = bucket_prevalence(joint, marginal[b])
            restricted = LabeledSample(
                labeled.labels, np.where(sample_buckets == b, labeled.impressions, 0.0), labeled.probabilities
            )
            var[b] = hh_variance(restricted, per_bucket[b])
            if math.isnan(var[b]):
                f.append("no-variance")
            if raw[b] > 1.0:
                f.append("clamped")
            if counts[b] < low_confidence_floor:
                f.append("low-confidence")
        flags.append(tuple(f))

    days = sub.days()
    window = (days[0].isoformat(), days[-1].isoformat()) if days else None
    return CalibrationTable(
        category=category,
        buckets=buckets,
        prevalence=prev,
        raw_prevalence=raw,
        variance=var,
        labeled_count=counts.astype(np.int64),
        marginal=marginal,
        flags=tuple(flags),
        total_impressions=int(total_imps),
        sample_size=len(sample),
        seed=seed,
        scheme=scheme_name(scheme),
        window=window,
        low_confidence_floor=low_confidence_floor,
        sample=sample,
    )


@dataclass(frozen=True, eq=False)
class LogitParams:
    """Logit-scale location and delta-method scale per bucket (NaN where empty).

    ``point`` keeps the unclamped table prevalence so a zero-variance bucket
    can be reproduced exactly rather than through the logit round trip.
    """

    mu: np.ndarray
    sigma: np.ndarray
    empty: np.ndarray
    point: np.ndarray


def logit_params(table: CalibrationTable, eps: float = LOGIT_EPS) -> LogitParams:
    empty = table.empty | np.isnan(table.prevalence)
    p = np.clip(np.where(empty, 0.5, table.prevalence), eps, 1 - eps)
    v = np.where(empty | np.isnan(table.variance), 0.0, table.variance)
    mu = np.log(p / (1 - p))
    sigma = np.sqrt(v) / (p * (1 - p))
    return LogitParams(
        np.where(empty, math.nan, mu),
        np.where(empty, math.nan, sigma),
        empty,
        np.where(empty, math.nan, table.prevalence),
    )


def inverse_logit(x):
    return special.expit(np.asarray(x, dtype=np.float64))
