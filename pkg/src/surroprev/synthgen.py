"""Synthetic worlds with exact ground truth.

A world is a fixed item population (true labels, model scores, heavy-tailed
popularity) exposed to users over several days.  Users are randomised into
arms; an arm may filter items by score (drop ``m >= threshold``) or demote a
tagged subcategory of positives.  Removed exposure is re-allocated to the
surviving items in proportion to their popularity, so arms differ only
through the filter.

All randomness is derived from ``(seed, stream, day)`` so any single day can
be regenerated on its own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .datamodel import (
    Bucketization,
    DomainError,
    FileLabelSource,
    ImpressionLog,
    MISSING_LABEL,
    ScoreTable,
    Segment,
    write_jsonl,
    write_labels,
    write_logs,
    write_scores,
)

_ITEMS, _USERS, _DAYS = 1, 2, 3
_MIN_SCORE = 1e-6


@dataclass(frozen=True)
class CategorySpec:
    """Label rate plus a Beta score model conditioned on the label.

    Identical ``positive_score`` and ``negative_score`` make the score
    useless; well separated shapes make it nearly perfect.
    """

    name: str
    label_rate: float
    positive_score: tuple[float, float] = (5.0, 2.0)
    negative_score: tuple[float, float] = (0.6, 9.0)
    subcategory_fraction: float = 0.0


@dataclass(frozen=True)
class ArmSpec:
    name: str
    category: str | None = None
    threshold: float | None = None
    subcategory_demotion: float = 0.0


@dataclass(frozen=True)
class WorldConfig:
    n_items: int
    n_users: int
    n_days: int
    categories: tuple[CategorySpec, ...]
    arms: tuple[ArmSpec, ...] = (ArmSpec("control"),)
    impressions_per_user_day: float = 20.0
    popularity_exponent: float = 1.5
    user_activity_shape: float = 2.0
    start_day: date = date(2024, 1, 1)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "arms", tuple(self.arms))
        if min(self.n_items, self.n_users, self.n_days) < 1:
            raise DomainError("n_items, n_users and n_days must be at least 1")
        if not self.categories:
            raise DomainError("at least one category is required")
        names = [c.name for c in self.categories]
        if len(set(names)) != len(names):
            raise DomainError("category names must be unique")
        for c in self.categories:
            if not (0.0 <= c.label_rate <= 1.0) or not (0.0 <= c.subcategory_fraction <= 1.0):
                raise DomainError(f"probabilities for category {c.name!r} must lie in [0, 1]")
            if min(*c.positive_score, *c.negative_score) <= 0:
                raise DomainError(f"Beta parameters for {c.name!r} must be positive")
        arm_names = [a.name for a in self.arms]
        if not arm_names or len(set(arm_names)) != len(arm_names):
            raise DomainError("arm names must be unique and non-empty")
        for a in self.arms:
            if a.threshold is not None and not (0.0 <= a.threshold <= 1.0):
                raise DomainError(f"threshold of arm {a.name!r} must lie in [0, 1]")
            if not (0.0 <= a.subcategory_demotion <= 1.0):
                raise DomainError(f"subcategory demotion of arm {a.name!r} must lie in [0, 1]")
            if (a.threshold is not None or a.subcategory_demotion) and a.category not in names:
                raise DomainError(f"arm {a.name!r} filters on unknown category {a.category!r}")
        if self.impressions_per_user_day <= 0 or self.popularity_exponent <= 0 or self.user_activity_shape <= 0:
            raise DomainError("impression model parameters must be positive")

    @property
    def days(self) -> list[date]:
        return [self.start_day + timedelta(days=k) for k in range(self.n_days)]

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldConfig":
        try:
            d = dict(d)
            d["categories"] = tuple(
                CategorySpec(**{**c, **{k: tuple(c[k]) for k in ("positive_score", "negative_score") if k in c}})
                for c in d["categories"]
            )
            d["arms"] = tuple(ArmSpec(**a) for a in d.get("arms", [{"name": "control"}]))
            if "start_day" in d:
                d["start_day"] = date.fromisoformat(d["start_day"])
            return cls(**d)
        except (TypeError, KeyError, ValueError) as exc:
            if isinstance(exc, DomainError):
                raise
            raise DomainError(f"invalid world config: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_day"] = self.start_day.isoformat()
        return d


@dataclass(frozen=True, eq=False)
class World:
    config: WorldConfig
    item_ids: np.ndarray
    labels: Mapping[str, np.ndarray]
    scores: Mapping[str, np.ndarray]
    subcategory: Mapping[str, np.ndarray]
    popularity: np.ndarray
    user_ids: np.ndarray
    user_arm: np.ndarray
    log: ImpressionLog

    @property
    def arm_names(self) -> list[str]:
        return [a.name for a in self.config.arms]

    def score_table(self) -> ScoreTable:
        return ScoreTable({c: (self.item_ids, self.scores[c]) for c in self.scores}, rows_read=0)

    def label_source(self) -> "WorldLabelSource":
        return WorldLabelSource(self)

    def file_labels(self) -> FileLabelSource:
        return FileLabelSource({c: (self.item_ids, self.labels[c]) for c in self.labels})

    def assignment(self) -> dict[str, str]:
        names = self.arm_names
        return {str(u): names[a] for u, a in zip(self.user_ids, self.user_arm)}


@dataclass(frozen=True, eq=False)
class WorldLabelSource:
    """Ground-truth labels of a world, exposed through the label-source protocol."""

    world: World

    def labels(self, category: str, item_ids) -> np.ndarray:
        item_ids = np.asarray(item_ids, dtype=str)
        res = np.full(item_ids.shape[0], MISSING_LABEL, dtype=np.int8)
        if category not in self.world.labels or item_ids.size == 0:
            return res
        ids = self.world.item_ids
        pos = np.searchsorted(ids, item_ids)
        ok = pos < len(ids)
        ok[ok] = ids[pos[ok]] == item_ids[ok]
        res[ok] = self.world.labels[category][pos[ok]]
        return res


def _id_strings(prefix: str, n: int) -> np.ndarray:
    width = max(6, len(str(n - 1)))
    return np.array([f"{prefix}{k:0{width}d}" for k in range(n)], dtype=str)


def arm_exposure(config: WorldConfig, popularity, scores, subcategory, arm: ArmSpec) -> np.ndarray:
    """Exposure weight of every item under ``arm`` (unnormalised)."""
    w = np.array(popularity, dtype=np.float64)
    if arm.threshold is not None:
        w = np.where(scores[arm.category] >= arm.threshold, 0.0, w)
    if arm.subcategory_demotion:
        w = np.where(subcategory[arm.category], w * (1.0 - arm.subcategory_demotion), w)
    if w.sum() <= 0:
        raise DomainError(f"arm {arm.name!r} filters out every item")
    return w


def generate_world(config: WorldConfig) -> World:
    seed = config.seed
    rng = np.random.default_rng([seed, _ITEMS])
    n = config.n_items
    item_ids = _id_strings("it", n)
    labels, scores, subcat = {}, {}, {}
    for c in config.categories:
        z = rng.random(n) < c.label_rate
        s = np.where(
            z,
            rng.beta(*c.positive_score, size=n),
            rng.beta(*c.negative_score, size=n),
        )
        labels[c.name] = z.astype(np.int8)
        scores[c.name] = np.clip(s, _MIN_SCORE, 1.0)
        subcat[c.name] = z & (rng.random(n) < c.subcategory_fraction)
    popularity = rng.pareto(config.popularity_exponent, size=n) + 1.0

    urng = np.random.default_rng([seed, _USERS])
    user_ids = _id_strings("u", config.n_users)
    n_arms = len(config.arms)
    user_arm = urng.integers(n_arms, size=config.n_users)
    activity = urng.gamma(config.user_activity_shape, 1.0 / config.user_activity_shape, size=config.n_users)

    cdfs = []
    for arm in config.arms:
        w = arm_exposure(config, popularity, scores, subcat, arm)
        cdf = np.cumsum(w)
        cdfs.append(cdf / cdf[-1])

    # arm vocabulary is sorted, so map config order -> sorted code
    arm_vocab = np.array(sorted(a.name for a in config.arms), dtype=str)
    arm_code = np.searchsorted(arm_vocab, [a.name for a in config.arms])

    parts = [_generate_day(config, k, cdfs, user_arm, activity) for k in range(config.n_days)]
    day = np.concatenate([p[0] for p in parts])
    user = np.concatenate([p[1] for p in parts])
    item = np.concatenate([p[2] for p in parts])
    imps = np.concatenate([p[3] for p in parts])
    log = ImpressionLog(
        day=day,
        user=user,
        item=item,
        arm=arm_code[user_arm[user]].astype(np.int64),
        impressions=imps,
        users=user_ids,
        items=item_ids,
        arms=arm_vocab,
        rows_read=int(imps.shape[0]),
    )
    return World(config, item_ids, labels, scores, subcat, popularity, user_ids, user_arm, log)


def _generate_day(config: WorldConfig, k: int, cdfs, user_arm, activity):
    rng = np.random.default_rng([config.seed, _DAYS, k])
    n = config.n_items
    per_user = rng.poisson(config.impressions_per_user_day * activity)
    users = np.repeat(np.arange(config.n_users), per_user)
    items = np.empty(users.shape[0], dtype=np.int64)
    u = rng.random(users.shape[0])
    arm_of = user_arm[users]
    for a, cdf in enumerate(cdfs):
        sel = arm_of == a
        items[sel] = np.minimum(np.searchsorted(cdf, u[sel], side="right"), n - 1)
    key = users.astype(np.int64) * n + items
    uniq, counts = np.unique(key, return_counts=True)
    day = np.full(uniq.shape[0], np.datetime64(config.start_day + timedelta(days=k), "D"))
    return day, uniq // n, uniq % n, counts.astype(np.int64)


# ---------------------------------------------------------------------------
# oracle quantities
# ---------------------------------------------------------------------------

def _row_labels(world: World, log: ImpressionLog, category: str) -> np.ndarray:
    if category not in world.labels:
        raise DomainError(f"unknown category {category!r}")
    return world.labels[category][log.item].astype(np.float64)


def true_prevalence(world: World, segment: Segment | None, category: str) -> float:
    """Exact impression-weighted share of true positives in ``segment``."""
    sub = world.log.segment(segment)
    total = sub.impressions.sum()
    if total <= 0:
        raise DomainError("segment has no impressions")
    return float((_row_labels(world, sub, category) * sub.impressions).sum() / total)


def true_bucket_prevalences(
    world: World, buckets: Bucketization, category: str, segment: Segment | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-bucket prevalence (NaN where empty) and bucket impression shares."""
    sub = world.log.segment(segment)
    b = buckets.assign(world.scores[category])[sub.item]
    imps = sub.impressions.astype(np.float64)
    pos = np.bincount(b, weights=_row_labels(world, sub, category) * imps, minlength=buckets.n_buckets)
    tot = np.bincount(b, weights=imps, minlength=buckets.n_buckets)
    with np.errstate(invalid="ignore", divide="ignore"):
        prev = np.where(tot > 0, pos / tot, np.nan)
    return prev, tot / tot.sum()


def true_bucket_prevalence(world: World, buckets: Bucketization, bucket: int, category: str) -> float:
    """Exact ``P(Z=1 | score in bucket)``; ``bucket`` is one-based, NaN when empty."""
    prev, _ = true_bucket_prevalences(world, buckets, category)
    return float(prev[bucket - 1])


def oracle_records(world: World) -> Iterable[dict]:
    segments = [("all", None)] + [(a, frozenset([a])) for a in world.arm_names]
    days = [None] + world.config.days
    for cat in sorted(world.labels):
        for name, arms in segments:
            for d in days:
                seg = Segment(name=name, arms=arms, days=None if d is None else (d, d))
                sub = world.log.segment(seg)
                total = int(sub.impressions.sum())
                rec = {
                    "category": cat,
                    "segment": name,
                    "day": None if d is None else d.isoformat(),
                    "impressions": total,
                    "prevalence": true_prevalence(world, seg, cat) if total else None,
                }
                yield rec


def write_world(world: World, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "logs": out / "logs.jsonl",
        "scores": out / "scores.jsonl",
        "labels": out / "labels.jsonl",
        "oracle": out / "oracle.jsonl",
        "world": out / "world.json",
    }
    write_logs(paths["logs"], world.log)
    write_scores(paths["scores"], world.score_table())
    write_labels(paths["labels"], world.file_labels())
    write_jsonl(paths["oracle"], oracle_records(world))
    summary = {
        "config": world.config.to_dict(),
        "n_rows": len(world.log),
        "total_impressions": world.log.total_impressions,
        "assignment_counts": {a: int((world.user_arm == k).sum()) for k, a in enumerate(world.arm_names)},
    }
    paths["world"].write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths
