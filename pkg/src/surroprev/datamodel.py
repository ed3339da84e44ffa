"""Core domain types, line-delimited ingestion, bucketization and label sources."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np


class DomainError(ValueError):
    """An input violates the documented domain of an operation."""


class IngestError(DomainError):
    """A line-delimited input file contains an invalid row."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class MissingScoreWarning(UserWarning):
    """Items with impressions but no score; they are placed in the lowest bucket."""


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ImpressionRecord:
    day: date
    user_id: str
    item_id: str
    arm: str
    impressions: int


@dataclass(frozen=True)
class ScoreRecord:
    item_id: str
    category: str
    score: float


def _codes(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if values.size == 0:
        return np.array([], dtype=str), np.array([], dtype=np.int64)
    vocab, inverse = np.unique(values, return_inverse=True)
    return vocab, inverse.astype(np.int64).ravel()


@dataclass(frozen=True, eq=False)
class ImpressionLog:
    """Columnar impression log aggregated to the (day, user, item, arm) grain.

    Identifiers are stored as integer codes into sorted vocabularies, so
    code order equals string order and every derived ordering is canonical.
    Rows are sorted by (day, user, item, arm).  Selecting rows keeps the
    vocabularies, so codes stay comparable across selections of one log.
    """

    day: np.ndarray
    user: np.ndarray
    item: np.ndarray
    arm: np.ndarray
    impressions: np.ndarray
    users: np.ndarray
    items: np.ndarray
    arms: np.ndarray
    rows_read: int = 0

    @classmethod
    def from_columns(
        cls,
        day: Sequence,
        user: Sequence,
        item: Sequence,
        arm: Sequence,
        impressions: Sequence[int],
        rows_read: int | None = None,
    ) -> "ImpressionLog":
        day = np.asarray(day, dtype="datetime64[D]")
        user = np.asarray(user, dtype=str)
        item = np.asarray(item, dtype=str)
        arm = np.asarray(arm, dtype=str)
        imps = np.asarray(impressions)
        n = imps.shape[0]
        if not (day.shape[0] == user.shape[0] == item.shape[0] == arm.shape[0] == n):
            raise DomainError("log columns must have equal length")
        if n and not np.issubdtype(imps.dtype, np.integer):
            raise DomainError("impressions must be integers")
        imps = imps.astype(np.int64)
        if n and imps.min() < 0:
            raise DomainError("impressions must be non-negative")
        keep = imps > 0
        users, ucode = _codes(user[keep])
        items, icode = _codes(item[keep])
        arms, acode = _codes(arm[keep])
        log = cls._aggregate(day[keep], ucode, icode, acode, imps[keep], users, items, arms)
        return cls(**{**log, "rows_read": n if rows_read is None else rows_read})

    @staticmethod
    def _aggregate(day, ucode, icode, acode, imps, users, items, arms) -> dict:
        order = np.lexsort((acode, icode, ucode, day))
        day, ucode, icode, acode, imps = (a[order] for a in (day, ucode, icode, acode, imps))
        if imps.size:
            new = np.ones(imps.size, dtype=bool)
            new[1:] = (
                (day[1:] != day[:-1])
                | (ucode[1:] != ucode[:-1])
                | (icode[1:] != icode[:-1])
                | (acode[1:] != acode[:-1])
            )
            starts = np.flatnonzero(new)
            imps = np.add.reduceat(imps, starts)
            day, ucode, icode, acode = day[starts], ucode[starts], icode[starts], acode[starts]
        return dict(
            day=day, user=ucode, item=icode, arm=acode, impressions=imps,
            users=users, items=items, arms=arms,
        )

    @classmethod
    def from_records(cls, records: Iterable[ImpressionRecord]) -> "ImpressionLog":
        recs = list(records)
        return cls.from_columns(
            [r.day for r in recs],
            [r.user_id for r in recs],
            [r.item_id for r in recs],
            [r.arm for r in recs],
            np.array([r.impressions for r in recs], dtype=np.int64),
        )

    @classmethod
    def concat(cls, logs: Sequence["ImpressionLog"]) -> "ImpressionLog":
        """Merge partitions; duplicates across partitions are summed at the grain."""
        if not logs:
            return cls.from_columns([], [], [], [], np.array([], dtype=np.int64))
        return cls.from_columns(
            np.concatenate([lg.day for lg in logs]),
            np.concatenate([lg.users[lg.user] for lg in logs]),
            np.concatenate([lg.items[lg.item] for lg in logs]),
            np.concatenate([lg.arms[lg.arm] for lg in logs]),
            np.concatenate([lg.impressions for lg in logs]),
            rows_read=sum(lg.rows_read for lg in logs),
        )

    def __len__(self) -> int:
        return int(self.impressions.shape[0])

    @property
    def total_impressions(self) -> int:
        return int(self.impressions.sum())

    def select(self, mask: np.ndarray) -> "ImpressionLog":
        mask = np.asarray(mask, dtype=bool)
        return ImpressionLog(
            self.day[mask], self.user[mask], self.item[mask], self.arm[mask],
            self.impressions[mask], self.users, self.items, self.arms, self.rows_read,
        )

    def segment(self, segment: "Segment | None") -> "ImpressionLog":
        if segment is None:
            return self
        return self.select(segment.mask(self))

    def days(self) -> list[date]:
        return [d.item() for d in np.unique(self.day)]

    def item_totals(self) -> np.ndarray:
        """Impressions per item code (length ``len(self.items)``)."""
        return np.bincount(self.item, weights=self.impressions, minlength=len(self.items)).astype(np.int64)

    def arm_code(self, arm: str) -> int:
        idx = int(np.searchsorted(self.arms, arm))
        if idx >= len(self.arms) or self.arms[idx] != arm:
            return -1
        return idx

    def records(self) -> Iterator[ImpressionRecord]:
        for d, u, i, a, n in zip(self.day, self.user, self.item, self.arm, self.impressions):
            yield ImpressionRecord(d.item(), str(self.users[u]), str(self.items[i]), str(self.arms[a]), int(n))


# ---------------------------------------------------------------------------
# segments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    """Deterministic predicate over log rows.

    Every filter left as ``None`` accepts all rows; ``days`` is an inclusive
    ``(first, last)`` range.  ``users`` and ``items`` express arbitrary tag
    filters (e.g. a country cohort resolved to its user ids).
    """

    name: str = "all"
    arms: frozenset[str] | None = None
    days: tuple[date, date] | None = None
    users: frozenset[str] | None = None
    items: frozenset[str] | None = None

    def mask(self, log: ImpressionLog) -> np.ndarray:
        m = np.ones(len(log), dtype=bool)
        if self.arms is not None:
            m &= np.isin(log.arm, np.flatnonzero(np.isin(log.arms, sorted(self.arms))))
        if self.days is not None:
            lo, hi = (np.datetime64(d, "D") for d in self.days)
            m &= (log.day >= lo) & (log.day <= hi)
        if self.users is not None:
            m &= np.isin(log.user, np.flatnonzero(np.isin(log.users, sorted(self.users))))
        if self.items is not None:
            m &= np.isin(log.item, np.flatnonzero(np.isin(log.items, sorted(self.items))))
        return m

    def describe(self) -> dict:
        out: dict = {"name": self.name}
        if self.arms is not None:
            out["arms"] = sorted(self.arms)
        if self.days is not None:
            out["days"] = [self.days[0].isoformat(), self.days[1].isoformat()]
        if self.users is not None:
            out["n_users"] = len(self.users)
        if self.items is not None:
            out["n_items"] = len(self.items)
        return out


# ---------------------------------------------------------------------------
# bucketization
# ---------------------------------------------------------------------------

BUCKET_SCHEMES = ("equal-width", "quantile", "explicit")


@dataclass(frozen=True)
class Bucketization:
    """Score buckets ``[u0,u1), [u1,u2), ..., [u_{B-1}, 1]`` with ``u0 = 0`` and ``uB = 1``."""

    boundaries: tuple[float, ...]
    scheme: str = "explicit"

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if self.scheme not in BUCKET_SCHEMES:
            raise DomainError(f"unknown bucket scheme {self.scheme!r}")
        if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0:
            raise DomainError("boundaries must start at 0 and end at 1")
        if any(not (x < y) for x, y in zip(b, b[1:])):
            raise DomainError("boundaries must be strictly increasing")

    @property
    def n_buckets(self) -> int:
        return len(self.boundaries) - 1

    def assign(self, scores) -> np.ndarray:
        """Zero-based bucket index for each score."""
        s = np.asarray(scores, dtype=np.float64)
        if s.size and (np.isnan(s).any() or s.min() < 0.0 or s.max() > 1.0):
            raise DomainError("scores must lie in [0, 1]")
        return np.searchsorted(np.asarray(self.boundaries[1:-1]), s, side="right").astype(np.int64)

    def to_dict(self) -> dict:
        return {"scheme": self.scheme, "boundaries": list(self.boundaries)}


def bucket_of(score: float, buckets: Bucketization) -> int:
    """One-based index of the bucket containing ``score``."""
    if not (0.0 <= score <= 1.0):
        raise DomainError(f"score {score!r} outside [0, 1]")
    return int(buckets.assign([score])[0]) + 1


def equal_width_buckets(n_buckets: int) -> Bucketization:
    if n_buckets < 1:
        raise DomainError("need at least one bucket")
    # j / B rather than linspace, so 0.3 is exactly the literal 0.3
    return Bucketization(tuple(np.arange(n_buckets + 1) / n_buckets), "equal-width")


def quantile_buckets(scores, n_buckets: int) -> Bucketization:
    """Buckets at the ``j/B`` empirical quantiles (linear interpolation).

    Duplicate quantiles collapse, as do cut points at or below the smallest
    score (they would only bound an empty lowest bucket), so heavily tied
    score sets yield fewer than ``n_buckets`` buckets.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise DomainError("quantile buckets need at least one score")
    if n_buckets < 1:
        raise DomainError("need at least one bucket")
    if np.isnan(s).any() or s.min() < 0 or s.max() > 1:
        raise DomainError("scores must lie in [0, 1]")
    qs = np.quantile(s, np.arange(1, n_buckets) / n_buckets)
    lo = s.min()
    inner = sorted({float(q) for q in qs if lo < q < 1.0})
    return Bucketization(tuple([0.0, *inner, 1.0]), "quantile")


def read_bucketizations(path: str | Path) -> dict[str, Bucketization]:
    out: dict[str, Bucketization] = {}
    for lineno, obj in _iter_jsonl(path):
        try:
            cat = str(obj["category"])
            out[cat] = Bucketization(tuple(obj["boundaries"]), obj.get("scheme", "explicit"))
        except (KeyError, TypeError) as exc:
            raise IngestError(f"bad bucketization row ({exc})", path, lineno) from None
        except DomainError as exc:
            raise IngestError(str(exc), path, lineno) from None
    return out


def write_bucketizations(path: str | Path, buckets: Mapping[str, Bucketization]) -> None:
    write_jsonl(path, ({"category": c, **b.to_dict()} for c, b in sorted(buckets.items())))


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScoreTable:
    """One score snapshot: per category, sorted item ids and their scores."""

    by_category: Mapping[str, tuple[np.ndarray, np.ndarray]]
    rows_read: int = 0

    @classmethod
    def from_records(cls, records: Iterable[ScoreRecord], rows_read: int | None = None) -> "ScoreTable":
        per: dict[str, dict[str, float]] = {}
        n = 0
        for r in records:
            n += 1
            if not (0.0 <= r.score <= 1.0):
                raise DomainError(f"score {r.score!r} for item {r.item_id!r} outside [0, 1]")
            seen = per.setdefault(r.category, {})
            prev = seen.get(r.item_id)
            if prev is not None and prev != r.score:
                raise DomainError(f"conflicting scores for ({r.item_id!r}, {r.category!r})")
            seen[r.item_id] = float(r.score)
        return cls(
            {c: cls._arrays(d) for c, d in per.items()},
            rows_read=n if rows_read is None else rows_read,
        )

    @classmethod
    def from_arrays(cls, category_scores: Mapping[str, tuple[Sequence[str], Sequence[float]]]) -> "ScoreTable":
        out = {}
        for cat, (ids, vals) in category_scores.items():
            ids = np.asarray(ids, dtype=str)
            vals = np.asarray(vals, dtype=np.float64)
            if vals.size and (np.isnan(vals).any() or vals.min() < 0 or vals.max() > 1):
                raise DomainError(f"scores for {cat!r} must lie in [0, 1]")
            order = np.argsort(ids, kind="stable")
            ids, vals = ids[order], vals[order]
            if ids.size > 1 and (ids[1:] == ids[:-1]).any():
                raise DomainError(f"duplicate item ids for category {cat!r}")
            out[cat] = (ids, vals)
        return cls(out, rows_read=sum(len(v[0]) for v in out.values()))

    @staticmethod
    def _arrays(d: dict[str, float]) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(sorted(d), dtype=str)
        return ids, np.array([d[i] for i in ids], dtype=np.float64)

    @property
    def categories(self) -> list[str]:
        return sorted(self.by_category)

    def lookup(self, category: str, item_ids) -> tuple[np.ndarray, np.ndarray]:
        """Scores for ``item_ids`` and a boolean mask of ids that had no score."""
        item_ids = np.asarray(item_ids, dtype=str)
        out = np.zeros(item_ids.shape[0])
        found = np.zeros(item_ids.shape[0], dtype=bool)
        ids, vals = self.by_category.get(category, (np.array([], dtype=str), out[:0]))
        if len(ids) and item_ids.size:
            pos = np.searchsorted(ids, item_ids)
            found = pos < len(ids)
            found[found] = ids[pos[found]] == item_ids[found]
            out[found] = vals[pos[found]]
        return out, ~found

    def scores_for_log(self, log: ImpressionLog, category: str, warn: bool = True) -> np.ndarray:
        """Score per item code of ``log``; unscored items with traffic get score 0."""
        scores, missing = self.lookup(category, log.items)
        if missing.any():
            totals = log.item_totals()
            n_missing = int((missing & (totals > 0)).sum())
            if n_missing and warn:
                warnings.warn(
                    f"{n_missing} item(s) with impressions have no {category!r} score; using 0",
                    MissingScoreWarning,
                    stacklevel=2,
                )
        return scores

    def records(self) -> Iterator[ScoreRecord]:
        for cat in self.categories:
            ids, vals = self.by_category[cat]
            for i, v in zip(ids, vals):
                yield ScoreRecord(str(i), cat, float(v))


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------

MISSING_LABEL = -1


@runtime_checkable
class LabelSource(Protocol):
    """Provider of binary labels; ``-1`` marks a missing label."""

    def labels(self, category: str, item_ids) -> np.ndarray: ...


def label_of(source: LabelSource, item_id: str, category: str) -> int | None:
    v = int(source.labels(category, [item_id])[0])
    return None if v == MISSING_LABEL else v


@dataclass(frozen=True, eq=False)
class FileLabelSource:
    """Labels loaded from a line-delimited file (e.g. bulk LLM output)."""

    by_category: Mapping[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def from_triples(cls, triples: Iterable[tuple[str, str, int]]) -> "FileLabelSource":
        per: dict[str, dict[str, int]] = {}
        for item, cat, lab in triples:
            if lab not in (0, 1):
                raise DomainError(f"label must be 0 or 1, got {lab!r}")
            seen = per.setdefault(cat, {})
            if seen.get(item, lab) != lab:
                raise DomainError(f"conflicting labels for ({item!r}, {cat!r})")
            seen[item] = lab
        out = {}
        for cat, d in per.items():
            ids = np.array(sorted(d), dtype=str)
            out[cat] = (ids, np.array([d[i] for i in ids], dtype=np.int8))
        return cls(out)

    def labels(self, category: str, item_ids) -> np.ndarray:
        item_ids = np.asarray(item_ids, dtype=str)
        res = np.full(item_ids.shape[0], MISSING_LABEL, dtype=np.int8)
        if category not in self.by_category or item_ids.size == 0:
            return res
        ids, labs = self.by_category[category]
        pos = np.searchsorted(ids, item_ids)
        ok = pos < len(ids)
        ok[ok] = ids[pos[ok]] == item_ids[ok]
        res[ok] = labs[pos[ok]]
        return res


# ---------------------------------------------------------------------------
# line-delimited files
# ---------------------------------------------------------------------------

def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"invalid JSON ({exc.msg})", path, lineno) from None
            if not isinstance(obj, dict):
                raise IngestError("each line must be a JSON object", path, lineno)
            yield lineno, obj


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, separators=(",", ":"), allow_nan=False))
            fh.write("\n")


def _ident(obj: dict, key: str, path, lineno) -> str:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (str, int)) or v == "":
        raise IngestError(f"field {key!r} must be a non-empty string identifier", path, lineno)
    return str(v)


def _integer(obj: dict, key: str, path, lineno) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise IngestError(f"field {key!r} must be an integer", path, lineno)
    return v


def ingest_logs(path: str | Path) -> ImpressionLog:
    """Read an impression log (``day, user, item, arm, impressions`` per line)."""
    days, users, items, arms, imps = [], [], [], [], []
    n = 0
    for lineno, obj in _iter_jsonl(path):
        n += 1
        raw_day = obj.get("day")
        try:
            d = date.fromisoformat(raw_day) if isinstance(raw_day, str) and len(raw_day) == 10 else None
        except ValueError:
            d = None
        if d is None:
            raise IngestError(f"field 'day' must be a YYYY-MM-DD date, got {raw_day!r}", path, lineno)
        k = _integer(obj, "impressions", path, lineno)
        if k < 0:
            raise IngestError(f"impressions must be non-negative, got {k}", path, lineno)
        days.append(d)
        users.append(_ident(obj, "user", path, lineno))
        items.append(_ident(obj, "item", path, lineno))
        arms.append(_ident(obj, "arm", path, lineno))
        imps.append(k)
    return ImpressionLog.from_columns(days, users, items, arms, np.array(imps, dtype=np.int64), rows_read=n)


def ingest_scores(path: str | Path) -> ScoreTable:
    """Read a score file (``item, category, score`` per line)."""
    per: dict[str, dict[str, float]] = {}
    n = 0
    for lineno, obj in _iter_jsonl(path):
        n += 1
        item = _ident(obj, "item", path, lineno)
        cat = _ident(obj, "category", path, lineno)
        s = obj.get("score")
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s):
            raise IngestError("field 'score' must be a number", path, lineno)
        if not (0.0 <= s <= 1.0):
            raise IngestError(f"score {s!r} outside [0, 1]", path, lineno)
        seen = per.setdefault(cat, {})
        if item in seen and seen[item] != float(s):
            raise IngestError(f"conflicting duplicate score for ({item!r}, {cat!r})", path, lineno)
        seen[item] = float(s)
    return ScoreTable({c: ScoreTable._arrays(d) for c, d in per.items()}, rows_read=n)


def ingest_labels(path: str | Path) -> FileLabelSource:
    """Read a label file (``item, category, label`` per line)."""
    triples = []
    for lineno, obj in _iter_jsonl(path):
        item = _ident(obj, "item", path, lineno)
        cat = _ident(obj, "category", path, lineno)
        lab = obj.get("label")
        if isinstance(lab, bool) or lab not in (0, 1):
            raise IngestError(f"label must be 0 or 1, got {lab!r}", path, lineno)
        triples.append((item, cat, int(lab)))
    try:
        return FileLabelSource.from_triples(triples)
    except DomainError as exc:
        raise IngestError(str(exc), path) from None


def write_logs(path: str | Path, log: ImpressionLog) -> None:
    day_str = log.day.astype(str)
    write_jsonl(
        path,
        (
            {"day": str(d), "user": str(log.users[u]), "item": str(log.items[i]),
             "arm": str(log.arms[a]), "impressions": int(n)}
            for d, u, i, a, n in zip(day_str, log.user, log.item, log.arm, log.impressions)
        ),
    )


def write_scores(path: str | Path, scores: ScoreTable) -> None:
    write_jsonl(path, ({"item": r.item_id, "category": r.category, "score": r.score} for r in scores.records()))


def write_labels(path: str | Path, source: FileLabelSource) -> None:
    def rows():
        for cat in sorted(source.by_category):
            ids, labs = source.by_category[cat]
            for i, lab in zip(ids, labs):
                yield {"item": str(i), "category": cat, "label": int(lab)}

    write_jsonl(path, rows())
