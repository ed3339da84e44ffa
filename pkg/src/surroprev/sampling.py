"""PPSWOR selection by weighted reservoir sampling (keys ``U ** (1/w)``).

Keys are handled in log space, ``log(U) / w``, which orders items exactly
like ``U ** (1/w)`` but never underflows.  Ties are broken by item id (the
larger id wins), so selections are fully deterministic.

Per-item uniforms come from a counter-based generator keyed by
``(seed, item_id)``; an item receives the same draw regardless of the order
in which it is offered or the partition it lands in.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence, Union

import numpy as np

from . import _kernels
from .datamodel import DomainError, IngestError, _iter_jsonl

_SAMPLING_TAG = 0x5A4D504C  # stream tag separating sampling draws from other uses


class SampleWeightScheme(str, Enum):
    IMPRESSIONS = "impressions"
    IMPRESSIONS_X_SCORE = "impressions-x-score"


@dataclass(frozen=True)
class CustomWeight:
    """User supplied ``f(impressions, score)``; must be vectorised and non-negative."""

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]


WeightScheme = Union[SampleWeightScheme, CustomWeight, str]


def scheme_name(scheme: WeightScheme) -> str:
    if isinstance(scheme, CustomWeight):
        return f"custom:{scheme.name}"
    return SampleWeightScheme(scheme).value


def compute_weight(impressions, score, scheme: WeightScheme):
    """Sampling weight ``I`` or ``I * m``; scalar in, scalar out."""
    imps = np.asarray(impressions, dtype=np.float64)
    s = np.asarray(score, dtype=np.float64)
    if isinstance(scheme, CustomWeight):
        w = np.asarray(scheme.fn(imps, s), dtype=np.float64)
    else:
        scheme = SampleWeightScheme(scheme)
        if scheme is SampleWeightScheme.IMPRESSIONS:
            w = imps * np.ones_like(s)
        else:
            w = imps * s
    if w.size and (np.isnan(w).any() or w.min() < 0):
        raise DomainError("sampling weights must be non-negative")
    return float(w) if w.ndim == 0 else w


def item_uniforms(seed: int, item_ids: Sequence[str]) -> np.ndarray:
    """The per-item ``U_i`` used for reservoir keys under ``seed``."""
    h = _kernels.hash_ids(item_ids)
    if h.size == 0:
        return np.empty(0)
    return _kernels.keyed_uniforms(seed, _SAMPLING_TAG, h)


@dataclass(frozen=True, order=True)
class ReservoirEntry:
    log_key: float
    item_id: str
    weight: float = field(compare=False)

    @property
    def key(self) -> float:
        return math.exp(self.log_key)


@dataclass
class WeightedReservoir:
    """Streaming top-``capacity`` by key.  Not safe for concurrent mutation."""

    capacity: int
    seed: int = 0
    _heap: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise DomainError("reservoir capacity must be positive")

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def full(self) -> bool:
        return len(self._heap) >= self.capacity

    @property
    def min_entry(self) -> ReservoirEntry | None:
        return self._heap[0] if self._heap else None

    def offer(self, item_id: str, weight: float, uniform_draw: float) -> "WeightedReservoir":
        if not (0.0 < uniform_draw < 1.0):
            raise DomainError(f"uniform draw {uniform_draw!r} must lie in (0, 1)")
        if weight < 0 or math.isnan(weight):
            raise DomainError("weights must be non-negative")
        if weight == 0:
            return self
        entry = ReservoirEntry(math.log(uniform_draw) / weight, str(item_id), float(weight))
        if len(self._heap) < self.capacity:
            heapq.heappush(self._heap, entry)
        elif entry > self._heap[0]:
            heapq.heapreplace(self._heap, entry)
        return self

    def offer_item(self, item_id: str, weight: float) -> "WeightedReservoir":
        """Offer using the keyed draw for ``(self.seed, item_id)``."""
        return self.offer(item_id, weight, float(item_uniforms(self.seed, [item_id])[0]))

    def offer_many(self, item_ids: Sequence[str], weights) -> "WeightedReservoir":
        u = item_uniforms(self.seed, item_ids)
        for i, w, ui in zip(item_ids, np.asarray(weights, dtype=np.float64), u):
            self.offer(i, float(w), float(ui))
        return self

    def entries(self) -> list[ReservoirEntry]:
        """Entries by decreasing key."""
        return sorted(self._heap, reverse=True)


def merge(r1: WeightedReservoir, r2: WeightedReservoir) -> WeightedReservoir:
    """Top-``capacity`` over the union of two reservoirs built on disjoint items."""
    if r1.capacity != r2.capacity:
        raise ValueError(f"cannot merge reservoirs of capacity {r1.capacity} and {r2.capacity}")
    ids1 = {e.item_id for e in r1._heap}
    if any(e.item_id in ids1 for e in r2._heap):
        raise ValueError("merged reservoirs must cover disjoint item sets")
    top = heapq.nlargest(r1.capacity, [*r1._heap, *r2._heap])
    heapq.heapify(top)
    return WeightedReservoir(r1.capacity, r1.seed, top)


@dataclass(frozen=True, eq=False)
class DrawnSample:
    """Sampled items (decreasing key) with their single-draw probabilities ``w / W``."""

    item_ids: np.ndarray
    weights: np.ndarray
    probabilities: np.ndarray
    log_keys: np.ndarray
    total_weight: float
    capacity: int
    seed: int
    scheme: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.item_ids.shape[0])

    @property
    def keys(self) -> np.ndarray:
        return np.exp(self.log_keys)


def finalize_sample(
    reservoir: WeightedReservoir, population_total_weight: float, scheme: str = ""
) -> DrawnSample:
    """Attach ``p_i = w_i / W`` where ``W`` is the full-population weight."""
    if not population_total_weight > 0:
        raise DomainError("population total weight must be positive")
    ents = reservoir.entries()
    w = np.array([e.weight for e in ents], dtype=np.float64)
    if w.size and w.max() > population_total_weight * (1 + 1e-12):
        raise DomainError("population total weight is smaller than a sampled weight")
    return DrawnSample(
        item_ids=np.array([e.item_id for e in ents], dtype=str),
        weights=w,
        probabilities=np.minimum(w / population_total_weight, 1.0),
        log_keys=np.array([e.log_key for e in ents], dtype=np.float64),
        total_weight=float(population_total_weight),
        capacity=reservoir.capacity,
        seed=reservoir.seed,
        scheme=scheme,
    )


def select_top(item_ids: np.ndarray, weights: np.ndarray, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``n`` largest keys (decreasing) and all log keys.

    Vectorised equivalent of offering every item to a fresh reservoir.
    """
    item_ids = np.asarray(item_ids, dtype=str)
    weights = np.asarray(weights, dtype=np.float64)
    if n < 1:
        raise DomainError("sample size must be positive")
    if weights.size and (np.isnan(weights).any() or weights.min() < 0):
        raise DomainError("weights must be non-negative")
    log_keys = np.full(weights.shape[0], -np.inf)
    pos = np.flatnonzero(weights > 0)
    if pos.size:
        u = item_uniforms(seed, item_ids[pos])
        with np.errstate(over="ignore"):  # subnormal weights: key -> -inf, never chosen first
            log_keys[pos] = np.log(u) / weights[pos]
    order = np.lexsort((item_ids[pos], log_keys[pos]))
    chosen = pos[order[::-1][:n]]
    return chosen, log_keys


def ppswor_sample(
    item_ids: Sequence[str], weights, n: int, seed: int, scheme: str = ""
) -> tuple[DrawnSample, np.ndarray]:
    """Draw a PPSWOR sample over a full population in one vectorised pass.

    Returns the sample and the positions of the sampled items in the input.
    When ``n`` exceeds the number of positive-weight items the whole
    positive-weight population is returned.
    """
    item_ids = np.asarray(item_ids, dtype=str)
    weights = np.asarray(weights, dtype=np.float64)
    total = float(weights.sum())
    if not total > 0:
        raise DomainError("population total weight must be positive")
    chosen, log_keys = select_top(item_ids, weights, n, seed)
    sample = DrawnSample(
        item_ids=item_ids[chosen],
        weights=weights[chosen],
        probabilities=weights[chosen] / total,
        log_keys=log_keys[chosen],
        total_weight=total,
        capacity=n,
        seed=seed,
        scheme=scheme,
    )
    return sample, chosen


# ---------------------------------------------------------------------------
# sample files
# ---------------------------------------------------------------------------

def write_sample(path: str | Path, sample: DrawnSample, extra_header: dict | None = None) -> None:
    header = {
        "type": "header",
        "seed": sample.seed,
        "scheme": sample.scheme,
        "capacity": sample.capacity,
        "population_total_weight": sample.total_weight,
        **sample.meta,
        **(extra_header or {}),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for i, w, p, lk in zip(sample.item_ids, sample.weights, sample.probabilities, sample.log_keys):
            row = {"item": str(i), "weight": float(w), "sampling_probability": float(p),
                   "key": math.exp(lk), "log_key": float(lk)}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")


def read_sample(path: str | Path) -> DrawnSample:
    header = None
    ids, ws, ps, lks = [], [], [], []
    for lineno, obj in _iter_jsonl(path):
        if header is None:
            if obj.get("type") != "header":
                raise IngestError("sample file must start with a header object", path, lineno)
            header = obj
            continue
        try:
            ids.append(str(obj["item"]))
            ws.append(float(obj["weight"]))
            p = float(obj["sampling_probability"])
            lk = float(obj["log_key"]) if "log_key" in obj else math.log(float(obj["key"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"bad sample row ({exc})", path, lineno) from None
        if not (0.0 < p <= 1.0):
            raise IngestError(f"sampling probability {p!r} outside (0, 1]", path, lineno)
        ps.append(p)
        lks.append(lk)
    if header is None:
        raise IngestError("empty sample file", path)
    reserved = {"type", "seed", "scheme", "capacity", "population_total_weight"}
    return DrawnSample(
        item_ids=np.array(ids, dtype=str),
        weights=np.array(ws, dtype=np.float64),
        probabilities=np.array(ps, dtype=np.float64),
        log_keys=np.array(lks, dtype=np.float64),
        total_weight=float(header["population_total_weight"]),
        capacity=int(header["capacity"]),
        seed=int(header["seed"]),
        scheme=str(header.get("scheme", "")),
        meta={k: v for k, v in header.items() if k not in reserved},
    )
