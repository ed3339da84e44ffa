"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Randomness in this package is counter-based: every draw is a pure function
of a 64-bit key (derived from the seed and the identity of the thing being
randomised) and a counter.  The mixer is the SplitMix64 finaliser.

Backend selection happens once at import time:

* ``SURROPREV_BACKEND=numpy`` forces the numpy implementations;
* ``SURROPREV_BACKEND=numba`` (default) uses numba when it can be imported
  and silently falls back to numpy otherwise.

Both backends produce bit-identical results; only integer arithmetic and a
single float multiply are involved in generating uniforms.
"""

from __future__ import annotations

import hashlib
import os
from typing import Iterable

import numpy as np

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1
_INV_2_53 = 1.0 / 9007199254740992.0

try:  # pragma: no cover - exercised implicitly
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("SURROPREV_BACKEND", "numba").strip().lower()
if _requested not in {"numba", "numpy"}:
    raise ValueError(f"SURROPREV_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _finalize64_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _to_unit_np(z: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted by half a step so 0 and 1 are both excluded
    return ((z >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def _stream_uniforms_np(keys: np.ndarray, counters: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        state = keys + (counters.astype(np.uint64) + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
    return _to_unit_np(_finalize64_np(state))


def _exact_flag_counts_np(keys: np.ndarray, counts: np.ndarray, probs: np.ndarray) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    n_rows = counts.shape[0]
    out = np.zeros(n_rows, dtype=np.int64)
    # chunk rows so the expanded per-impression arrays stay bounded
    chunk_target = 1 << 22
    start = 0
    while start < n_rows:
        stop = start
        acc = 0
        while stop < n_rows and (acc == 0 or acc + counts[stop] <= chunk_target):
            acc += counts[stop]
            stop += 1
        c = counts[start:stop]
        row = np.repeat(np.arange(stop - start), c)
        offsets = np.cumsum(c) - c
        t = np.arange(acc, dtype=np.int64) - np.repeat(offsets, c)
        r = _stream_uniforms_np(np.repeat(keys[start:stop], c), t)
        hits = r < np.repeat(probs[start:stop], c)
        out[start:stop] = np.bincount(row[hits], minlength=stop - start)
        start = stop
    return out


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:
    _U30 = np.uint64(30)
    _U27 = np.uint64(27)
    _U31 = np.uint64(31)
    _U11 = np.uint64(11)
    _UM1 = np.uint64(_M1)
    _UM2 = np.uint64(_M2)
    _UGAMMA = np.uint64(GOLDEN_GAMMA)
    _U1 = np.uint64(1)

    @numba.njit(cache=True, inline="always")
    def _finalize64_scalar(z):
        z = (z ^ (z >> _U30)) * _UM1
        z = (z ^ (z >> _U27)) * _UM2
        return z ^ (z >> _U31)

    @numba.njit(cache=True, inline="always")
    def _to_unit_scalar(z):
        return (np.float64(z >> _U11) + 0.5) * _INV_2_53

    @numba.njit(cache=True)
    def _finalize64_nb(z):
        out = np.empty(z.shape[0], dtype=np.uint64)
        for i in range(z.shape[0]):
            out[i] = _finalize64_scalar(z[i])
        return out

    @numba.njit(cache=True)
    def _stream_uniforms_nb(keys, counters):
        out = np.empty(keys.shape[0], dtype=np.float64)
        for i in range(keys.shape[0]):
            state = keys[i] + (np.uint64(counters[i]) + _U1) * _UGAMMA
            out[i] = _to_unit_scalar(_finalize64_scalar(state))
        return out

    @numba.njit(cache=True)
    def _exact_flag_counts_nb(keys, counts, probs):
        out = np.zeros(keys.shape[0], dtype=np.int64)
        for i in range(keys.shape[0]):
            key = keys[i]
            p = probs[i]
            hits = 0
            for t in range(counts[i]):
                state = key + (np.uint64(t) + _U1) * _UGAMMA
                if _to_unit_scalar(_finalize64_scalar(state)) < p:
                    hits += 1
            out[i] = hits
        return out


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def finalize64(z, backend: str | None = None) -> np.ndarray:
    """SplitMix64 finaliser applied elementwise to a uint64 array."""
    z = np.ascontiguousarray(np.atleast_1d(np.asarray(z, dtype=np.uint64)))
    if (backend or BACKEND) == "numba":
        return _finalize64_nb(z)
    return _finalize64_np(z)


def stream_uniforms(keys, counters, backend: str | None = None) -> np.ndarray:
    """Uniform(0,1) draw number ``counters[i]`` from stream ``keys[i]``."""
    keys = np.ascontiguousarray(np.atleast_1d(np.asarray(keys, dtype=np.uint64)))
    counters = np.ascontiguousarray(
        np.broadcast_to(np.asarray(counters, dtype=np.int64), keys.shape)
    )
    if (backend or BACKEND) == "numba":
        return _stream_uniforms_nb(keys, counters)
    return _stream_uniforms_np(keys, counters)


def exact_flag_counts(keys, counts, probs, backend: str | None = None) -> np.ndarray:
    """Per-row number of successes in ``counts[i]`` Bernoulli(``probs[i]``) trials.

    Trial ``t`` of row ``i`` compares ``stream_uniforms(keys[i], t)`` with
    ``probs[i]``; this is the impression-by-impression loop, one uniform per
    impression.
    """
    keys = np.ascontiguousarray(np.asarray(keys, dtype=np.uint64))
    counts = np.ascontiguousarray(np.asarray(counts, dtype=np.int64))
    probs = np.ascontiguousarray(np.asarray(probs, dtype=np.float64))
    if not (keys.shape == counts.shape == probs.shape):
        raise ValueError("keys, counts and probs must have the same shape")
    if counts.size and counts.min() < 0:
        raise ValueError("counts must be non-negative")
    if (backend or BACKEND) == "numba":
        return _exact_flag_counts_nb(keys, counts, probs)
    return _exact_flag_counts_np(keys, counts, probs)


def hash_ids(ids: Iterable[str]) -> np.ndarray:
    """Stable 64-bit hashes of string identifiers (independent of PYTHONHASHSEED)."""
    return np.fromiter(
        (
            int.from_bytes(hashlib.blake2b(str(s).encode("utf-8"), digest_size=8).digest(), "little")
            for s in ids
        ),
        dtype=np.uint64,
    )


def derive_keys(seed: int, *parts, backend: str | None = None) -> np.ndarray:
    """Fold ``parts`` (broadcastable integer arrays) into per-element stream keys."""
    h = np.asarray([int(seed) & _MASK64], dtype=np.uint64)
    h = finalize64(h ^ np.uint64(GOLDEN_GAMMA), backend)
    for part in parts:
        arr = np.asarray(part)
        if arr.dtype != np.uint64:
            arr = arr.astype(np.int64).astype(np.uint64)
        a, b = np.broadcast_arrays(h, arr)
        mixed = a ^ b
        h = finalize64(mixed.ravel(), backend).reshape(mixed.shape)
    return h


def keyed_uniforms(seed: int, *parts, backend: str | None = None) -> np.ndarray:
    """One Uniform(0,1) draw per element of the broadcast ``parts``."""
    keys = derive_keys(seed, *parts, backend=backend)
    return stream_uniforms(keys.ravel(), 0, backend).reshape(keys.shape)
