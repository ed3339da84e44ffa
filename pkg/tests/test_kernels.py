from __future__ import annotations

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surroprev import _kernels as K

MASK = (1 << 64) - 1
backends = ["numpy"] + (["numba"] if K.HAVE_NUMBA else [])


def splitmix_finalize(z: int) -> int:
    # reference finaliser on Python integers
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def test_splitmix_known_sequence():
    # first outputs of SplitMix64 seeded with 0 are published test vectors
    state = 0
    out = []
    for _ in range(3):
        state = (state + 0x9E3779B97F4A7C15) & MASK
        out.append(splitmix_finalize(state))
    assert out == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


@pytest.mark.parametrize("backend", backends)
@given(st.lists(st.integers(0, MASK), min_size=1, max_size=50))
def test_finalize_matches_reference(backend, zs):
    got = K.finalize64(np.array(zs, dtype=np.uint64), backend)
    assert [int(x) for x in got] == [splitmix_finalize(z) for z in zs]


@pytest.mark.parametrize("backend", backends)
def test_stream_uniforms_reference_and_range(backend):
    keys = np.array([0, 1, 2**63, MASK], dtype=np.uint64)
    u = K.stream_uniforms(keys, 3, backend)
    expected = [
        ((splitmix_finalize((int(k) + 4 * 0x9E3779B97F4A7C15) & MASK) >> 11) + 0.5) / 2**53 for k in keys
    ]
    assert u.tolist() == expected
    big = K.stream_uniforms(np.arange(200_000, dtype=np.uint64), 0, backend)
    assert big.min() > 0.0 and big.max() < 1.0
    assert abs(big.mean() - 0.5) < 0.005


@pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")
def test_backends_bit_identical():
    rng = np.random.default_rng(0)
    keys = rng.integers(0, 2**63, 5000, dtype=np.uint64)
    counts = rng.integers(0, 40, 5000)
    probs = rng.uniform(0, 1, 5000)
    assert np.array_equal(K.stream_uniforms(keys, 7, "numpy"), K.stream_uniforms(keys, 7, "numba"))
    assert np.array_equal(
        K.exact_flag_counts(keys, counts, probs, "numpy"), K.exact_flag_counts(keys, counts, probs, "numba")
    )
    assert np.array_equal(K.derive_keys(5, 1, keys, backend="numpy"), K.derive_keys(5, 1, keys, backend="numba"))


@pytest.mark.parametrize("backend", backends)
def test_exact_flag_counts_is_the_impression_loop(backend):
    keys = np.array([11, 12, 13], dtype=np.uint64)
    counts = np.array([5, 0, 9])
    probs = np.array([0.4, 0.9, 0.7])
    got = K.exact_flag_counts(keys, counts, probs, backend)
    loop = [sum(K.stream_uniforms([k], t, backend)[0] < p for t in range(c)) for k, c, p in zip(keys, counts, probs)]
    assert got.tolist() == loop


@pytest.mark.parametrize("backend", backends)
def test_exact_flag_counts_edges(backend):
    keys = np.arange(4, dtype=np.uint64)
    counts = np.array([10, 10, 0, 3])
    assert K.exact_flag_counts(keys, counts, np.array([0.0, 1.0, 0.5, 1.0]), backend).tolist() == [0, 10, 0, 3]
    with pytest.raises(ValueError):
        K.exact_flag_counts(keys, np.array([1, -1, 0, 0]), np.zeros(4), backend)


def test_hash_ids_is_blake2b():
    ids = ["a", "item-42", "ü"]
    expected = [int.from_bytes(hashlib.blake2b(s.encode(), digest_size=8).digest(), "little") for s in ids]
    assert [int(x) for x in K.hash_ids(ids)] == expected


def test_derive_keys_deterministic_and_sensitive():
    a = K.derive_keys(1, 2, np.arange(5))
    assert np.array_equal(a, K.derive_keys(1, 2, np.arange(5)))
    assert not np.array_equal(a, K.derive_keys(2, 2, np.arange(5)))
    assert not np.array_equal(a, K.derive_keys(1, 3, np.arange(5)))
    assert len(set(a.tolist())) == 5


@pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")
def test_benchmark_script_runs(capsys):
    import runpy
    from pathlib import Path

    script = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    mod = runpy.run_path(str(script))
    assert mod["main"](["--rows", "500", "--repeat", "1"]) == 0
    assert "exact_flag_counts" in capsys.readouterr().out
