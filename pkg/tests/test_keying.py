import threading
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmtext import keying, specfn

M = (1 << 64) - 1
GOLDEN = Path(__file__).parent / "data" / "splitmix64_golden.txt"


def golden_rows():
    rows = []
    for line in GOLDEN.read_text().splitlines():
        seed, *outs = (int(v) for v in line.split())
        rows.append((seed, outs))
    return rows


# --- splitmix64 contract ----------------------------------------------------


def test_golden_file_shape():
    rows = golden_rows()
    assert len(rows) == 100
    assert all(len(outs) == 4 for _, outs in rows)


def test_golden_vectors_scalar():
    for seed, outs in golden_rows():
        rng = keying.SplitMix64(seed)
        assert [rng.next_u64() for _ in range(4)] == outs


def test_golden_vectors_batch():
    rows = golden_rows()
    seeds = np.array([s for s, _ in rows], dtype=np.uint64)
    got = keying.stream_outputs(seeds, 4)
    assert got.tolist() == [outs for _, outs in rows]
    idx = np.array([3] * len(rows))
    assert keying.stream_at(seeds, idx).tolist() == [outs[3] for _, outs in rows]


def test_uniform_conversion():
    seed, outs = golden_rows()[1]
    assert seed == 1
    v = keying.derive_secret_vector(1, 1)
    assert v[0] == (outs[0] >> 11) * 2.0**-53
    assert v[0] == 0.5665615751722809


# --- hash ---------------------------------------------------------------------


def test_hash_examples():
    s = 0xDEADBEEF12345
    assert keying.hash_window([], s) == 1
    assert keying.hash_window([7], s) == (s + 7) % M
    a, b = 11, 42
    assert keying.hash_window([a, b], s) == (((s + a) % M) * s + b) % M


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 2**31 - 1), min_size=0, max_size=6), st.integers(1, M))
def test_hash_batch_matches_bigint(window, key):
    expected = keying.hash_window(window, key)
    got = keying.hash_windows(np.array([window], dtype=np.int64).reshape(1, len(window)), key)
    assert int(got[0]) == expected


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(2, M))
def test_hash_order_sensitive(a, b, key):
    if a != b:
        assert keying.hash_window([a, b], key) != keying.hash_window([b, a], key)


def test_key_validation():
    with pytest.raises(ValueError):
        keying.check_key(0)
    with pytest.raises(ValueError):
        keying.check_key(1 << 64)
    assert keying.check_key(M) == M


# --- greenlist ------------------------------------------------------------------


def test_greenlist_examples():
    for seed in (0, 1, 12345, M - 1):
        g = keying.derive_greenlist(seed, 0.25, 100)
        assert len(g.members) == 25 == g.size
        assert g == keying.derive_greenlist(seed, 0.25, 100)


def test_greenlist_hand_trace():
    # splitmix64(1) outputs mod 3, 2, 1 give j = 1, 1, 0: [0,1,2,3] -> [0,3,2,1] -> [0,2,3,1] -> [2,0,3,1]
    outs = golden_rows()[1][1]
    assert [outs[0] % 4, outs[1] % 3, outs[2] % 2] == [1, 1, 0]
    assert keying.derive_greenlist(1, 0.5, 4).members == frozenset({0, 2})


def test_greenlist_size_rounding():
    assert keying.derive_greenlist(5, 0.29, 100).size == 29
    assert keying.derive_greenlist(5, 0.5, 3).size == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, M), st.sampled_from([0.1, 0.25, 0.5]), st.integers(2, 300))
def test_green_masks_match_scalar(seed, gamma, V):
    g = keying.derive_greenlist(seed, gamma, V)
    mask = keying.green_masks(np.array([seed], dtype=np.uint64), gamma, V)[0]
    assert set(np.flatnonzero(mask).tolist()) == g.members
    toks = np.arange(V)
    hits = keying.green_hits(np.full(V, seed, dtype=np.uint64), toks, gamma, V)
    assert hits.tolist() == mask.tolist()


def test_greenlist_membership_rate():
    n = 100_000
    seeds = keying.stream_outputs(np.array([99], dtype=np.uint64), n)[0]
    hits = keying.green_hits(seeds, np.full(n, 17), 0.25, 100)
    s = int(hits.sum())
    # two-sided binomial test
    p = 2 * min(specfn.binom_pvalue(s, n, 0.25), 1 - specfn.binom_pvalue(s + 1, n, 0.25))
    assert p > 1e-3


def test_greenlist_domain():
    with pytest.raises(ValueError):
        keying.derive_greenlist(1, 0.0, 10)
    with pytest.raises(ValueError):
        keying.derive_greenlist(1, 0.5, 1)


def test_cache_lru_and_threads():
    cache = keying.GreenlistCache(capacity=4)
    for s in range(6):
        cache.get(s, 0.25, 50)
    assert len(cache) == 4
    cache.get(5, 0.25, 50)
    assert cache.hits == 1
    results = {}

    def worker(i):
        results[i] = [cache.get(s % 8, 0.25, 50).members for s in range(200)]

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    ref = results[0]
    assert all(r == ref for r in results.values())
    assert len(cache) <= 4


# --- secret vectors -------------------------------------------------------------


def test_secret_vector_prefix_and_range():
    a = keying.derive_secret_vector(777, 10)
    b = keying.derive_secret_vector(777, 50)
    assert np.array_equal(a, b[:10])
    assert np.all((b >= 0) & (b < 1))
    seeds = np.array([777, 778], dtype=np.uint64)
    assert np.array_equal(keying.secret_matrix(seeds, 50)[0], b)
    assert keying.secret_values(seeds, np.array([49, 0]))[0] == b[49]


def test_secret_vector_uniformity():
    seeds = keying.stream_outputs(np.array([2024], dtype=np.uint64), 10_000)[0]
    vals = keying.secret_matrix(seeds, 100).ravel()
    assert vals.size == 10**6
    ref = np.random.default_rng(1).random(vals.size)
    _, p = specfn.ks_two_sample(vals, ref)
    assert p > 1e-3


def test_cyclic_shift():
    v = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(keying.cyclic_shift(v, 0), v)
    assert keying.cyclic_shift(v, 1).tolist() == [0.2, 0.3, 0.1]
    with pytest.raises(IndexError):
        keying.cyclic_shift(v, 3)


@given(st.integers(1, 40).flatmap(lambda d: st.tuples(st.just(d), st.integers(0, d - 1),
                                                       st.integers(0, d - 1))))
def test_cyclic_shift_composes(dm):
    d, m1, m2 = dm
    v = np.arange(d, dtype=float)
    twice = keying.cyclic_shift(keying.cyclic_shift(v, m1), m2)
    assert np.array_equal(twice, keying.cyclic_shift(v, (m1 + m2) % d))
