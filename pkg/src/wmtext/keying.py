"""Bit-exact derivation of per-position watermark secrets.

Contract (other implementations must match it bit for bit):

* window hash: ``h <- (h * key + x) mod (2**64 - 1)`` for each token ``x`` of
  the window, starting from ``h = 1``.
* PRNG: splitmix64 seeded with the hash.  ``next()`` adds the golden gamma
  ``0x9E3779B97F4A7C15`` to the state and returns
  ``z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27; z *= 0x94D049BB133111EB;
  z ^= z >> 31``.  Output ``i`` (0-based) therefore only depends on
  ``seed + (i + 1) * gamma`` and can be computed directly.
* uniform: ``(u64 >> 11) * 2**-53``, in ``[0, 1)``.
* greenlist: Fisher-Yates over ``[0, V)`` for ``i = V-1 .. 1`` with
  ``j = next() mod (i + 1)``; the greenlist is the first ``floor(gamma * V)``
  entries of the shuffled array.
* secret vector: the first ``d`` uniforms of the stream.
"""
from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit

MASK64 = (1 << 64) - 1
HASH_MODULUS = (1 << 64) - 1  # 2**64 - 1, not 2**64

SM_GAMMA = 0x9E3779B97F4A7C15
SM_MUL1 = 0xBF58476D1CE4E5B9
SM_MUL2 = 0x94D049BB133111EB

_U_GAMMA = np.uint64(SM_GAMMA)
_U_MUL1 = np.uint64(SM_MUL1)
_U_MUL2 = np.uint64(SM_MUL2)
_U_M1 = np.uint64(HASH_MODULUS)
_U_LO32 = np.uint64(0xFFFFFFFF)
_U_ONE = np.uint64(1)
_U_30 = np.uint64(30)
_U_27 = np.uint64(27)
_U_31 = np.uint64(31)
_U_32 = np.uint64(32)
_U_11 = np.uint64(11)
_INV_2_53 = 1.0 / 9007199254740992.0

DEFAULT_CACHE_SIZE = 1 << 16


# ---------------------------------------------------------------------------
# scalar reference path (plain Python integers)
# ---------------------------------------------------------------------------


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * SM_MUL1) & MASK64
    z = ((z ^ (z >> 27)) * SM_MUL2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential splitmix64 stream."""

    def __init__(self, seed: int):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + SM_GAMMA) & MASK64
        return splitmix64_mix(self.state)

    def next_float(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def below(self, n: int) -> int:
        # modulo bias is at most n / 2**64
        return self.next_u64() % n


def u64_to_unit(u: int) -> float:
    return (u >> 11) * _INV_2_53


def check_key(key: int) -> int:
    key = int(key)
    if not 1 <= key <= MASK64:
        raise ValueError(f"secret key must be a 64-bit integer >= 1 (got {key})")
    return key


def hash_window(window: Sequence[int], key: int) -> int:
    """Hash a watermark window with the multiplicative recurrence."""
    h = 1
    for x in window:
        h = (h * key + int(x)) % HASH_MODULUS
    return h


def _greenlist_size(gamma: float, vocab_size: int) -> int:
    # rounding guards against 0.29 * 100 == 28.999999999999996
    return int(math.floor(round(gamma * vocab_size, 9)))


def shuffled_vocab(seed: int, vocab_size: int) -> list[int]:
    """Fisher-Yates permutation of ``range(vocab_size)`` driven by splitmix64(seed)."""
    perm = list(range(vocab_size))
    rng = SplitMix64(seed)
    for i in range(vocab_size - 1, 0, -1):
        j = rng.below(i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return perm


@dataclass(frozen=True)
class Greenlist:
    members: frozenset
    size: int
    vocab_size: int
    mask: np.ndarray = field(repr=False, compare=False)

    def __contains__(self, token: int) -> bool:
        return 0 <= token < self.vocab_size and bool(self.mask[token])


def _build_greenlist(seed: int, gamma: float, vocab_size: int) -> Greenlist:
    size = _greenlist_size(gamma, vocab_size)
    perm = shuffled_vocab(seed, vocab_size)
    mask = np.zeros(vocab_size, dtype=bool)
    mask[perm[:size]] = True
    mask.setflags(write=False)
    return Greenlist(frozenset(perm[:size]), size, vocab_size, mask)


class GreenlistCache:
    """Thread-safe LRU cache of derived greenlists keyed by (seed, gamma, |V|)."""

    def __init__(self, capacity: int = DEFAULT_CACHE_SIZE):
        if capacity < 0:
            raise ValueError("cache capacity must be nonnegative")
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, seed: int, gamma: float, vocab_size: int) -> Greenlist:
        key = (int(seed), float(gamma), int(vocab_size))
        with self._lock:
            found = self._data.get(key)
            if found is not None:
                self._data.move_to_end(key)
                self.hits += 1
                return found
            self.misses += 1
        built = _build_greenlist(*key)
        with self._lock:
            self._data[key] = built
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)
        return built

    def clear(self) -> None:
        with self._lock:
            self._data.clear()

    def __len__(self) -> int:
        return len(self._data)


_default_cache = GreenlistCache()


def set_greenlist_cache_capacity(capacity: int) -> None:
    global _default_cache
    _default_cache = GreenlistCache(capacity)


def derive_greenlist(seed: int, gamma: float, vocab_size: int,
                     cache: GreenlistCache | None = None) -> Greenlist:
    """Greenlist of ``floor(gamma * vocab_size)`` tokens for a window seed."""
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"gamma must lie in (0, 1) (got {gamma})")
    if vocab_size < 2:
        raise ValueError(f"vocabulary needs at least 2 tokens (got {vocab_size})")
    return (cache or _default_cache).get(seed, gamma, vocab_size)


def derive_secret_vector(seed: int, d: int) -> np.ndarray:
    """First ``d`` uniforms of the splitmix64 stream seeded with ``seed``."""
    if d < 1:
        raise ValueError(f"secret vector dimension must be >= 1 (got {d})")
    return _secret_matrix(np.array([seed & MASK64], dtype=np.uint64), d)[0]


def cyclic_shift(vector: np.ndarray, m: int) -> np.ndarray:
    """Left rotation: ``out[x] = vector[(x + m) % d]``."""
    d = len(vector)
    if not 0 <= m < d:
        raise IndexError(f"shift {m} out of range for dimension {d}")
    return np.concatenate([vector[m:], vector[:m]])


# ---------------------------------------------------------------------------
# compiled batch path
# ---------------------------------------------------------------------------


@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> _U_30)) * _U_MUL1
    z = (z ^ (z >> _U_27)) * _U_MUL2
    return z ^ (z >> _U_31)


@njit(cache=True)
def _stream_at(seed, index):
    # output #index of the stream; multiplication wraps mod 2**64
    return _mix(seed + np.uint64(index + 1) * _U_GAMMA)


@njit(cache=True)
def _mulmod_m1(a, b):
    a_lo = a & _U_LO32
    a_hi = a >> _U_32
    b_lo = b & _U_LO32
    b_hi = b >> _U_32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _U_32) + (lh & _U_LO32) + (hl & _U_LO32)
    lo = ((mid & _U_LO32) << _U_32) | (ll & _U_LO32)
    hi = hh + (lh >> _U_32) + (hl >> _U_32) + (mid >> _U_32)
    # 2**64 == 1 (mod 2**64 - 1)
    r = hi + lo
    if r < lo:
        r += _U_ONE
    if r >= _U_M1:
        r -= _U_M1
    return r


@njit(cache=True)
def _addmod_m1(a, x):
    r = a + x
    if r < a:
        r += _U_ONE
    if r >= _U_M1:
        r -= _U_M1
    return r


@njit(cache=True)
def _hash_windows(windows, key):
    n, k = windows.shape
    out = np.empty(n, dtype=np.uint64)
    s = key
    if s >= _U_M1:
        s -= _U_M1
    for i in range(n):
        h = _U_ONE
        for j in range(k):
            h = _addmod_m1(_mulmod_m1(h, s), np.uint64(windows[i, j]))
        out[i] = h
    return out


@njit(cache=True)
def _is_green(seed, token, vocab_size, green_size):
    # follow one token through the Fisher-Yates shuffle
    pos = token
    t = 0
    for i in range(vocab_size - 1, 0, -1):
        if pos > i or i < green_size:
            break
        j = np.int64(_stream_at(seed, t) % np.uint64(i + 1))
        if pos == i:
            pos = j
        elif pos == j:
            pos = i
        t += 1
    return pos < green_size


@njit(cache=True)
def _green_hits(seeds, tokens, vocab_size, green_size):
    out = np.empty(seeds.shape[0], dtype=np.bool_)
    for i in range(seeds.shape[0]):
        out[i] = _is_green(seeds[i], tokens[i], vocab_size, green_size)
    return out


@njit(cache=True)
def _green_masks(seeds, vocab_size, green_size):
    out = np.zeros((seeds.shape[0], vocab_size), dtype=np.bool_)
    perm = np.empty(vocab_size, dtype=np.int64)
    for r in range(seeds.shape[0]):
        for v in range(vocab_size):
            perm[v] = v
        t = 0
        for i in range(vocab_size - 1, 0, -1):
            j = np.int64(_stream_at(seeds[r], t) % np.uint64(i + 1))
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
            t += 1
        for v in range(green_size):
            out[r, perm[v]] = True
    return out


@njit(cache=True)
def _uniform_at(seeds, indices):
    out = np.empty(seeds.shape[0], dtype=np.float64)
    for i in range(seeds.shape[0]):
        out[i] = np.float64(_stream_at(seeds[i], indices[i]) >> _U_11) * _INV_2_53
    return out


@njit(cache=True)
def _secret_matrix(seeds, d):
    out = np.empty((seeds.shape[0], d), dtype=np.float64)
    for i in range(seeds.shape[0]):
        for x in range(d):
            out[i, x] = np.float64(_stream_at(seeds[i], x) >> _U_11) * _INV_2_53
    return out


@njit(cache=True)
def _stream_at_many(seeds, indices):
    out = np.empty(seeds.shape[0], dtype=np.uint64)
    for i in range(seeds.shape[0]):
        out[i] = _stream_at(seeds[i], indices[i])
    return out


@njit(cache=True)
def _stream_outputs(seeds, count):
    out = np.empty((seeds.shape[0], count), dtype=np.uint64)
    for i in range(seeds.shape[0]):
        for x in range(count):
            out[i, x] = _stream_at(seeds[i], x)
    return out


# thin numpy-facing wrappers -------------------------------------------------


def as_windows(windows: Iterable[Sequence[int]] | np.ndarray, k: int) -> np.ndarray:
    arr = np.asarray(windows, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, k), dtype=np.int64)
    return arr.reshape(-1, k)


def hash_windows(windows: np.ndarray, key: int) -> np.ndarray:
    """Vectorised :func:`hash_window` over the rows of an ``(n, k)`` array."""
    windows = np.ascontiguousarray(windows, dtype=np.int64)
    if windows.ndim != 2:
        raise ValueError("windows must be a 2-D array")
    return _hash_windows(windows, np.uint64(check_key(key)))


def green_hits(seeds: np.ndarray, tokens: np.ndarray, gamma: float, vocab_size: int) -> np.ndarray:
    """Greenlist membership of ``tokens[i]`` for window seed ``seeds[i]``."""
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    tokens = np.ascontiguousarray(tokens, dtype=np.int64)
    return _green_hits(seeds, tokens, vocab_size, _greenlist_size(gamma, vocab_size))


def green_masks(seeds: np.ndarray, gamma: float, vocab_size: int) -> np.ndarray:
    """Boolean ``(n, vocab_size)`` greenlist masks for a batch of seeds."""
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    return _green_masks(seeds, vocab_size, _greenlist_size(gamma, vocab_size))


def secret_values(seeds: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Entry ``indices[i]`` of the secret vector of ``seeds[i]``; O(1) each."""
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    return _uniform_at(seeds, indices)


def secret_matrix(seeds: np.ndarray, d: int) -> np.ndarray:
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    return _secret_matrix(seeds, d)


def stream_at(seeds: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Raw u64 output ``indices[i]`` of the stream seeded with ``seeds[i]``."""
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    indices = np.ascontiguousarray(indices, dtype=np.int64)
    return _stream_at_many(seeds, indices)


def stream_outputs(seeds: np.ndarray, count: int) -> np.ndarray:
    """First ``count`` raw u64 outputs of each seed's stream."""
    seeds = np.ascontiguousarray(seeds, dtype=np.uint64)
    return _stream_outputs(seeds, count)
