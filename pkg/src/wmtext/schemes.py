"""Watermark embedding rules, per-token scores and the sampling loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from . import keying
from .keying import Greenlist
from .langmodel import BOS, MarkovLM

GREENLIST = "greenlist"
GUMBEL = "gumbel"
SCHEMES = (GREENLIST, GUMBEL)

SAMPLER_MODES = ("greedy", "multinomial", "top_p", "top_k")


@dataclass(frozen=True)
class WatermarkConfig:
    scheme: str
    key: int
    vocab_size: int
    window_k: int = 2
    gamma: float = 0.25
    delta: float = 2.0
    theta: float = 1.0
    d: Optional[int] = None
    num_messages: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        keying.check_key(self.key)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.window_k < 0:
            raise ValueError("window_k must be >= 0")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if self.num_messages < 1:
            raise ValueError("num_messages must be >= 1")
        if self.d is not None and self.d < max(self.num_messages, self.vocab_size):
            raise ValueError("d must be >= max(num_messages, vocab_size)")

    @property
    def dimension(self) -> int:
        return self.d if self.d is not None else max(self.num_messages, self.vocab_size)

    def check_message(self, message: int) -> None:
        if not 0 <= message < self.num_messages:
            raise ValueError(f"message must lie in [0, {self.num_messages}) (got {message})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "multinomial"
    top_p: float = 1.0
    top_k: int = 0
    rng_seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "top_p" and not 0.0 < self.top_p <= 1.0:
            raise ValueError("top_p must lie in (0, 1]")
        if self.mode == "top_k" and self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


# ---------------------------------------------------------------------------
# embedding rules
# ---------------------------------------------------------------------------


def bias_logits_greenlist(logits: Sequence[float], greenlist: Greenlist, delta: float) -> np.ndarray:
    out = np.array(logits, dtype=np.float64, copy=True)
    out[greenlist.mask[: out.size]] += delta
    return out


def gumbel_select(dist: Sequence[float], secret: Sequence[float]) -> int:
    """``argmax_v r_v ** (1 / p_v)``, compared as ``ln(r_v) / p_v``.

    Tokens with ``p_v == 0`` never win; ties go to the lowest id.
    """
    p = np.asarray(dist, dtype=np.float64)
    r = np.asarray(secret, dtype=np.float64)[: p.size]
    if not np.any(p > 0):
        raise ValueError("distribution has no positive entry")
    return int(_gumbel_rows(p[None, :], r[None, :])[0])


def _gumbel_rows(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        key = np.log(r) / p
    key[p <= 0] = -np.inf
    # r == 0 with p > 0 scores exactly 0 = exp(-inf); keep it above excluded tokens
    key[(p > 0) & (r <= 0)] = -np.finfo(np.float64).max
    return np.argmax(key, axis=1)


# ---------------------------------------------------------------------------
# per-token scores
# ---------------------------------------------------------------------------


def score_token_greenlist(token: int, greenlist: Greenlist) -> float:
    return 1.0 if token in greenlist else 0.0


def score_token_gumbel(token: int, secret: Sequence[float]) -> float:
    return -math.log1p(-float(secret[token]))


def score_token_np(token: int, secret: Sequence[float], dist: Sequence[float]) -> float:
    """Likelihood-ratio weight ``(1/p_x - 1) * ln(r_x)``."""
    p = float(dist[token])
    r = float(secret[token])
    if p <= 0:
        raise ValueError("token has zero probability")
    if not 0.0 < r < 1.0:
        raise ValueError("secret value must lie strictly inside (0, 1)")
    return (1.0 / p - 1.0) * math.log(r)


def score_token_simplified(token: int, secret: Sequence[float]) -> float:
    r = float(secret[token])
    if r <= 0:
        raise ValueError("secret value must be positive")
    return math.log(r)


def window_at(history: Sequence[int], k: int) -> tuple:
    """Last ``k`` tokens of ``history``, left-padded with the BOS id."""
    if k == 0:
        return ()
    tail = tuple(int(t) for t in history[max(0, len(history) - k):])
    return (BOS,) * (k - len(tail)) + tail


def secret_for_window(window: Sequence[int], cfg: WatermarkConfig, message: int = 0) -> np.ndarray:
    """Shifted secret vector ``r(m)`` for a window, truncated to the vocabulary."""
    seed = keying.hash_window(window, cfg.key)
    r = keying.derive_secret_vector(seed, cfg.dimension)
    if message:
        r = keying.cyclic_shift(r, message)
    return r[: cfg.vocab_size]


def score_sequence_np(tokens: Sequence[int], cfg: WatermarkConfig, lm: MarkovLM,
                      context: Sequence[int] = ()) -> float:
    """Neyman-Pearson score of a sequence; needs the model's distributions."""
    history = list(context)
    total = 0.0
    for i, tok in enumerate(tokens):
        if i >= cfg.window_k:
            dist = lm.next_dist(history, cfg.theta)
            r = secret_for_window(window_at(history, cfg.window_k), cfg)
            total += score_token_np(int(tok), r, dist)
        history.append(int(tok))
    return total


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def truncate(probs: np.ndarray, sampler: SamplerConfig) -> np.ndarray:
    """Apply top-p / top-k to a ``(B, V)`` array and renormalise rows."""
    if sampler.mode not in ("top_p", "top_k"):
        return probs
    order = np.argsort(-probs, axis=1, kind="stable")
    sorted_p = np.take_along_axis(probs, order, axis=1)
    if sampler.mode == "top_k":
        keep_sorted = np.zeros_like(sorted_p, dtype=bool)
        keep_sorted[:, : sampler.top_k] = True
    else:
        csum = np.cumsum(sorted_p, axis=1)
        # keep the smallest prefix whose mass reaches top_p
        keep_sorted = (csum - sorted_p) < sampler.top_p * csum[:, -1:] * (1 - 1e-12)
        keep_sorted[:, 0] = True
    keep = np.zeros_like(keep_sorted)
    np.put_along_axis(keep, order, keep_sorted, axis=1)
    out = np.where(keep, probs, 0.0)
    return out / out.sum(axis=1, keepdims=True)


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    csum = np.cumsum(probs, axis=1)
    target = u * csum[:, -1]
    idx = (csum <= target[:, None]).sum(axis=1)
    # never land on a zero-probability token through rounding at the top end
    idx = np.minimum(idx, probs.shape[1] - 1)
    bad = probs[np.arange(len(idx)), idx] <= 0
    if np.any(bad):
        last_nz = probs.shape[1] - 1 - np.argmax(probs[:, ::-1] > 0, axis=1)
        idx[bad] = last_nz[bad]
    return idx


def sequence_seeds(rng_seed: int, indices: Sequence[int]) -> np.ndarray:
    """Per-sequence sampler stream seeds: output ``i`` of splitmix64(rng_seed)."""
    idx = np.asarray(indices, dtype=np.int64)
    base = np.full(idx.size, rng_seed & keying.MASK64, dtype=np.uint64)
    return keying.stream_at(base, idx)


def _choose(probs: np.ndarray, sampler: SamplerConfig, u: np.ndarray) -> np.ndarray:
    if sampler.mode == "greedy":
        return np.argmax(probs, axis=1)
    return _inverse_cdf(truncate(probs, sampler), u)


def generate_batch(lm: MarkovLM, prompts: Sequence[Sequence[int]], length: int,
                   wm: Optional[WatermarkConfig] = None, message: int = 0,
                   sampler: SamplerConfig = SamplerConfig(),
                   stream_ids: Optional[Sequence[int]] = None) -> list[np.ndarray]:
    """Generate ``length`` tokens after each prompt; returns the continuations.

    Sequence ``i`` draws its sampling randomness from the splitmix64 stream
    ``sequence_seeds(sampler.rng_seed, [stream_ids[i]])``, so results do not
    depend on how prompts are batched.
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    B = len(prompts)
    if B == 0:
        return []
    if wm is not None:
        wm.check_message(message)
        if wm.vocab_size != lm.vocab_size:
            raise ValueError("watermark vocab_size does not match the model")
    if stream_ids is None:
        stream_ids = range(B)
    seeds = sequence_seeds(sampler.rng_seed, stream_ids)
    histories = [list(int(t) for t in p) for p in prompts]
    out = np.empty((B, length), dtype=np.int64)
    V = lm.vocab_size
    theta = wm.theta if wm is not None else sampler.temperature
    if wm is not None and wm.scheme == GUMBEL:
        d = wm.dimension
        cols = (np.arange(V) + message) % d
    for step in range(length):
        probs = lm.dist_rows(histories, theta)
        if wm is None:
            u = keying.secret_values(seeds, np.full(B, step))
            chosen = _choose(probs, sampler, u)
        else:
            windows = np.array([window_at(h, wm.window_k) for h in histories],
                               dtype=np.int64).reshape(B, wm.window_k)
            wseeds = keying.hash_windows(windows, wm.key)
            if wm.scheme == GREENLIST:
                green = keying.green_masks(wseeds, wm.gamma, V)
                with np.errstate(divide="ignore"):
                    logits = np.log(probs)
                logits = logits + wm.delta * green
                logits -= logits.max(axis=1, keepdims=True)
                biased = np.exp(logits)
                biased /= biased.sum(axis=1, keepdims=True)
                u = keying.secret_values(seeds, np.full(B, step))
                chosen = _choose(biased, sampler, u)
            else:
                r = keying.secret_matrix(wseeds, d)[:, cols]
                chosen = _gumbel_rows(truncate(probs, sampler), r)
        out[:, step] = chosen
        for h, c in zip(histories, chosen.tolist()):
            h.append(c)
    return [row for row in out]


def generate(lm: MarkovLM, prompt: Sequence[int], length: int,
             wm: Optional[WatermarkConfig] = None, message: int = 0,
             sampler: SamplerConfig = SamplerConfig()) -> np.ndarray:
    return generate_batch(lm, [prompt], length, wm, message, sampler)[0]


def corrupt(tokens: Sequence[int], rate: float, vocab_size: int, seed: int,
            stream_id: int = 0) -> np.ndarray:
    """Replace each token, independently with probability ``rate``, by a uniform non-BOS id."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("corruption rate must lie in [0, 1]")
    toks = np.array(tokens, dtype=np.int64, copy=True)
    n = toks.size
    if n == 0:
        return toks
    s = sequence_seeds(seed, [stream_id])[0]
    draws = keying.stream_outputs(np.array([s], dtype=np.uint64), 2 * n)[0]
    coin = (draws[:n] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    repl = 1 + (draws[n:] % np.uint64(vocab_size - 1)).astype(np.int64)
    hit = coin < rate
    toks[hit] = repl[hit]
    return toks
