"""Corpus-scale watermark detection with de-duplicated scoring.

Detection runs in two phases.  :func:`select_positions` walks a document and
decides which ``(window, token)`` pairs are scored, applying the filter, the
window exclusion and the dedup tape.  :func:`score_selected` then hashes the
selected windows and evaluates the per-token scores in one vectorised pass.
Because the selection does not depend on the key, callers that test many keys
on the same corpus (calibration) reuse it.
"""
from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, asdict, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import keying, specfn
from .schemes import GREENLIST, GUMBEL, WatermarkConfig

PER_DOCUMENT = "per_document"
GLOBAL = "global"


class DedupTape:
    """Insertion-only set of already scored ``(window..., token)`` tuples.

    ``add_if_absent`` is atomic, so a tape shared between threads scores each
    tuple at most once.
    """

    def __init__(self, scope: str = PER_DOCUMENT):
        if scope not in (PER_DOCUMENT, GLOBAL):
            raise ValueError(f"unknown tape scope {scope!r}")
        self.scope = scope
        self._seen: set = set()
        self._lock = threading.Lock()

    def add_if_absent(self, item: tuple) -> bool:
        with self._lock:
            if item in self._seen:
                return False
            self._seen.add(item)
            return True

    def __contains__(self, item: tuple) -> bool:
        return item in self._seen

    def __len__(self) -> int:
        return len(self._seen)


@dataclass(frozen=True)
class FilterSet:
    k: int
    windows: frozenset

    def __contains__(self, window: tuple) -> bool:
        return window in self.windows

    def __len__(self) -> int:
        return len(self.windows)


@dataclass
class DetectionReport:
    scheme: str
    tokens_scored: int
    score: float
    pvalue: float
    log10_pvalue: float
    z_pvalue: float
    decoded_message: Optional[int] = None
    per_message_pvalues: Optional[list] = None
    empty: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass
class Selection:
    """Scored positions of one or more documents, ready for vectorised scoring."""
    windows: np.ndarray  # (n, k)
    tokens: np.ndarray  # (n,)
    doc_index: np.ndarray  # (n,)
    num_docs: int


def kgrams(tokens: Sequence[int], k: int) -> set:
    toks = [int(t) for t in tokens]
    return {tuple(toks[i:i + k]) for i in range(len(toks) - k + 1)} if len(toks) >= k else set()


def select_positions(tokens: Sequence[int], k: int, tape: Optional[DedupTape] = None,
                     filter: Optional[FilterSet] = None,
                     exclude_windows_from: Optional[Sequence[int]] = None,
                     skip_seen_windows: bool = False,
                     predicted: Optional[Sequence[int]] = None) -> list[int]:
    """Indices ``t >= k`` whose ``(window, token)`` pair gets scored.

    Rules, in order: the window must be in ``filter`` (when given); it must not
    be a k-gram of ``exclude_windows_from``; with ``skip_seen_windows`` it must
    not have occurred earlier in this document; finally the pair must be new to
    the ``tape`` (``tape=None`` disables de-duplication).  ``predicted``
    replaces the scored token at each position (reading mode).
    """
    toks = [int(t) for t in tokens]
    if filter is not None and filter.k != k:
        raise ValueError("filter k-gram length does not match the watermark window")
    excluded = kgrams(exclude_windows_from, k) if exclude_windows_from is not None else None
    seen_windows: set = set()
    keep = []
    for t in range(k, len(toks)):
        window = tuple(toks[t - k:t])
        if skip_seen_windows:
            # k-grams ending strictly before position t-1
            if t - 1 >= k:
                seen_windows.add(tuple(toks[t - 1 - k:t - 1]))
            if window in seen_windows:
                continue
        if filter is not None and window not in filter:
            continue
        if excluded is not None and window in excluded:
            continue
        tok = toks[t] if predicted is None else int(predicted[t])
        if tape is not None and not tape.add_if_absent(window + (tok,)):
            continue
        keep.append(t)
    return keep


def build_selection(docs: Sequence[Sequence[int]], kept: Sequence[Sequence[int]], k: int,
                    predicted: Optional[Sequence[Sequence[int]]] = None) -> Selection:
    win_parts, tok_parts, doc_parts = [], [], []
    for i, (doc, idx) in enumerate(zip(docs, kept)):
        if not len(idx):
            continue
        arr = np.asarray(doc, dtype=np.int64)
        idx = np.asarray(idx, dtype=np.int64)
        if k:
            win_parts.append(arr[idx[:, None] + np.arange(-k, 0)[None, :]])
        else:
            win_parts.append(np.zeros((idx.size, 0), dtype=np.int64))
        src = arr if predicted is None else np.asarray(predicted[i], dtype=np.int64)
        tok_parts.append(src[idx])
        doc_parts.append(np.full(idx.size, i, dtype=np.int64))
    if not tok_parts:
        return Selection(np.zeros((0, k), np.int64), np.zeros(0, np.int64),
                         np.zeros(0, np.int64), len(docs))
    return Selection(np.concatenate(win_parts), np.concatenate(tok_parts),
                     np.concatenate(doc_parts), len(docs))


def token_scores(sel: Selection, cfg: WatermarkConfig, score: str = "standard") -> np.ndarray:
    """Per-token scores of every selected pair under ``cfg``'s key."""
    if sel.tokens.size == 0:
        return np.zeros(0)
    seeds = keying.hash_windows(sel.windows, cfg.key)
    if cfg.scheme == GREENLIST:
        return keying.green_hits(seeds, sel.tokens, cfg.gamma, cfg.vocab_size).astype(np.float64)
    r = keying.secret_values(seeds, sel.tokens)
    if score == "simplified":
        with np.errstate(divide="ignore"):
            return np.log(r)
    return -np.log1p(-r)


def _null_moments(cfg: WatermarkConfig) -> tuple[float, float]:
    if cfg.scheme == GREENLIST:
        return cfg.gamma, math.sqrt(cfg.gamma * (1.0 - cfg.gamma))
    return 1.0, 1.0


def log_pvalue(score: float, T: int, cfg: WatermarkConfig, kind: str = "standard") -> float:
    """Natural-log p-value of an aggregated score over ``T`` tokens."""
    if T == 0:
        return 0.0
    if cfg.scheme == GREENLIST:
        return specfn.binom_log_pvalue(int(round(score)), T, cfg.gamma)
    if kind == "simplified":
        return specfn.lower_gamma_log_pvalue(min(score, 0.0), T)
    return specfn.gamma_log_pvalue(max(score, 0.0), T)


def make_report(score: float, T: int, cfg: WatermarkConfig, kind: str = "standard") -> DetectionReport:
    if T == 0:
        return DetectionReport(cfg.scheme, 0, 0.0, 1.0, 0.0, 1.0, empty=True)
    logp = log_pvalue(score, T, cfg, kind)
    if kind == "simplified":
        # ln r has mean -1 and unit variance under H0; larger means more watermarked
        z = (score + T) / math.sqrt(T)
    else:
        mu, sigma = _null_moments(cfg)
        z = (score - mu * T) / (sigma * math.sqrt(T))
    return DetectionReport(
        scheme=cfg.scheme,
        tokens_scored=int(T),
        score=float(score),
        pvalue=specfn._from_log(logp),
        log10_pvalue=specfn.log10(logp),
        z_pvalue=specfn.z_pvalue(z),
    )


def score_selected(sel: Selection, cfg: WatermarkConfig, score: str = "standard") -> list[DetectionReport]:
    """One report per document of the selection."""
    per_token = token_scores(sel, cfg, score)
    sums = np.bincount(sel.doc_index, weights=per_token, minlength=sel.num_docs)
    counts = np.bincount(sel.doc_index, minlength=sel.num_docs)
    return [make_report(float(s), int(n), cfg, score) for s, n in zip(sums, counts)]


def score_text(tokens: Sequence[int], cfg: WatermarkConfig,
               tape: Optional[DedupTape] = None,
               filter: Optional[FilterSet] = None,
               exclude_windows_from: Optional[Sequence[int]] = None,
               score: str = "standard") -> DetectionReport:
    """Score one document; the tape is updated in place.

    Pass ``DedupTape()`` for per-document de-duplication, a shared tape for
    global de-duplication, or ``None`` to score every position.
    """
    kept = select_positions(tokens, cfg.window_k, tape, filter, exclude_windows_from)
    sel = build_selection([tokens], [kept], cfg.window_k)
    return score_selected(sel, cfg, score)[0]


def score_corpus(docs: Sequence[Sequence[int]], cfg: WatermarkConfig,
                 tape_scope: str = PER_DOCUMENT, dedup: bool = True,
                 filter: Optional[FilterSet] = None) -> list[DetectionReport]:
    """Per-document reports; with ``tape_scope='global'`` the tape is shared in order."""
    shared = DedupTape(GLOBAL) if tape_scope == GLOBAL and dedup else None
    if tape_scope not in (PER_DOCUMENT, GLOBAL):
        raise ValueError(f"unknown tape scope {tape_scope!r}")
    kept = []
    for doc in docs:
        tape = shared if shared is not None else (DedupTape() if dedup else None)
        kept.append(select_positions(doc, cfg.window_k, tape, filter))
    return score_selected(build_selection(docs, kept, cfg.window_k), cfg)


def aggregate(reports: Iterable[DetectionReport], cfg: WatermarkConfig) -> DetectionReport:
    """Pool scores and counts of several reports into a single test."""
    reports = list(reports)
    T = sum(r.tokens_scored for r in reports)
    s = sum(r.score for r in reports)
    return make_report(s, T, cfg)


# ---------------------------------------------------------------------------
# multi-bit
# ---------------------------------------------------------------------------


def identification_log_fpr(log_fpr: float, n: int) -> float:
    """ln of ``1 - (1 - FPR)^n`` from ln FPR, accurate for tiny FPRs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n == 1 or log_fpr == -math.inf:
        return log_fpr
    if log_fpr >= 0.0:
        return 0.0
    if log_fpr < -700.0:
        # 1 - (1-p)^n = n p (1 + O(n p))
        return log_fpr + math.log(n)
    p = math.exp(log_fpr)
    return math.log(-math.expm1(n * math.log1p(-p)))


def identification_fpr(tau_fpr: float, n: int) -> float:
    """Global false-positive rate ``1 - (1 - FPR)^n`` over ``n`` identities."""
    if not 0.0 <= tau_fpr <= 1.0:
        raise ValueError("FPR must lie in [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    if tau_fpr == 0.0:
        return 0.0
    if n == 1:
        return tau_fpr
    return -math.expm1(n * math.log1p(-tau_fpr))


def multibit_scores(sel: Selection, cfg: WatermarkConfig) -> np.ndarray:
    """``(num_docs, M)`` score vectors: sum of ``shift(f(r), x_t)`` over scored tokens."""
    M = cfg.num_messages
    out = np.zeros((sel.num_docs, M))
    if sel.tokens.size == 0:
        return out
    d = cfg.dimension
    seeds = keying.hash_windows(sel.windows, cfg.key)
    f = -np.log1p(-keying.secret_matrix(seeds, d))
    cols = (sel.tokens[:, None] + np.arange(M)[None, :]) % d
    contrib = np.take_along_axis(f, cols, axis=1)
    np.add.at(out, sel.doc_index, contrib)
    return out


def multibit_report(scores: np.ndarray, T: int, cfg: WatermarkConfig) -> DetectionReport:
    M = cfg.num_messages
    if T == 0:
        return DetectionReport(cfg.scheme, 0, 0.0, 1.0, 0.0, 1.0, decoded_message=0,
                               per_message_pvalues=[1.0] * M, empty=True)
    logps = [specfn.gamma_log_pvalue(max(float(s), 0.0), T) for s in scores]
    m = int(np.argmax(scores))
    log_global = identification_log_fpr(logps[m], M)
    z = (float(scores[m]) - T) / math.sqrt(T)
    return DetectionReport(
        scheme=cfg.scheme,
        tokens_scored=int(T),
        score=float(scores[m]),
        pvalue=specfn._from_log(log_global),
        log10_pvalue=specfn.log10(log_global),
        z_pvalue=identification_fpr(specfn.z_pvalue(z), M),
        decoded_message=m,
        per_message_pvalues=[specfn._from_log(lp) for lp in logps],
    )


def score_text_multibit(tokens: Sequence[int], cfg: WatermarkConfig,
                        tape: Optional[DedupTape] = None,
                        filter: Optional[FilterSet] = None,
                        exclude_windows_from: Optional[Sequence[int]] = None) -> DetectionReport:
    """Decode the message index of a Gumbel-watermarked text.

    The decoded message maximises the score (equivalently minimises its
    p-value, ties to the lowest index) and the reported p-value is corrected
    for the ``M`` candidates.
    """
    if cfg.scheme != GUMBEL:
        raise ValueError("multi-bit decoding needs the gumbel scheme")
    kept = select_positions(tokens, cfg.window_k, tape, filter, exclude_windows_from)
    sel = build_selection([tokens], [kept], cfg.window_k)
    return multibit_report(multibit_scores(sel, cfg)[0], len(kept), cfg)


def score_corpus_multibit(docs: Sequence[Sequence[int]], cfg: WatermarkConfig,
                          dedup: bool = True) -> list[DetectionReport]:
    if cfg.scheme != GUMBEL:
        raise ValueError("multi-bit decoding needs the gumbel scheme")
    kept = [select_positions(doc, cfg.window_k, DedupTape() if dedup else None) for doc in docs]
    sel = build_selection(docs, kept, cfg.window_k)
    scores = multibit_scores(sel, cfg)
    return [multibit_report(scores[i], len(kept[i]), cfg) for i in range(len(docs))]


# ---------------------------------------------------------------------------
# FPR calibration
# ---------------------------------------------------------------------------

DEFAULT_LEVELS = (1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class CalibrationRow:
    level: float
    empirical_dedup: float
    empirical_raw: float
    n_tests: int


def calibration_pvalues(corpus: Sequence[Sequence[int]], cfg: WatermarkConfig,
                        keys: Sequence[int], dedup: bool = True) -> np.ndarray:
    """``(len(keys), len(corpus))`` p-values, fresh tape per document."""
    k = cfg.window_k
    kept = [select_positions(doc, k, DedupTape() if dedup else None) for doc in corpus]
    sel = build_selection(corpus, kept, k)
    counts = np.bincount(sel.doc_index, minlength=len(corpus))
    out = np.empty((len(keys), len(corpus)))
    for i, key in enumerate(keys):
        kcfg = _with_key(cfg, key)
        sums = np.bincount(sel.doc_index, weights=token_scores(sel, kcfg), minlength=len(corpus))
        for j in range(len(corpus)):
            out[i, j] = math.exp(log_pvalue(float(sums[j]), int(counts[j]), kcfg))
    return out


def _with_key(cfg: WatermarkConfig, key: int) -> WatermarkConfig:
    d = cfg.to_dict()
    d["key"] = int(key)
    return WatermarkConfig(**d)


def default_keys(n: int = 10, base: int = 0x5EED) -> list[int]:
    return [keying.splitmix64_mix(base + i) | 1 for i in range(n)]


def calibrate_fpr(corpus: Sequence[Sequence[int]], cfg: WatermarkConfig,
                  thresholds: Sequence[float] = DEFAULT_LEVELS,
                  keys: Optional[Sequence[int]] = None) -> list[CalibrationRow]:
    """Empirical FPR at each theoretical level, with and without de-duplication."""
    keys = list(keys) if keys is not None else default_keys()
    p_dedup = calibration_pvalues(corpus, cfg, keys, dedup=True).ravel()
    p_raw = calibration_pvalues(corpus, cfg, keys, dedup=False).ravel()
    return [CalibrationRow(float(a), float(np.mean(p_dedup <= a)), float(np.mean(p_raw <= a)),
                           int(p_dedup.size)) for a in thresholds]


def summarize(reports: Sequence[DetectionReport], levels: Sequence[float] = DEFAULT_LEVELS,
              bins: int = 10) -> dict:
    """Mean log10(p), empirical FPR per level and a p-value histogram."""
    ps = np.array([r.pvalue for r in reports]) if reports else np.zeros(0)
    logs = np.array([r.log10_pvalue for r in reports]) if reports else np.zeros(0)
    hist, edges = np.histogram(ps, bins=bins, range=(0.0, 1.0))
    return {
        "n_documents": len(reports),
        "mean_log10_pvalue": float(logs.mean()) if logs.size else 0.0,
        "mean_pvalue": float(ps.mean()) if ps.size else 1.0,
        "fpr": [{"level": float(a), "empirical": float(np.mean(ps <= a)) if ps.size else 0.0}
                for a in levels],
        "histogram": {"edges": [float(e) for e in edges], "counts": [int(c) for c in hist]},
    }
