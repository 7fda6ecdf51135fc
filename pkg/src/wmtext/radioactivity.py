"""Detect whether a suspect model was fine-tuned on watermarked text."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import specfn
from .detector import (GLOBAL, DedupTape, DetectionReport, FilterSet, build_selection,
                       make_report, select_positions, token_scores)
from .langmodel import MarkovLM
from .schemes import SamplerConfig, WatermarkConfig, generate_batch

OPEN = "open"
CLOSED = "closed"


@dataclass(frozen=True)
class RadioactivitySetting:
    model_access: str = CLOSED
    supervision: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if self.model_access not in (OPEN, CLOSED):
            raise ValueError(f"model_access must be 'open' or 'closed' (got {self.model_access!r})")
        if not 0.0 <= self.supervision <= 1.0:
            raise ValueError("supervision must lie in [0, 1]")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")


@dataclass
class RadioactivityReport:
    setting: dict
    tokens_scored: int
    score: float
    pvalue: float
    log10_pvalue: float
    per_chunk_pvalues: list
    per_chunk_log10_pvalues: list
    config: dict = field(default_factory=dict)

    @property
    def median_chunk_log10(self) -> float:
        return float(np.median(self.per_chunk_log10_pvalues)) if self.per_chunk_log10_pvalues else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def build_filter(watermarked_corpus: Sequence[Sequence[int]], k: int) -> FilterSet:
    """Set of every k-gram of the corpus."""
    if k < 1:
        raise ValueError("filter needs k >= 1")
    windows = set()
    for doc in watermarked_corpus:
        toks = [int(t) for t in doc]
        windows.update(tuple(toks[i:i + k]) for i in range(len(toks) - k + 1))
    return FilterSet(k, frozenset(windows))


def _chunks(n: int, n_chunks: int) -> list[range]:
    n_chunks = max(1, min(n_chunks, n)) if n else 1
    bounds = np.linspace(0, n, n_chunks + 1).astype(int)
    return [range(bounds[i], bounds[i + 1]) for i in range(n_chunks)]


def _score_docs(docs, cfg, *, filter=None, excludes=None, skip_seen=False, predicted=None,
                dedup=True, max_scored=None) -> DetectionReport:
    """Score documents sequentially against one global tape."""
    k = cfg.window_k
    tape = DedupTape(GLOBAL) if dedup else None
    kept, total = [], 0
    for i, doc in enumerate(docs):
        idx = select_positions(doc, k, tape, filter,
                               excludes[i] if excludes is not None else None,
                               skip_seen_windows=skip_seen,
                               predicted=predicted[i] if predicted is not None else None)
        if max_scored is not None and total + len(idx) > max_scored:
            idx = idx[: max_scored - total]
        kept.append(idx)
        total += len(idx)
        if max_scored is not None and total >= max_scored:
            kept.extend([] for _ in range(len(docs) - i - 1))
            break
    sel = build_selection(docs, kept, k, predicted)
    scores = token_scores(sel, cfg)
    return make_report(float(scores.sum()), int(scores.size), cfg)


def _report(setting: RadioactivitySetting, docs, cfg, n_chunks, config, **kw) -> RadioactivityReport:
    overall = _score_docs(docs, cfg, **kw)
    chunk_p, chunk_l = [], []
    for rng in _chunks(len(docs), n_chunks):
        sub = {}
        for name in ("excludes", "predicted"):
            if kw.get(name) is not None:
                sub[name] = [kw[name][i] for i in rng]
        rest = {k: v for k, v in kw.items() if k not in sub}
        rep = _score_docs([docs[i] for i in rng], cfg, **sub, **rest)
        chunk_p.append(rep.pvalue)
        chunk_l.append(rep.log10_pvalue)
    return RadioactivityReport(
        setting=asdict(setting),
        tokens_scored=overall.tokens_scored,
        score=overall.score,
        pvalue=overall.pvalue,
        log10_pvalue=overall.log10_pvalue,
        per_chunk_pvalues=chunk_p,
        per_chunk_log10_pvalues=chunk_l,
        config={"watermark": cfg.to_dict(), **config},
    )


def detect_closed(suspect: MarkovLM, prompts: Sequence[Sequence[int]], cfg: WatermarkConfig,
                  filter: Optional[FilterSet], gen_length: int,
                  sampler: SamplerConfig = SamplerConfig(),
                  setting: RadioactivitySetting = RadioactivitySetting(CLOSED),
                  n_chunks: int = 10, dedup: bool = True,
                  max_scored: Optional[int] = None) -> RadioactivityReport:
    """Prompt the suspect, then score its (unwatermarked) answers.

    Each answer is scored with the last ``k`` prompt tokens as its first window.
    Windows that are k-grams of the answer's own prompt are skipped, as are
    windows outside ``filter``; a single tape de-duplicates across all answers.
    """
    k = cfg.window_k
    conts = generate_batch(suspect, prompts, gen_length, wm=None, sampler=sampler)
    docs = []
    for p, c in zip(prompts, conts):
        head = list(p)[len(p) - k:] if k else []
        docs.append(np.concatenate([np.asarray(head, dtype=np.int64), c]))
    excludes = [list(p) for p in prompts] if dedup else None
    config = {"gen_length": gen_length, "n_prompts": len(prompts),
              "sampler": asdict(sampler), "filtered": filter is not None,
              "dedup": dedup, "max_scored": max_scored}
    return _report(setting, docs, cfg, n_chunks, config, filter=filter, excludes=excludes,
                   dedup=dedup, max_scored=max_scored)


def reading_predictions(suspect: MarkovLM, text: Sequence[int]) -> np.ndarray:
    """Greedy next-token prediction of the suspect at every prefix of ``text``."""
    toks = [int(t) for t in text]
    return np.array([suspect.greedy(toks[:t]) for t in range(len(toks))], dtype=np.int64)


def detect_open_reading(suspect: MarkovLM, probe_texts: Sequence[Sequence[int]],
                        cfg: WatermarkConfig,
                        setting: RadioactivitySetting = RadioactivitySetting(OPEN),
                        filter: Optional[FilterSet] = None,
                        n_chunks: int = 10, dedup: bool = True,
                        max_scored: Optional[int] = None) -> RadioactivityReport:
    """Forward watermarked texts through the suspect and score its predictions.

    At position ``t`` the window is the input's previous ``k`` tokens and the
    scored token is the suspect's greedy prediction.  Windows already present
    earlier in the same input are skipped; a global tape de-duplicates
    ``(window, prediction)`` pairs.
    """
    docs = [np.asarray(t, dtype=np.int64) for t in probe_texts]
    predicted = [reading_predictions(suspect, d) for d in docs]
    config = {"n_probes": len(docs), "dedup": dedup, "filtered": filter is not None,
              "max_scored": max_scored}
    return _report(setting, docs, cfg, n_chunks, config, filter=filter, skip_seen=dedup,
                   predicted=predicted, dedup=dedup, max_scored=max_scored)


def document_losses(lm: MarkovLM, corpus: Sequence[Sequence[int]],
                    calibration: Optional[Callable[[Sequence[int]], float]] = None) -> np.ndarray:
    """Mean negative log-likelihood per document, optionally divided by a calibration value."""
    out = np.empty(len(corpus))
    for i, doc in enumerate(corpus):
        ll = lm.log_likelihoods(doc)
        loss = float(-np.mean(np.maximum(ll, math.log(specfn.PVALUE_FLOOR))))
        if calibration is not None:
            loss /= calibration(doc)
        out[i] = loss
    return out


def mia_ks_baseline(suspect: MarkovLM, held_in: Sequence[Sequence[int]],
                    held_out: Sequence[Sequence[int]],
                    calibration: Optional[Callable[[Sequence[int]], float]] = None) -> tuple[float, float]:
    """Two-sample K-S test between the suspect's losses on two corpora."""
    if not held_in or not held_out:
        raise ValueError("both corpora must be nonempty")
    a = document_losses(suspect, held_in, calibration)
    b = document_losses(suspect, held_out, calibration)
    return specfn.ks_two_sample(a, b)


def combine_languages(reports: Sequence[RadioactivityReport]) -> float:
    """Fisher combination of independent radioactivity tests."""
    if not reports:
        raise ValueError("need at least one report")
    logs = [max(r.log10_pvalue * specfn.LN10, -1e300) for r in reports]
    return specfn._from_log(specfn.fisher_log_combine([min(l, 0.0) for l in logs]))
