"""Synthetic text sources for desk-scale experiments.

A "source" is a :class:`MarkovLM` whose count table is drawn at random: every
full-order context gets a small random support of successors with
Dirichlet-distributed weights.  Sampling from it yields corpora whose
statistics a trained model can then learn.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .langmodel import BOS, MarkovLM, Vocabulary, _Level, _aggregate
from .schemes import SamplerConfig, WatermarkConfig, generate_batch


def random_source(vocab_size: int = 100, order: int = 2, support: int = 16,
                  concentration: float = 0.5, seed: int = 0) -> MarkovLM:
    """Random sparse order-``order`` Markov source over ids ``1..vocab_size-1``."""
    rng = np.random.default_rng(seed)
    V = vocab_size
    levels = []
    for l in range(order + 1):
        if l < order:
            # uniform back-off levels, only reached through unseen contexts
            levels.append(_Level(np.zeros((0, l), np.int64), np.zeros(0, np.int64), np.zeros(0)))
            continue
        n_ctx = V ** l
        ctx = np.array(np.unravel_index(np.arange(n_ctx), (V,) * l)).T if l else np.zeros((1, 0), np.int64)
        ctx_rows, toks, weights = [], [], []
        for c in ctx:
            succ = rng.choice(np.arange(1, V), size=min(support, V - 1), replace=False)
            w = rng.dirichlet(np.full(succ.size, concentration))
            ctx_rows.append(np.repeat(c[None, :], succ.size, axis=0))
            toks.append(succ)
            weights.append(w * 1000.0)
        levels.append(_aggregate(np.concatenate(ctx_rows).astype(np.int64),
                                 np.concatenate(toks), np.concatenate(weights), V))
    if order > 0:
        uni = np.arange(1, V)
        levels[0] = _Level(np.zeros((V - 1, 0), np.int64), uni, np.ones(V - 1))
    return MarkovLM(Vocabulary.synthetic(V), order, 0.0, levels)


def sample_corpus(source: MarkovLM, n_docs: int, length: int, seed: int = 0,
                  wm: WatermarkConfig | None = None, message: int = 0,
                  prompts: Sequence[Sequence[int]] | None = None,
                  batch: int = 2048) -> list[np.ndarray]:
    """``n_docs`` documents of ``length`` tokens, optionally watermarked."""
    sampler = SamplerConfig(mode="multinomial", rng_seed=seed)
    if prompts is None:
        prompts = [[BOS]] * n_docs
    out: list[np.ndarray] = []
    for start in range(0, n_docs, batch):
        stop = min(n_docs, start + batch)
        out.extend(generate_batch(source, prompts[start:stop], length, wm=wm, message=message,
                                  sampler=sampler, stream_ids=range(start, stop)))
    return out


def repetitive_corpus(n_docs: int, length: int, vocab_size: int = 100, n_phrases: int = 4,
                      phrase_len: int = 6, noise: float = 0.05, seed: int = 0) -> list[np.ndarray]:
    """Documents made of a few phrases repeated over and over, like bullet lists."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        phrases = [rng.integers(1, vocab_size, size=phrase_len) for _ in range(n_phrases)]
        parts, total = [], 0
        while total < length:
            p = phrases[rng.integers(n_phrases)]
            parts.append(p)
            total += p.size
        doc = np.concatenate(parts)[:length].copy()
        flip = rng.random(length) < noise
        doc[flip] = rng.integers(1, vocab_size, size=int(flip.sum()))
        docs.append(doc)
    return docs
