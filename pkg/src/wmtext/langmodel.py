"""Count-based order-n Markov language model with stupid-backoff lookup.

Counts are kept per context length ``l = 0..order`` as flat tables
``(contexts[N, l], tokens[N], counts[N])``.  Documents are left-padded with
``order`` begin-of-sequence tokens (id 0) when counting.
"""
from __future__ import annotations

import io
import math
import struct
import threading
from collections import Counter
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence

import numpy as np

BOS = 0
BOS_TOKEN = "<s>"
MAGIC = b"WMLM"
FORMAT_VERSION = 1

TokenSequence = Sequence[int]


def _byte_token(b: int) -> str:
    return f"<0x{b:02X}>"


class Vocabulary:
    """Bijective token <-> id table; id 0 is the begin-of-sequence token.

    With ``byte_fallback`` the 256 byte tokens ``<0x00>``..``<0xFF>`` occupy
    ids 1..256 and unknown words are spelled out in UTF-8 bytes.
    """

    def __init__(self, id_to_token: Sequence[str]):
        tokens = list(id_to_token)
        if not tokens or tokens[0] != BOS_TOKEN:
            raise ValueError("vocabulary must start with the begin-of-sequence token")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.byte_fallback = len(tokens) > 256 and all(
            tokens[1 + b] == _byte_token(b) for b in range(256))

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    @classmethod
    def synthetic(cls, size: int) -> "Vocabulary":
        """``<s>, w1, ..., w{size-1}``; handy for id-level experiments."""
        if size < 2:
            raise ValueError("vocabulary needs at least 2 tokens")
        return cls([BOS_TOKEN] + [f"w{i}" for i in range(1, size)])

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1,
              byte_fallback: bool = True) -> "Vocabulary":
        reserved = {BOS_TOKEN} | {_byte_token(b) for b in range(256)}
        freq = Counter(w for text in texts for w in text.split() if w not in reserved)
        words = sorted((w for w, c in freq.items() if c >= min_freq),
                       key=lambda w: (-freq[w], w))
        head = [BOS_TOKEN]
        if byte_fallback:
            head += [_byte_token(b) for b in range(256)]
        return cls(head + words)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            tid = self.token_to_id.get(word)
            if tid is not None and (not self.byte_fallback or tid > 256 or word == BOS_TOKEN):
                ids.append(tid)
            elif self.byte_fallback:
                ids.extend(1 + b for b in word.encode("utf-8"))
            else:
                raise KeyError(f"unknown token {word!r} and no byte fallback")
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        pending = bytearray()
        for i in ids:
            i = int(i)
            if self.byte_fallback and 1 <= i <= 256:
                pending.append(i - 1)
                continue
            if pending:
                words.append(pending.decode("utf-8", errors="replace"))
                pending.clear()
            if i != BOS:
                words.append(self.id_to_token[i])
        if pending:
            words.append(pending.decode("utf-8", errors="replace"))
        return " ".join(words)


# ---------------------------------------------------------------------------
# count tables
# ---------------------------------------------------------------------------


@dataclass
class _Level:
    contexts: np.ndarray  # (N, l) int64
    tokens: np.ndarray  # (N,) int64
    counts: np.ndarray  # (N,) float64


def _aggregate(contexts: np.ndarray, tokens: np.ndarray, weights: np.ndarray,
               vocab_size: int) -> _Level:
    l = contexts.shape[1]
    if tokens.size == 0:
        return _Level(np.zeros((0, l), np.int64), np.zeros(0, np.int64), np.zeros(0))
    rows = np.column_stack([contexts, tokens]).astype(np.int64)
    if (l + 1) * math.log2(max(vocab_size, 2)) < 62:
        codes = np.zeros(rows.shape[0], dtype=np.int64)
        for c in range(l + 1):
            codes = codes * vocab_size + rows[:, c]
        _, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
        uniq = rows[first]
    else:
        uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    summed = np.bincount(inverse.ravel(), weights=weights, minlength=uniq.shape[0])
    return _Level(uniq[:, :l].copy(), uniq[:, l].copy(), summed)


def _count_corpus(corpus: Sequence[TokenSequence], order: int, vocab_size: int,
                  weight: float = 1.0) -> list[_Level]:
    per_level_ctx: list[list[np.ndarray]] = [[] for _ in range(order + 1)]
    per_level_tok: list[list[np.ndarray]] = [[] for _ in range(order + 1)]
    for doc in corpus:
        doc = np.asarray(doc, dtype=np.int64)
        if doc.size == 0:
            continue
        if doc.min() < 0 or doc.max() >= vocab_size:
            raise ValueError("token id outside the vocabulary")
        padded = np.concatenate([np.full(order, BOS, dtype=np.int64), doc])
        for l in range(order + 1):
            # window of length l + 1 ending at every real token
            win = np.lib.stride_tricks.sliding_window_view(padded[order - l:], l + 1)
            per_level_ctx[l].append(win[:, :l])
            per_level_tok[l].append(win[:, l])
    levels = []
    for l in range(order + 1):
        if per_level_tok[l]:
            ctx = np.concatenate(per_level_ctx[l])
            tok = np.concatenate(per_level_tok[l])
        else:
            ctx = np.zeros((0, l), np.int64)
            tok = np.zeros(0, np.int64)
        levels.append(_aggregate(ctx, tok, np.full(tok.size, float(weight)), vocab_size))
    return levels


class MarkovLM:
    """Immutable count-based language model.

    ``next_dist`` looks up the longest recorded suffix of the context (length
    at most ``order``), smooths it additively with ``alpha`` and applies the
    temperature as ``p ** (1 / theta)``.
    """

    def __init__(self, vocab: Vocabulary, order: int, alpha: float, levels: list[_Level]):
        if order < 0:
            raise ValueError("order must be nonnegative")
        if alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if len(levels) != order + 1:
            raise ValueError("need one count level per context length")
        self.vocab = vocab
        self.order = order
        self.alpha = float(alpha)
        self.levels = levels
        for lv in levels:
            if np.any(lv.counts < 0):
                raise ValueError("counts must be nonnegative")
        self._index: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        for lv in levels:
            self._index_level(lv)
        if () not in self._index:
            raise ValueError("model has no unigram counts")
        self._dense: dict[tuple, np.ndarray] = {}
        self._dense_lock = threading.Lock()
        self._dense_capacity = 1 << 15
        self._argmax: dict[tuple, int] = {}

    def _index_level(self, lv: _Level) -> None:
        n = lv.tokens.size
        if n == 0:
            return
        l = lv.contexts.shape[1]
        if l == 0:
            self._index[()] = (lv.tokens, lv.counts)
            return
        change = np.any(lv.contexts[1:] != lv.contexts[:-1], axis=1)
        starts = np.concatenate([[0], np.nonzero(change)[0] + 1, [n]])
        ctx_list = lv.contexts[starts[:-1]].tolist()
        for i, ctx in enumerate(ctx_list):
            a, b = starts[i], starts[i + 1]
            self._index[tuple(ctx)] = (lv.tokens[a:b], lv.counts[a:b])

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def num_contexts(self) -> int:
        return len(self._index)

    def counts_for(self, context: Sequence[int]) -> np.ndarray:
        """Dense raw counts recorded for exactly this context (zeros if absent)."""
        out = np.zeros(self.vocab_size)
        entry = self._index.get(tuple(int(c) for c in context))
        if entry is not None:
            out[entry[0]] = entry[1]
        return out

    def lookup_context(self, context: Sequence[int]) -> tuple:
        """Longest recorded suffix of ``context`` with length <= order."""
        ctx = tuple(int(c) for c in context[len(context) - self.order:]) if self.order else ()
        if len(ctx) < self.order:
            ctx = (BOS,) * (self.order - len(ctx)) + ctx
        while ctx not in self._index:
            ctx = ctx[1:]
        return ctx

    def _smoothed(self, ctx: tuple) -> np.ndarray:
        tokens, counts = self._index[ctx]
        q = np.full(self.vocab_size, self.alpha)
        np.add.at(q, tokens, counts)
        return q / q.sum()

    def dist_for(self, ctx: tuple, theta: float = 1.0) -> np.ndarray:
        """Distribution for an already-resolved context; cached, read-only."""
        key = (ctx, float(theta))
        cached = self._dense.get(key)
        if cached is not None:
            return cached
        q = self._smoothed(ctx)
        if theta != 1.0:
            with np.errstate(divide="ignore"):
                z = np.log(q) / theta
            z -= z.max()
            q = np.exp(z)
            q /= q.sum()
        q.setflags(write=False)
        with self._dense_lock:
            if len(self._dense) >= self._dense_capacity:
                self._dense.clear()
            self._dense[key] = q
        return q

    def next_dist(self, context: Sequence[int], theta: float = 1.0) -> np.ndarray:
        if not theta > 0:
            raise ValueError(f"temperature must be positive (got {theta})")
        return self.dist_for(self.lookup_context(context), theta).copy()

    def dist_rows(self, contexts: Sequence[Sequence[int]], theta: float = 1.0) -> np.ndarray:
        """Stack ``next_dist`` for many contexts into a ``(B, V)`` array."""
        if not theta > 0:
            raise ValueError(f"temperature must be positive (got {theta})")
        return np.stack([self.dist_for(self.lookup_context(c), theta) for c in contexts])

    def greedy(self, context: Sequence[int]) -> int:
        """Most likely next token; ties go to the lowest id."""
        ctx = self.lookup_context(context)
        tok = self._argmax.get(ctx)
        if tok is None:
            tok = int(np.argmax(self.dist_for(ctx)))
            self._argmax[ctx] = tok
        return tok

    def log_likelihoods(self, tokens: TokenSequence, context: TokenSequence = ()) -> np.ndarray:
        """ln p(x_t | history) for every token, at temperature 1."""
        history = list(context)
        out = np.empty(len(tokens))
        for i, t in enumerate(tokens):
            p = self.dist_for(self.lookup_context(history))[int(t)]
            out[i] = math.log(p) if p > 0 else -math.inf
            history.append(int(t))
        return out

    # serialization ---------------------------------------------------------

    def save(self, fh: BinaryIO) -> None:
        write_model(self, fh)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        write_model(self, buf)
        return buf.getvalue()


def train(corpus: Sequence[TokenSequence], order: int, alpha: float = 0.0,
          vocab: Vocabulary | int | None = None) -> MarkovLM:
    """Count every (context, token) pair of the corpus, for context lengths 0..order."""
    docs = [d for d in corpus]
    if not docs or all(len(d) == 0 for d in docs):
        raise ValueError("cannot train on an empty corpus")
    if order < 0:
        raise ValueError("order must be nonnegative")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if vocab is None:
        vocab = 1 + max(int(max(d)) for d in docs if len(d))
    if isinstance(vocab, int):
        vocab = Vocabulary.synthetic(max(vocab, 2))
    return MarkovLM(vocab, order, alpha, _count_corpus(docs, order, len(vocab)))


def fine_tune(lm: MarkovLM, corpus: Sequence[TokenSequence], weight: float = 1.0) -> MarkovLM:
    """New model with counts ``lm.counts + weight * counts(corpus)``."""
    if not weight > 0:
        raise ValueError(f"fine-tuning weight must be positive (got {weight})")
    extra = _count_corpus(list(corpus), lm.order, lm.vocab_size, weight)
    merged = []
    for base, add in zip(lm.levels, extra):
        merged.append(_aggregate(
            np.concatenate([base.contexts, add.contexts]),
            np.concatenate([base.tokens, add.tokens]),
            np.concatenate([base.counts, add.counts]),
            lm.vocab_size,
        ))
    return MarkovLM(lm.vocab, lm.order, lm.alpha, merged)


def completion_entropy(lm: MarkovLM, context: TokenSequence, generated: TokenSequence,
                       theta: float = 1.0, chosen_only: bool = False) -> float:
    """Entropy in nats accumulated along a completion.

    By default each step contributes the full Shannon entropy of the next-token
    distribution.  ``chosen_only=True`` instead sums ``-p_t ln p_t`` where
    ``p_t`` is the probability of the token actually emitted.
    """
    if len(generated) == 0:
        raise ValueError("generated sequence must be nonempty")
    history = list(context)
    total = 0.0
    for t in generated:
        p = lm.dist_for(lm.lookup_context(history), theta)
        if chosen_only:
            pt = p[int(t)]
            total += -pt * math.log(pt) if pt > 0 else 0.0
        else:
            nz = p[p > 0]
            total += float(-(nz * np.log(nz)).sum())
        history.append(int(t))
    return total


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------
#
#   magic "WMLM" | u16 version | u16 reserved (0)
#   u32 |V| | |V| x (u32 byte length, UTF-8 bytes)
#   u32 order | f64 alpha
#   for l = 0..order: u64 N | N*l u32 contexts (row major) | N u32 tokens | N f64 counts
#
# All integers little-endian.


def write_model(lm: MarkovLM, fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<HH", FORMAT_VERSION, 0))
    fh.write(struct.pack("<I", lm.vocab_size))
    for tok in lm.vocab.id_to_token:
        raw = tok.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
    fh.write(struct.pack("<Id", lm.order, lm.alpha))
    for lv in lm.levels:
        fh.write(struct.pack("<Q", lv.tokens.size))
        fh.write(lv.contexts.astype("<u4").tobytes())
        fh.write(lv.tokens.astype("<u4").tobytes())
        fh.write(lv.counts.astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated model file")
    return data


def read_model(fh: BinaryIO) -> MarkovLM:
    if _read_exact(fh, 4) != MAGIC:
        raise ValueError("not a WMLM model file")
    version, _ = struct.unpack("<HH", _read_exact(fh, 4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    (vsize,) = struct.unpack("<I", _read_exact(fh, 4))
    tokens = []
    for _ in range(vsize):
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        tokens.append(_read_exact(fh, n).decode("utf-8"))
    order, alpha = struct.unpack("<Id", _read_exact(fh, 12))
    levels = []
    for l in range(order + 1):
        (n,) = struct.unpack("<Q", _read_exact(fh, 8))
        ctx = np.frombuffer(_read_exact(fh, 4 * n * l), dtype="<u4").astype(np.int64).reshape(n, l)
        tok = np.frombuffer(_read_exact(fh, 4 * n), dtype="<u4").astype(np.int64)
        cnt = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
        levels.append(_Level(ctx, tok, cnt))
    return MarkovLM(Vocabulary(tokens), order, alpha, levels)


def load_model(path: str) -> MarkovLM:
    with open(path, "rb") as fh:
        return read_model(fh)


def save_model(lm: MarkovLM, path: str) -> None:
    with open(path, "wb") as fh:
        write_model(lm, fh)
