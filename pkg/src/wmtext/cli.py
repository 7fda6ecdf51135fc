"""Command-line frontend.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 internal invariant violation.  Every output file ``OUT`` gets a
``OUT.manifest.json`` alongside it.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from typing import Optional, Sequence

import numpy as np
from numba import njit

from . import __version__, detector, radioactivity, schemes
from .langmodel import MarkovLM, Vocabulary, load_model, save_model, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_INTERNAL = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

_FNV_OFFSET = np.uint64(0xCBF29CE484222325)
_FNV_PRIME = np.uint64(0x100000001B3)


@njit(cache=True)
def _fnv1a(data, h):
    for b in data:
        h = (h ^ np.uint64(b)) * _FNV_PRIME
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a(np.frombuffer(data, dtype=np.uint8), _FNV_OFFSET))


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return f"{fnv1a64(fh.read()):016x}"


def _wall_clock() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp for reproducible artifacts
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def write_manifest(out_path: str, args: argparse.Namespace, inputs: Sequence[str]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": args.command if not getattr(args, "mode", None) else f"{args.command} {args.mode}",
        "config": config,
        "inputs": {p: file_digest(p) for p in inputs if p},
        "tool_version": __version__,
        "wall_clock": _wall_clock(),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def threads() -> int:
    try:
        return max(1, int(os.environ.get("WMTEXT_THREADS", "1")))
    except ValueError:
        raise UsageError("WMTEXT_THREADS must be an integer")


# ---------------------------------------------------------------------------
# reading inputs
# ---------------------------------------------------------------------------


def _require_file(path: Optional[str]) -> None:
    if path is not None and not os.path.isfile(path):
        raise UsageError(f"no such file: {path}")


def _read_lines(path: str) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _parse_ids(line: str, lineno: int) -> list[int]:
    try:
        return [int(t) for t in line.split()]
    except ValueError:
        raise UsageError(f"line {lineno}: expected whitespace-separated token ids")


def read_documents(path: str, vocab: Optional[Vocabulary], ids: bool,
                   field: str = "completion_ids") -> list[list[int]]:
    """Token sequences from NDJSON (``field``), id lines (``--ids``) or text lines."""
    docs = []
    for i, line in enumerate(_read_lines(path), 1):
        stripped = line.strip()
        if stripped.startswith("{"):
            obj = json.loads(stripped)
            if field not in obj:
                raise UsageError(f"line {i}: NDJSON record has no {field!r} field")
            docs.append([int(t) for t in obj[field]])
        elif ids:
            docs.append(_parse_ids(line, i))
        else:
            if vocab is None:
                raise UsageError("text input needs --model for tokenization (or pass --ids)")
            docs.append(vocab.encode(line))
    return docs


def _check_ids(docs, vocab_size: int) -> None:
    for i, d in enumerate(docs, 1):
        if any(not 0 <= t < vocab_size for t in d):
            raise UsageError(f"document {i}: token id outside vocabulary of size {vocab_size}")


# ---------------------------------------------------------------------------
# flag groups
# ---------------------------------------------------------------------------


def add_wm_flags(p: argparse.ArgumentParser, allow_none: bool) -> None:
    choices = ["none", *schemes.SCHEMES] if allow_none else list(schemes.SCHEMES)
    g = p.add_argument_group("watermark")
    g.add_argument("--scheme", choices=choices, default=choices[1] if not allow_none else "none")
    g.add_argument("--key", type=int, default=35317)
    g.add_argument("--k", type=int, default=2, help="watermark window length")
    g.add_argument("--gamma", type=float, default=0.25)
    g.add_argument("--delta", type=float, default=2.0)
    g.add_argument("--theta", type=float, default=1.0)
    g.add_argument("--d", type=int, default=None, help="secret vector dimension")
    g.add_argument("--M", type=int, default=1, dest="num_messages", help="number of messages")


def add_sampler_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("sampler")
    g.add_argument("--sampler", choices=schemes.SAMPLER_MODES, default="multinomial")
    g.add_argument("--top-p", type=float, default=1.0)
    g.add_argument("--top-k", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--temperature", type=float, default=1.0)


def wm_config(args, vocab_size: int) -> Optional[schemes.WatermarkConfig]:
    if args.scheme == "none":
        return None
    try:
        return schemes.WatermarkConfig(
            scheme=args.scheme, key=args.key, vocab_size=vocab_size, window_k=args.k,
            gamma=args.gamma, delta=args.delta, theta=args.theta, d=args.d,
            num_messages=args.num_messages)
    except ValueError as e:
        raise UsageError(str(e))


def sampler_config(args) -> schemes.SamplerConfig:
    try:
        return schemes.SamplerConfig(mode=args.sampler, top_p=args.top_p, top_k=args.top_k,
                                     rng_seed=args.seed, temperature=args.temperature)
    except ValueError as e:
        raise UsageError(str(e))


def _load(path: str) -> MarkovLM:
    _require_file(path)
    try:
        return load_model(path)
    except ValueError as e:
        raise UsageError(f"{path}: {e}")


def _vocab_and_size(args) -> tuple[Optional[Vocabulary], int]:
    if getattr(args, "model", None):
        lm = _load(args.model)
        return lm.vocab, lm.vocab_size
    if getattr(args, "vocab_size", None):
        return None, args.vocab_size
    raise UsageError("pass --model or --vocab-size")


def _write_ndjson(path: str, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec))
            fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train_lm(args) -> int:
    _require_file(args.corpus)
    lines = _read_lines(args.corpus)
    if args.ids:
        docs = [_parse_ids(l, i) for i, l in enumerate(lines, 1)]
        size = args.vocab_size or 1 + max((max(d) for d in docs if d), default=1)
        vocab = Vocabulary.synthetic(size)
    else:
        vocab = Vocabulary.build(lines, min_freq=args.min_freq)
        docs = [vocab.encode(l) for l in lines]
    if args.order < 0 or args.alpha < 0:
        raise UsageError("order and alpha must be nonnegative")
    try:
        lm = train(docs, args.order, args.alpha, vocab)
    except ValueError as e:
        raise UsageError(str(e))
    save_model(lm, args.out)
    write_manifest(args.out, args, [args.corpus])
    return EXIT_OK


def cmd_generate(args) -> int:
    lm = _load(args.model)
    _require_file(args.prompts)
    wm = wm_config(args, lm.vocab_size)
    sampler = sampler_config(args)
    if wm is not None:
        try:
            wm.check_message(args.message)
        except ValueError as e:
            raise UsageError(str(e))
    if args.n < 1 or args.length < 1:
        raise UsageError("--n and --length must be >= 1")
    if not 0.0 <= args.corrupt_rate <= 1.0:
        raise UsageError("--corrupt-rate must lie in [0, 1]")
    if args.ids:
        prompts = [_parse_ids(l, i) for i, l in enumerate(_read_lines(args.prompts), 1)]
        _check_ids(prompts, lm.vocab_size)
    else:
        prompts = [lm.vocab.encode(l) for l in _read_lines(args.prompts)]
    batch_prompts = [p for p in prompts for _ in range(args.n)]
    conts = schemes.generate_batch(lm, batch_prompts, args.length, wm=wm, message=args.message,
                                   sampler=sampler)
    records = []
    for i, (p, c) in enumerate(zip(batch_prompts, conts)):
        if args.corrupt_rate > 0:
            c = schemes.corrupt(c, args.corrupt_rate, lm.vocab_size, args.corrupt_seed, stream_id=i)
        records.append({
            "prompt_index": i // args.n,
            "sample": i % args.n,
            "prompt": lm.vocab.decode(p),
            "prompt_ids": [int(t) for t in p],
            "completion_ids": [int(t) for t in c],
            "completion": lm.vocab.decode(c),
        })
    _write_ndjson(args.out, records)
    write_manifest(args.out, args, [args.model, args.prompts])
    return EXIT_OK


def _filter_from(path: Optional[str], vocab, ids: bool, k: int) -> Optional[detector.FilterSet]:
    if not path:
        return None
    _require_file(path)
    return radioactivity.build_filter(read_documents(path, vocab, ids), k)


def cmd_detect(args) -> int:
    vocab, vsize = _vocab_and_size(args)
    _require_file(args.texts)
    cfg = wm_config(args, vsize)
    docs = read_documents(args.texts, vocab, args.ids, args.field)
    _check_ids(docs, vsize)
    filt = _filter_from(args.filter_path, vocab, args.ids, cfg.window_k)
    dedup = not args.no_dedup
    if args.multibit:
        if cfg.scheme != schemes.GUMBEL:
            raise UsageError("--multibit requires --scheme gumbel")
        reports = []
        for doc in docs:
            tape = detector.DedupTape() if dedup else None
            reports.append(detector.score_text_multibit(doc, cfg, tape, filt))
    elif args.tape_scope == detector.GLOBAL or threads() == 1:
        reports = detector.score_corpus(docs, cfg, args.tape_scope, dedup, filt)
    else:
        n = threads()
        bounds = np.linspace(0, len(docs), n + 1).astype(int)
        parts = [docs[bounds[i]:bounds[i + 1]] for i in range(n)]
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = pool.map(lambda part: detector.score_corpus(part, cfg, detector.PER_DOCUMENT,
                                                                  dedup, filt), parts)
        reports = [r for part in results for r in part]
    _write_ndjson(args.out, (r.to_dict() for r in reports))
    write_manifest(args.out, args, [args.texts, args.model, args.filter_path])
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as fh:
            json.dump(detector.summarize(reports, args.levels), fh, indent=2)
            fh.write("\n")
        write_manifest(args.summary, args, [args.texts, args.model, args.filter_path])
    return EXIT_OK


def cmd_radioactivity(args) -> int:
    suspect = _load(args.suspect)
    vocab, vsize = suspect.vocab, suspect.vocab_size
    inputs = [args.suspect]
    setting = radioactivity.RadioactivitySetting(
        model_access=radioactivity.OPEN if args.mode == "open" else radioactivity.CLOSED,
        supervision=args.supervision, rho=args.rho)
    if args.mode == "mia":
        for p in (args.held_in, args.held_out):
            _require_file(p)
        held_in = read_documents(args.held_in, vocab, args.ids, args.field)
        held_out = read_documents(args.held_out, vocab, args.ids, args.field)
        if not held_in or not held_out:
            raise UsageError("both corpora must be nonempty")
        stat, p = radioactivity.mia_ks_baseline(suspect, held_in, held_out)
        rec = {"setting": asdict(setting), "statistic": stat, "pvalue": p,
               "n_held_in": len(held_in), "n_held_out": len(held_out)}
        _write_ndjson(args.out, [rec])
        write_manifest(args.out, args, inputs + [args.held_in, args.held_out])
        return EXIT_OK
    cfg = wm_config(args, vsize)
    filt = _filter_from(args.filter_path, vocab, args.ids, cfg.window_k)
    dedup = not args.no_dedup
    if args.mode == "closed":
        _require_file(args.prompts)
        prompts = read_documents(args.prompts, vocab, args.ids, args.field)
        _check_ids(prompts, vsize)
        rep = radioactivity.detect_closed(suspect, prompts, cfg, filt, args.length,
                                          sampler_config(args), setting, args.chunks, dedup,
                                          args.max_scored)
        inputs.append(args.prompts)
    else:
        _require_file(args.probes)
        probes = read_documents(args.probes, vocab, args.ids, args.field)
        _check_ids(probes, vsize)
        rep = radioactivity.detect_open_reading(suspect, probes, cfg, setting, filt, args.chunks,
                                                dedup, args.max_scored)
        inputs.append(args.probes)
    _write_ndjson(args.out, [rep.to_dict()])
    write_manifest(args.out, args, inputs + [args.filter_path])
    return EXIT_OK


def cmd_calibrate(args) -> int:
    vocab, vsize = _vocab_and_size(args)
    _require_file(args.corpus)
    cfg = wm_config(args, vsize)
    docs = read_documents(args.corpus, vocab, args.ids, args.field)
    _check_ids(docs, vsize)
    keys = detector.default_keys(args.keys, base=args.key)
    rows = detector.calibrate_fpr(docs, cfg, args.levels, keys)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theoretical_fpr", "empirical_fpr_dedup", "empirical_fpr_raw", "n_tests"])
        for r in rows:
            w.writerow([repr(r.level), repr(r.empirical_dedup), repr(r.empirical_raw), r.n_tests])
    write_manifest(args.out, args, [args.corpus, args.model])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _levels(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("levels must be comma-separated numbers")
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("levels must lie in (0, 1]")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wmtext", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-lm", help="train a Markov language model")
    p.add_argument("--corpus", required=True, help="UTF-8 text, one document per line")
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--ids", action="store_true", help="corpus lines are token ids")
    p.add_argument("--vocab-size", type=int, default=None, help="vocabulary size with --ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("generate", help="sample (watermarked) completions")
    p.add_argument("--model", required=True)
    p.add_argument("--prompts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1, help="completions per prompt")
    p.add_argument("--length", type=int, default=64)
    p.add_argument("--message", type=int, default=0)
    p.add_argument("--corrupt-rate", type=float, default=0.0)
    p.add_argument("--corrupt-seed", type=int, default=0)
    p.add_argument("--ids", action="store_true")
    add_wm_flags(p, allow_none=True)
    add_sampler_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("detect", help="score texts for a watermark")
    p.add_argument("--texts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--ids", action="store_true")
    p.add_argument("--field", default="completion_ids", help="NDJSON field holding token ids")
    p.add_argument("--multibit", action="store_true")
    p.add_argument("--filter-path", default=None, help="corpus whose k-grams form the filter")
    p.add_argument("--tape-scope", choices=[detector.PER_DOCUMENT, detector.GLOBAL],
                   default=detector.PER_DOCUMENT)
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--summary", default=None, help="write an aggregate summary JSON here")
    p.add_argument("--levels", type=_levels, default=list(detector.DEFAULT_LEVELS))
    add_wm_flags(p, allow_none=False)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("radioactivity", help="test a suspect model for radioactivity")
    p.add_argument("mode", choices=["closed", "open", "mia"])
    p.add_argument("--suspect", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompts", default=None, help="closed: watermarked prompts")
    p.add_argument("--probes", default=None, help="open: watermarked probe texts")
    p.add_argument("--held-in", default=None)
    p.add_argument("--held-out", default=None)
    p.add_argument("--filter-path", default=None)
    p.add_argument("--length", type=int, default=64, help="closed: tokens generated per prompt")
    p.add_argument("--chunks", type=int, default=10)
    p.add_argument("--max-scored", type=int, default=None)
    p.add_argument("--no-dedup", action="store_true")
    p.add_argument("--supervision", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--ids", action="store_true")
    p.add_argument("--field", default="completion_ids")
    add_wm_flags(p, allow_none=False)
    add_sampler_flags(p)
    p.set_defaults(func=cmd_radioactivity)

    p = sub.add_parser("calibrate", help="empirical vs theoretical FPR table")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--ids", action="store_true")
    p.add_argument("--field", default="completion_ids")
    p.add_argument("--keys", type=int, default=10, help="number of keys derived from --key")
    p.add_argument("--levels", type=_levels, default=list(detector.DEFAULT_LEVELS))
    add_wm_flags(p, allow_none=False)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"wmtext: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"wmtext: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # invariant violations surface here
        print(f"wmtext: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
