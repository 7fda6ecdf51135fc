import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from wmtext import cli, toy
from wmtext.langmodel import load_model

V = 100


def run(*argv):
    return cli.main([str(a) for a in argv])


def ndjson(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


def write_ids(path, docs):
    path.write_text("".join(" ".join(map(str, d)) + "\n" for d in docs))


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    src = toy.random_source(V, order=2, support=16, seed=8)
    write_ids(d / "corpus.ids", toy.sample_corpus(src, 300, 120, seed=1))
    write_ids(d / "prompts.ids", [doc[:8] for doc in toy.sample_corpus(src, 10, 8, seed=2)])
    assert run("train-lm", "--corpus", d / "corpus.ids", "--ids", "--vocab-size", V,
               "--order", 2, "--alpha", 0.01, "--out", d / "m.bin") == 0
    return d


def test_fnv1a_vectors():
    assert cli.fnv1a64(b"") == 0xCBF29CE484222325
    assert cli.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert cli.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_train_lm_text_counts(tmp_path):
    (tmp_path / "c.txt").write_text("a b a c\nb a b\n")
    assert run("train-lm", "--corpus", tmp_path / "c.txt", "--order", 1, "--out", tmp_path / "m") == 0
    lm = load_model(str(tmp_path / "m"))
    a, b, c = (lm.vocab.token_to_id[w] for w in "abc")
    p = lm.next_dist([a])
    # a is followed by b twice and by c once
    assert p[b] == pytest.approx(2 / 3) and p[c] == pytest.approx(1 / 3)
    assert lm.next_dist([b])[a] == 1.0
    man = json.loads((tmp_path / "m.manifest.json").read_text())
    assert man["command"] == "train-lm"
    assert man["inputs"][str(tmp_path / "c.txt")] == f"{cli.fnv1a64(b'a b a c' + bytes([10]) + b'b a b' + bytes([10])):016x}"
    assert set(man) == {"command", "config", "inputs", "tool_version", "wall_clock"}


def test_train_lm_order0(tmp_path):
    (tmp_path / "c.txt").write_text("x y y\ny z\n")
    assert run("train-lm", "--corpus", tmp_path / "c.txt", "--order", 0, "--out", tmp_path / "m") == 0
    lm = load_model(str(tmp_path / "m"))
    y = lm.vocab.token_to_id["y"]
    assert lm.next_dist([y, y])[y] == pytest.approx(3 / 5)


def test_missing_file_exit_2(tmp_path, capsys):
    assert run("train-lm", "--corpus", tmp_path / "nope", "--out", tmp_path / "m") == 2
    assert "no such file" in capsys.readouterr().err


def test_usage_errors(ws, tmp_path):
    assert run("generate", "--model", ws / "m.bin") == 2
    assert run("generate", "--model", ws / "m.bin", "--prompts", ws / "prompts.ids", "--ids",
               "--scheme", "gumbel", "--M", 4, "--message", 4, "--out", tmp_path / "o") == 2
    assert run("generate", "--model", ws / "corpus.ids", "--prompts", ws / "prompts.ids",
               "--out", tmp_path / "o") == 2
    assert run("detect", "--texts", ws / "corpus.ids", "--ids", "--vocab-size", V,
               "--scheme", "greenlist", "--multibit", "--out", tmp_path / "o") == 2


def test_io_error_exit_3(ws, tmp_path):
    out = tmp_path / "missing-dir" / "o.ndjson"
    assert run("detect", "--texts", ws / "corpus.ids", "--ids", "--vocab-size", V,
               "--scheme", "gumbel", "--out", out) == 3


def test_roundtrip_next_dist(ws):
    from wmtext.langmodel import train

    docs = [[int(t) for t in line.split()] for line in (ws / "corpus.ids").read_text().splitlines()]
    ref = train(docs, 2, 0.01, V)
    lm = load_model(str(ws / "m.bin"))
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ctx = rng.integers(0, V, size=rng.integers(0, 4)).tolist()
        assert np.array_equal(lm.next_dist(ctx), ref.next_dist(ctx))


def gen(ws, out, *extra):
    return run("generate", "--model", ws / "m.bin", "--prompts", ws / "prompts.ids", "--ids",
               "--length", 200, "--seed", 5, "--out", out, *extra)


def test_generate_none_and_determinism(ws, tmp_path):
    assert gen(ws, tmp_path / "a", "--scheme", "none", "--n", 2) == 0
    assert gen(ws, tmp_path / "b", "--scheme", "none", "--n", 2) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    recs = ndjson(tmp_path / "a")
    assert len(recs) == 20
    assert [(r["prompt_index"], r["sample"]) for r in recs[:3]] == [(0, 0), (0, 1), (1, 0)]
    assert all(len(r["completion_ids"]) == 200 for r in recs)
    assert set(recs[0]) >= {"prompt", "completion_ids", "completion"}


def test_generate_corrupt_rate(ws, tmp_path):
    assert gen(ws, tmp_path / "a", "--scheme", "gumbel") == 0
    assert gen(ws, tmp_path / "b", "--scheme", "gumbel", "--corrupt-rate", 0.3) == 0
    a = np.array([r["completion_ids"] for r in ndjson(tmp_path / "a")])
    b = np.array([r["completion_ids"] for r in ndjson(tmp_path / "b")])
    changed = (a != b).mean()
    assert abs(changed - 0.3 * 98 / 99) < 0.04


def test_detect_matching_and_mismatched_key(ws, tmp_path):
    assert gen(ws, tmp_path / "g", "--scheme", "greenlist", "--delta", 4, "--key", 77) == 0
    common = ("--texts", tmp_path / "g", "--vocab-size", V, "--scheme", "greenlist")
    assert run("detect", *common, "--key", 77, "--out", tmp_path / "d1", "--summary", tmp_path / "s1") == 0
    assert run("detect", *common, "--key", 78, "--out", tmp_path / "d2") == 0
    good = [r["pvalue"] for r in ndjson(tmp_path / "d1")]
    bad = [r["pvalue"] for r in ndjson(tmp_path / "d2")]
    assert max(good) < 1e-6
    assert np.median(bad) > 0.01
    summ = json.loads((tmp_path / "s1").read_text())
    assert summ["n_documents"] == 10 and summ["mean_log10_pvalue"] < -6
    assert (tmp_path / "s1.manifest.json").exists()


def test_detect_multibit(ws, tmp_path):
    assert gen(ws, tmp_path / "g", "--scheme", "gumbel", "--M", 256, "--message", 42) == 0
    assert run("detect", "--texts", tmp_path / "g", "--model", ws / "m.bin", "--scheme", "gumbel",
               "--M", 256, "--multibit", "--out", tmp_path / "d") == 0
    recs = ndjson(tmp_path / "d")
    # Gumbel sampling can lock into a loop that dedup reduces to a few tokens;
    # every significant decode must still be right
    assert all(r["decoded_message"] == 42 for r in recs if r["pvalue"] < 1e-3)
    assert sum(r["decoded_message"] == 42 for r in recs) >= 6
    assert all(len(r["per_message_pvalues"]) == 256 for r in recs)


def test_detect_threads_and_scopes(ws, tmp_path, monkeypatch):
    args = ("detect", "--texts", ws / "corpus.ids", "--ids", "--vocab-size", V, "--scheme", "gumbel")
    assert run(*args, "--out", tmp_path / "one") == 0
    monkeypatch.setenv("WMTEXT_THREADS", "4")
    assert run(*args, "--out", tmp_path / "four") == 0
    assert (tmp_path / "one").read_bytes() == (tmp_path / "four").read_bytes()
    assert run(*args, "--tape-scope", "global", "--out", tmp_path / "glob") == 0
    per = sum(r["tokens_scored"] for r in ndjson(tmp_path / "one"))
    glob = sum(r["tokens_scored"] for r in ndjson(tmp_path / "glob"))
    assert glob < per
    write_ids(tmp_path / "filt", [[1, 2, 3]])
    assert run(*args, "--filter-path", tmp_path / "filt", "--out", tmp_path / "f") == 0
    assert sum(r["tokens_scored"] for r in ndjson(tmp_path / "f")) < per / 100


def test_calibrate_csv(ws, tmp_path):
    assert run("calibrate", "--corpus", ws / "corpus.ids", "--ids", "--vocab-size", V,
               "--scheme", "greenlist", "--keys", 5, "--levels", "0.5,0.01", "--out", tmp_path / "c.csv") == 0
    rows = list(csv.DictReader((tmp_path / "c.csv").open()))
    assert [float(r["theoretical_fpr"]) for r in rows] == [0.5, 0.01]
    assert all(int(r["n_tests"]) == 1500 for r in rows)
    assert abs(float(rows[0]["empirical_fpr_dedup"]) - 0.5) < 0.1


def test_radioactivity_commands(ws, tmp_path):
    assert run("radioactivity", "mia", "--suspect", ws / "m.bin", "--held-in", ws / "corpus.ids",
               "--held-out", ws / "corpus.ids", "--ids", "--out", tmp_path / "mia") == 0
    assert ndjson(tmp_path / "mia")[0]["pvalue"] == 1.0
    # a memorizing suspect: trained heavily on Alice's watermarked texts
    assert gen(ws, tmp_path / "wm", "--scheme", "greenlist", "--delta", 4, "--key", 9) == 0
    assert run("train-lm", "--corpus", tmp_path / "wm.ids", "--out", tmp_path / "x") == 2
    ids = [r["completion_ids"] for r in ndjson(tmp_path / "wm")]
    write_ids(tmp_path / "wm.ids", ids)
    assert run("train-lm", "--corpus", tmp_path / "wm.ids", "--ids", "--vocab-size", V,
               "--order", 2, "--out", tmp_path / "memo.bin") == 0
    assert run("radioactivity", "open", "--suspect", tmp_path / "memo.bin", "--probes", tmp_path / "wm",
               "--scheme", "greenlist", "--key", 9, "--rho", 1.0, "--out", tmp_path / "open") == 0
    rep = ndjson(tmp_path / "open")[0]
    assert rep["log10_pvalue"] < -20
    assert rep["setting"] == {"model_access": "open", "supervision": 1.0, "rho": 1.0}
    assert run("radioactivity", "closed", "--suspect", tmp_path / "memo.bin", "--prompts", ws / "prompts.ids",
               "--ids", "--scheme", "greenlist", "--key", 9, "--length", 100,
               "--filter-path", tmp_path / "wm", "--out", tmp_path / "closed") == 0
    assert ndjson(tmp_path / "closed")[0]["log10_pvalue"] < -3


def test_radioactivity_closed_null_mean(ws, tmp_path):
    ps = []
    for key in range(1, 41):
        out = tmp_path / f"r{key}"
        assert run("radioactivity", "closed", "--suspect", ws / "m.bin", "--prompts", ws / "prompts.ids",
                   "--ids", "--scheme", "gumbel", "--key", key * 7919, "--length", 60, "--rho", 0,
                   "--out", out) == 0
        ps.append(ndjson(out)[0]["pvalue"])
    assert 0.35 < np.mean(ps) < 0.65


def test_manifest_clock_pinned(ws, tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "86400")
    assert gen(ws, tmp_path / "g", "--scheme", "none") == 0
    man = json.loads((tmp_path / "g.manifest.json").read_text())
    assert man["wall_clock"] == "1970-01-02T00:00:00Z"
    assert man["config"]["seed"] == 5


def test_console_entry_point(ws, tmp_path):
    argv = [sys.executable, "-m", "wmtext.cli", "detect", "--texts", ws / "corpus.ids", "--ids",
            "--vocab-size", V, "--scheme", "gumbel", "--key", 0, "--out", tmp_path / "o"]
    proc = subprocess.run([str(a) for a in argv], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "key" in proc.stderr
