"""End-to-end checks of the isan command-line tool.

Usage: cli_test.py PATH_TO_ISAN_BINARY
"""

import json
import math
import os
import struct
import subprocess
import sys
import tempfile
import unittest

ISAN = None

TEXT = (
    "Return the number of items in the list. The default value is used when the "
    "argument is missing, and an instance of the class is created for each call. "
) * 60


def run(*args, cwd=None):
    return subprocess.run([ISAN, *args], capture_output=True, text=True, cwd=cwd)


def write_checkpoint(path, hidden, readout_w=None, readout_b=None, seed=0):
    """Writes a shared-mode text model in the on-disk checkpoint format."""
    import random

    rng = random.Random(seed)
    vocab = [" "] + [chr(c) for c in range(ord("a"), ord("z") + 1)]
    k, n = len(vocab), hidden
    tensors = {
        "transition.W": ([n, n], [0.5 * rng.gauss(0, 1) / math.sqrt(n) for _ in range(n * n)]),
        "transition.b": ([k, n], [rng.gauss(0, 1) for _ in range(k * n)]),
        "h0": ([n], [rng.gauss(0, 1) for _ in range(n)]),
        "readout.W": ([k, n], readout_w if readout_w is not None else [rng.gauss(0, 1) for _ in range(k * n)]),
        "readout.b": ([k], readout_b if readout_b is not None else [0.0] * k),
    }
    os.makedirs(path, exist_ok=True)
    blob = b""
    entries = []
    for name, (shape, values) in tensors.items():
        entries.append({"name": name, "shape": shape, "dtype": "float64", "offset": len(blob)})
        blob += struct.pack("<%dd" % len(values), *values)
    manifest = {
        "format": "isan-checkpoint",
        "version": 1,
        "mode": "shared",
        "vocab": vocab,
        "hidden_dim": n,
        "output_dim": k,
        "tensors": entries,
    }
    with open(os.path.join(path, "weights.bin"), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f)


def read(path):
    with open(path) as f:
        return f.read()


class CliTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name
        self.corpus = os.path.join(self.dir, "corpus.txt")
        with open(self.corpus, "w") as f:
            f.write(TEXT)
        self.model = os.path.join(self.dir, "model")
        write_checkpoint(self.model, 6, seed=1)

    def tearDown(self):
        self.tmp.cleanup()

    def out(self, name):
        return os.path.join(self.dir, name)

    def test_help_lists_subcommands(self):
        r = run("--help")
        self.assertEqual(r.returncode, 0)
        for sub in ["train", "eval", "sample", "decompose", "words", "decay", "basis", "ngram",
                    "paren-reverse", "compose-bench"]:
            self.assertIn(sub, r.stdout)

    def test_unknown_flag_is_usage_error(self):
        self.assertEqual(run("--out", self.out("x"), "eval", "--bogus").returncode, 2)

    def test_missing_subcommand_is_usage_error(self):
        self.assertEqual(run("--out", self.out("x")).returncode, 2)

    def test_missing_corpus_is_usage_error(self):
        r = run("--out", self.out("x"), "train", "--steps", "1")
        self.assertEqual(r.returncode, 2)
        self.assertIn("corpus", r.stderr)

    def test_missing_checkpoint_is_usage_error(self):
        self.assertEqual(run("--out", self.out("x"), "eval", "--corpus", self.corpus).returncode, 2)

    def test_corrupt_checkpoint_fails(self):
        with open(os.path.join(self.model, "weights.bin"), "r+b") as f:
            f.truncate(16)
        r = run("--out", self.out("x"), "eval", "--checkpoint", self.model, "--corpus", self.corpus)
        self.assertEqual(r.returncode, 1)

    def test_zero_readout_gives_uniform_bits(self):
        zero = os.path.join(self.dir, "zero")
        write_checkpoint(zero, 5, readout_w=[0.0] * (27 * 5), seed=2)
        r = run("--out", self.out("e"), "eval", "--checkpoint", zero, "--corpus", self.corpus)
        self.assertEqual(r.returncode, 0, r.stderr)
        got = json.loads(read(os.path.join(self.out("e"), "eval.json")))
        self.assertAlmostEqual(got["bpc"], math.log2(27), delta=1e-9)

    def test_config_round_trip(self):
        args = ["decompose", "--checkpoint", self.model, "--text", "the list of items"]
        first = self.out("a")
        self.assertEqual(run("--out", first, "--seed", "3", *args).returncode, 0)
        cfg = json.loads(read(os.path.join(first, "config.json")))
        self.assertEqual(cfg["seed"], 3)
        self.assertEqual(cfg["decompose"]["text"], "the list of items")
        second = self.out("b")
        r = run("--config", os.path.join(first, "config.json"), "--out", second, "decompose")
        self.assertEqual(r.returncode, 0, r.stderr)
        cfg2 = json.loads(read(os.path.join(second, "config.json")))
        cfg2["out"] = cfg["out"]
        self.assertEqual(cfg, cfg2)
        self.assertEqual(read(os.path.join(first, "kappa_norms.csv")), read(os.path.join(second, "kappa_norms.csv")))

    def test_runs_are_idempotent(self):
        outs = []
        for name in ["r1", "r2"]:
            d = self.out(name)
            r = run("--out", d, "--seed", "5", "train", "--corpus", self.corpus, "--hidden", "8", "--steps", "6",
                    "--batch", "4", "--seq-len", "16", "--eval-every", "3", "--quiet")
            self.assertEqual(r.returncode, 0, r.stderr)
            outs.append(d)
        self.assertEqual(read(os.path.join(outs[0], "checkpoint", "manifest.json")),
                         read(os.path.join(outs[1], "checkpoint", "manifest.json")))
        with open(os.path.join(outs[0], "checkpoint", "weights.bin"), "rb") as a, \
                open(os.path.join(outs[1], "checkpoint", "weights.bin"), "rb") as b:
            self.assertEqual(a.read(), b.read())
        s1 = json.loads(read(os.path.join(outs[0], "summary.json")))
        s2 = json.loads(read(os.path.join(outs[1], "summary.json")))
        self.assertEqual(s1, s2)

    def test_analysis_outputs(self):
        d = self.out("an")
        self.assertEqual(run("--out", d, "words", "--checkpoint", self.model, "--text", "a list of items").returncode, 0)
        header = read(os.path.join(d, "word_norms.csv")).splitlines()[0]
        self.assertEqual(header, "word," + ",".join("t%d" % t for t in range(16)))
        r = run("--out", d, "decay", "--checkpoint", self.model, "--corpus", self.corpus, "--tokens", "2000",
                "--max-lag", "10")
        self.assertEqual(r.returncode, 0, r.stderr)
        for name in ["decay.csv", "truncated_bpc.csv", "position_ce_all.csv", "position_ce_only-space.csv",
                     "position_ce_without-space.csv"]:
            self.assertTrue(os.path.exists(os.path.join(d, name)), name)
        r = run("--out", d, "sample", "--checkpoint", self.model, "--prompt", "the", "--count", "20")
        self.assertEqual(r.returncode, 0, r.stderr)
        text = read(os.path.join(d, "sample.txt"))
        self.assertTrue(text.startswith("the"))
        self.assertTrue(all(c == " " or "a" <= c <= "z" for c in text.strip("\n")))

    def test_compose_bench_reports_fields(self):
        d = self.out("cb")
        r = run("--out", d, "compose-bench", "--corpus", self.corpus, "--hidden", "16", "--tokens", "5000",
                "--reps", "2")
        self.assertEqual(r.returncode, 0, r.stderr)
        b = json.loads(read(os.path.join(d, "bench.json")))
        for key in ["n", "vocab", "policy", "entries", "bytes", "per_char_ns_per_token", "fast_ns_per_token",
                    "matvec_ratio", "speedup"]:
            self.assertIn(key, b)
        self.assertEqual(b["n"], 16)
        self.assertGreater(b["matvec_ratio"], 1.0)

    def test_paren_train_and_reverse(self):
        d = self.out("p")
        r = run("--out", d, "train", "--task", "paren", "--steps", "30", "--eval-every", "10", "--quiet")
        self.assertEqual(r.returncode, 0, r.stderr)
        s = json.loads(read(os.path.join(d, "summary.json")))
        self.assertEqual(s["task"], "paren")
        self.assertIn("mse", s)
        r = run("--out", self.out("pe"), "eval", "--checkpoint", os.path.join(d, "checkpoint"))
        self.assertEqual(r.returncode, 0, r.stderr)
        self.assertIn("accuracy", json.loads(read(os.path.join(self.out("pe"), "eval.json"))))


if __name__ == "__main__":
    ISAN = os.path.abspath(sys.argv.pop(1))
    unittest.main()
