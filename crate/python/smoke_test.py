"""Smoke test for the dplc_py extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import math
import os
import sys
import tempfile

import dplc_py as d


def check(cond, msg):
    if not cond:
        print(f"FAIL: {msg}")
        sys.exit(1)
    print(f"ok   {msg}")


prior = d.PriorSpec(3)
z = prior.sample(100, seed=1)
check(len(z) == 100 and len(z[0]) == 3, "prior sample shape")
check(z == d.PriorSpec(3).sample(100, seed=1), "prior sampling is seeded")

check(d.imq([0.0], [1.0], 2.0) == 2.0 / 3.0, "imq kernel value")
x = [[0.0], [1.0]]
check(abs(d.mmd(x, x, 2.0) + 1.0 / 3.0) < 1e-12, "mmd two-point example")

check(d.bitrate_bpp([16, 8, 8], [64, 64]) == 0.25, "bitrate in bpp")
check(d.bitrate_bpp([0], [64, 64]) == 0.0, "zero code is zero rate")

symbols, embedded = d.quantize([[0.3, -0.2], [-5.0, 4.0]])
check(embedded == [[1.0, -1.0], [-1.0, 1.0]], "sign quantization")

ring = d.ring_dataset(2000, seed=3)
check(abs(sum(math.hypot(*p) for p in ring) / len(ring) - 2.0) < 0.05, "ring radius")
check(d.frechet(ring, ring) < 1e-9, "frechet of a set with itself")

report = d.verify_theorem1(1, kmax=4, n=20000, seed=0)
check(all(report["within_bound"]), "quantize-and-resample within bound")
check(report["distortions"] == sorted(report["distortions"], reverse=True), "distortion decreases with rate")

cfg = d.ExperimentConfig.preset("toy2d")
again = d.ExperimentConfig.from_toml(cfg.to_toml())
check(again.fingerprint() == cfg.fingerprint(), "config round trip")
try:
    d.ExperimentConfig.from_toml("run_id = 3")
    check(False, "bad config rejected")
except ValueError as e:
    check("run_id" in str(e), "bad config rejected with key path")

small = d.ExperimentConfig.from_toml(
    cfg.to_toml()
    .replace("n_samples = 50000", "n_samples = 2000")
    .replace("iterations = 1500", "iterations = 20")
    .replace("iterations = 600", "iterations = 20")
    .replace("n_eval = 5000", "n_eval = 200")
)
gen = d.train_generator(small, "wpp")
s = gen.sample(10, seed=4)
check(len(s) == 10 and len(s[0]) == 2, "generator samples")
check(s == gen.sample(10, seed=4), "generator sampling is seeded")

with tempfile.TemporaryDirectory() as store:
    rows = d.run_sweep(small, store)
    check(len(rows) == len(small.rates_bits) * 3, "one metrics row per cell")
    check(all(math.isfinite(r["mse"]) for r in rows), "metrics are finite")
    ckpts = sorted(f for f in os.listdir(store) if f.startswith("dplc-wpp-r") and f.endswith("-r8.ckpt"))
    check(len(ckpts) > 0, "codec checkpoints written")
    codec = d.Codec.load(os.path.join(store, ckpts[-1]))
    data, test = small.datasets()
    codes = codec.encode(test[:8])
    check(all(v in (-1.0, 1.0) for row in codes for v in row), "codes are binary")
    rec = codec.decode(codes, seed=5)
    check(rec == codec.reconstruct(test[:8], seed=5), "decode of encode is reconstruct")

print("all smoke checks passed")
