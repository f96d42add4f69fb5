"""Run every experiment config in configs/ and print one verdict line per config.

Usage: python3 scripts/run_experiments.py [pattern ...]   (glob patterns, default "*")
The negative-control config is expected to fail and is reported as such.
"""
import sys
import time
from pathlib import Path

from channelgraph.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EXPECTED_FAIL = {"semigroup_coarse_negative.json"}

if __name__ == "__main__":
    patterns = sys.argv[1:] or ["*"]
    paths = sorted({p for pat in patterns for ext in ("json", "toml") for p in CONFIGS.glob(f"{pat}.{ext}")})
    bad = 0
    for p in paths:
        t0 = time.perf_counter()
        code = main(["run", str(p)])
        expected = 1 if p.name in EXPECTED_FAIL else 0
        bad += code != expected
        print(f"{p.name:36s} exit {code} (expected {expected})  {time.perf_counter() - t0:7.1f} s")
    sys.exit(1 if bad else 0)
