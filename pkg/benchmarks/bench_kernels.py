"""Compiled vs pure-Python edit-distance kernel.

    python benchmarks/bench_kernels.py [--repeats 5] [--pairs 200]

Prints per-call microseconds for both backends over character- and
word-level pairs of increasing length, plus the speedup. Both kernels are
checked to return identical (dist, S, D, I) tuples on every pair first.
"""

from __future__ import annotations

import argparse
import sys
import timeit

import numpy as np

from diffasr._align_py import align as align_py

try:
    from diffasr._align import align as align_c
except ImportError:
    align_c = None


def make_pairs(n_pairs: int, length: int, alphabet: int, seed: int) -> list[tuple[list[int], list[int]]]:
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        ref = rng.integers(0, alphabet, length)
        hyp = ref.copy()
        edits = rng.random(length) < 0.15
        hyp[edits] = rng.integers(0, alphabet, edits.sum())
        cut = rng.integers(max(1, length - length // 5), length + 1)
        pairs.append((ref.tolist(), hyp[:cut].tolist()))
    return pairs


def per_call_us(kernel, pairs, repeats: int) -> float:
    timer = timeit.Timer(lambda: [kernel(a, b) for a, b in pairs])
    return 1e6 * min(timer.repeat(repeat=repeats, number=1)) / len(pairs)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--pairs", type=int, default=200)
    args = ap.parse_args(argv)
    if align_c is None:
        print("compiled kernel not built; reinstall with Cython available", file=sys.stderr)
        return 1

    cases = [("words", 10, 300), ("words", 60, 300), ("chars", 60, 32), ("chars", 250, 32)]
    print(f"{'unit':6} {'len':>5} {'python us':>11} {'compiled us':>12} {'speedup':>8}")
    for unit, length, alphabet in cases:
        pairs = make_pairs(args.pairs, length, alphabet, seed=length)
        for a, b in pairs:
            if align_c(a, b) != align_py(a, b):
                raise SystemExit(f"kernels disagree on {a} / {b}")
        py = per_call_us(align_py, pairs, args.repeats)
        cc = per_call_us(align_c, pairs, args.repeats)
        print(f"{unit:6} {length:5d} {py:11.1f} {cc:12.1f} {py / cc:7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
