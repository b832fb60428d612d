#!/usr/bin/env python3
"""Compare the compiled nonce-search kernel against the pure-Python fallback.

Runs a fixed-size nonce window per backend (no early exit: difficulty 32
never hits at these sizes), so both do identical work. Usage:

    python3 benchmarks/bench_mining.py [--window 200000] [--repeats 3]
"""

import argparse
import statistics
import time

from powdb._minepure import search_nonce as pure_search

try:
    from powdb._minecore import search_nonce as core_search
except ImportError:
    core_search = None

PREFIX = (b"12\x1f1700000000\x1fbenchmark-payload\x1f" + b"a1" * 32 + b"\x1f8\x1f")


def throughput(search, window, repeats):
    rates = []
    for _ in range(repeats):
        start = time.perf_counter()
        hit = search(PREFIX, 32, 0, window)
        elapsed = time.perf_counter() - start
        assert hit is None, "window unexpectedly contained a 32-bit hit"
        rates.append(window / elapsed)
    return statistics.median(rates)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--window", type=int, default=200_000,
                        help="nonce attempts per measurement")
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    print(f"nonce window: {args.window:,} attempts, median of {args.repeats} runs\n")
    pure_rate = throughput(pure_search, args.window, args.repeats)
    print(f"  pure-python (hashlib) : {pure_rate:>12,.0f} hashes/s")
    if core_search is None:
        print("  compiled kernel       : not built (install with the extension)")
        return
    core_rate = throughput(core_search, args.window, args.repeats)
    print(f"  compiled (cython)     : {core_rate:>12,.0f} hashes/s")
    print(f"\n  speedup: {core_rate / pure_rate:.2f}x")

    # sanity: identical results on a real search
    assert core_search(PREFIX, 12, 0, 1 << 20) == pure_search(PREFIX, 12, 0, 1 << 20)
    print("  parity : both backends find the same 12-bit nonce")


if __name__ == "__main__":
    main()
