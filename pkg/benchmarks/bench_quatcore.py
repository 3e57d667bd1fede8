"""Benchmark the compiled quaternion kernels against the numpy fallback.

Run:  python3 benchmarks/bench_quatcore.py [--size 200000] [--repeat 5]
The pure-Python implementation is forced via MOTIONFORECAST_PURE=1 in a
subprocess so both variants run in one invocation.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def bench_current(size, repeat):
    from motionforecast._kernels import quatcore

    rng = np.random.default_rng(0)
    q = rng.standard_normal((size, 4))
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    p = rng.standard_normal((size, 4))
    p = p / np.linalg.norm(p, axis=1, keepdims=True)
    v = 0.2 * rng.standard_normal((size, 3))

    results = {"impl": quatcore.IMPL, "size": size}
    cases = {
        "mul": lambda: quatcore.mul(q, p),
        "log": lambda: quatcore.log(q),
        "exp": lambda: quatcore.exp(v),
        "to_rotmat": lambda: quatcore.to_rotmat(q),
        "normalize_canonical": lambda: quatcore.normalize_canonical(q),
    }
    for name, fn in cases.items():
        fn()  # warm up
        best = min(_timeit(fn) for _ in range(repeat))
        results[name] = best
    return results


def _timeit(fn):
    tic = time.perf_counter()
    fn()
    return time.perf_counter() - tic


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--size", type=int, default=200_000)
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--json", action="store_true", help="emit one JSON line (internal)")
    args = parser.parse_args()

    if args.json:
        print(json.dumps(bench_current(args.size, args.repeat)))
        return

    here = bench_current(args.size, args.repeat)
    env = dict(os.environ, MOTIONFORECAST_PURE="1")
    out = subprocess.run(
        [sys.executable, __file__, "--size", str(args.size), "--repeat",
         str(args.repeat), "--json"],
        env=env, capture_output=True, text=True, check=True,
    )
    pure = json.loads(out.stdout)

    print(f"batch size {args.size}, best of {args.repeat} runs")
    print(f"{'kernel':<22}{here['impl']:>12}{pure['impl']:>12}{'speedup':>10}")
    for name in ("mul", "log", "exp", "to_rotmat", "normalize_canonical"):
        a, b = here[name], pure[name]
        print(f"{name:<22}{a * 1e3:>10.2f}ms{b * 1e3:>10.2f}ms{b / a:>9.2f}x")


if __name__ == "__main__":
    main()
