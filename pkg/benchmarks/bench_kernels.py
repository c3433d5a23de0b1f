#!/usr/bin/env python3
"""Timing comparison: compiled kernels against the numpy fallback.

Microbenchmarks import both kernel modules side by side and run them on
identical inputs (outputs are cross-checked before timing, so a broken
build fails loudly instead of reporting a great speedup). The episode
benchmark re-runs this script in a subprocess per backend because the
dispatch in protoseg.kernels is decided once, at import.

Usage:
    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 20 --skip-episode
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from protoseg.kernels import _pykernels as pk

try:
    from protoseg.kernels import _ckernels as ck
except ImportError:
    ck = None


def best_of(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def microbenchmarks(rng: np.random.Generator):
    """Yield (name, callable factory keyed by module) pairs on shared data."""
    x = rng.normal(size=(16, 64, 64))
    w = rng.normal(size=(32, 16, 3, 3))
    b = rng.normal(size=32)
    gy = rng.normal(size=(32, 64, 64))
    small = rng.normal(size=(2, 16, 16))
    big = rng.normal(size=(2, 64, 64))
    points = rng.normal(size=(4096, 32))
    centers = rng.normal(size=(5, 32))
    plane = rng.uniform(0.0, 100.0, (64, 64))
    seeds = np.column_stack([
        plane[::8, ::8].ravel(),
        np.repeat(np.arange(4.0, 64.0, 8.0), 8),
        np.tile(np.arange(4.0, 64.0, 8.0), 8),
    ])

    yield "conv2d forward 16x64x64 -> 32", lambda m: m.conv2d_forward(x, w, b, 1, 1)
    yield "conv2d backward input", lambda m: m.conv2d_backward_input(gy, w, 1, 1, 64, 64)
    yield "conv2d backward weight", lambda m: m.conv2d_backward_weight(gy, x, 1, 1, 3, 3)
    yield "bilinear resize 16 -> 64", lambda m: m.bilinear_resize(small, 64, 64)
    yield "bilinear adjoint 64 -> 16", lambda m: m.bilinear_resize_adjoint(big, 16, 16)
    yield "nearest cluster 4096x32, k=5", lambda m: m.nearest_cluster(points, centers)
    yield "slic assign 64x64, 64 seeds", lambda m: m.slic_assign(plane, seeds, 9, 1.2)


def check_agreement(name: str, run) -> None:
    a, b = run(pk), run(ck)
    for got, want in zip(np.atleast_1d(a), np.atleast_1d(b)):
        np.testing.assert_allclose(np.asarray(got, dtype=np.float64),
                                   np.asarray(want, dtype=np.float64),
                                   rtol=1e-10, atol=1e-12,
                                   err_msg=f"{name}: backends disagree")


def episode_seconds(steps: int) -> float:
    """One training step (loss + gradients) on a small episode, best of N."""
    from protoseg import numerics as nx
    from protoseg.harness.config import make_config
    from protoseg.segmenter import Episode

    cfg = make_config({
        "encoder": {"feature_dim": 16},
        "fspa": {"num_clusters": 3},
    })
    model = cfg.build_model()
    rng = np.random.default_rng(7)
    mask_s = np.zeros((64, 64))
    mask_s[8:32, 8:32] = 1.0
    mask_q = np.zeros((64, 64))
    mask_q[24:48, 24:48] = 1.0
    episode = Episode(rng.uniform(0.0, 1.0, (64, 64)), mask_s,
                      rng.uniform(0.0, 1.0, (64, 64)), mask_q)

    def step():
        loss, _, _ = model.total_loss(episode)
        nx.backward(loss, model.params)

    step()  # warm caches before timing
    return best_of(step, steps)


def run_episode_probe(steps: int) -> None:
    from protoseg.kernels import BACKEND

    print(f"{BACKEND} {episode_seconds(steps):.6f}")


def compare_episode(steps: int) -> None:
    print(f"\nfull episode step (loss + gradients), best of {steps}:")
    rows = []
    for backend in ("py", "cy"):
        env = dict(os.environ, PROTOSEG_KERNELS=backend)
        proc = subprocess.run(
            [sys.executable, os.path.abspath(__file__),
             "--episode-probe", "--repeats", str(steps)],
            env=env, capture_output=True, text=True,
        )
        if proc.returncode != 0:
            print(f"  {backend}: unavailable ({proc.stderr.strip().splitlines()[-1]})")
            continue
        name, seconds = proc.stdout.split()
        rows.append((name, float(seconds)))
        print(f"  {name}: {1e3 * float(seconds):8.2f} ms")
    if len(rows) == 2:
        print(f"  speedup: {rows[0][1] / rows[1][1]:.1f}x")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=10,
                        help="timing repetitions per case (best is reported)")
    parser.add_argument("--skip-episode", action="store_true",
                        help="microbenchmarks only")
    parser.add_argument("--episode-probe", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args(argv)

    if args.episode_probe:
        run_episode_probe(args.repeats)
        return 0

    if ck is None:
        print("compiled backend not importable; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    header = f"{'kernel':<32} {'py ms':>9} {'cy ms':>9} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for name, run in microbenchmarks(rng):
        if ck is not None:
            check_agreement(name, run)
        py_ms = 1e3 * best_of(lambda: run(pk), args.repeats)
        if ck is None:
            print(f"{name:<32} {py_ms:9.3f} {'-':>9} {'-':>8}")
            continue
        cy_ms = 1e3 * best_of(lambda: run(ck), args.repeats)
        print(f"{name:<32} {py_ms:9.3f} {cy_ms:9.3f} {py_ms / cy_ms:7.1f}x")

    if not args.skip_episode:
        compare_episode(max(3, args.repeats // 2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
