"""Time the retrieval-time region-word similarity kernels.

Compares the compiled Cython kernel against the numpy fallback on random
splits and checks that both return the same matrices.

    python3 benchmarks/bench_local_similarity.py --videos 200 --captions 200
"""
import argparse
import time

import numpy as np

from regionvlp.kernels import BACKENDS, local_similarities


def make_split(rng, count, max_len, d):
    lengths = rng.integers(1, max_len + 1, count).astype(np.int32)
    feats = rng.standard_normal((count, max_len, d))
    feats[np.arange(max_len)[None, :] >= lengths[:, None]] = 0.0
    return feats, lengths


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--videos", type=int, default=100)
    parser.add_argument("--captions", type=int, default=100)
    parser.add_argument("--regions", type=int, default=30)
    parser.add_argument("--words", type=int, default=20)
    parser.add_argument("--d", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    regions, region_len = make_split(rng, args.videos, args.regions, args.d)
    words, word_len = make_split(rng, args.captions, args.words, args.d)
    print(
        f"V={args.videos} C={args.captions} N={args.regions} L={args.words} d={args.d} "
        f"(best of {args.repeats})"
    )
    results = {}
    for name in sorted(BACKENDS):
        for refine in (True, False):
            secs, out = best_of(
                lambda: local_similarities(regions, region_len, words, word_len, refine, backend=name),
                args.repeats,
            )
            results[name, refine] = (secs, out)
            print(f"{name:<8} refine={refine!s:<5} {secs * 1e3:10.2f} ms")
    if "cython" not in BACKENDS:
        print("compiled kernel not built; only the numpy fallback was timed")
        return
    for refine in (True, False):
        (c_secs, c_out), (n_secs, n_out) = results["cython", refine], results["numpy", refine]
        diff = max(float(np.abs(a - b).max()) for a, b in zip(c_out, n_out))
        print(f"refine={refine!s:<5} speedup {n_secs / c_secs:6.2f}x, max |cython - numpy| {diff:.2e}")


if __name__ == "__main__":
    main()
