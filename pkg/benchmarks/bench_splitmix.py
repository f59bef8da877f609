"""Compare the numba and numpy splitmix64 kernels.

    python benchmarks/bench_splitmix.py [--sizes 32 1024 65536 1048576] [--repeat 20]

Both kernels are checked for bit-identical output before timing. The numba
kernel is warmed once so compile time is reported separately.
"""

import argparse
import statistics
import time

import numpy as np

from vdc.simnet import kernels


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times), statistics.median(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", type=int, nargs="+", default=[32, 1024, 65536, 1 << 20])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0x5EED)
    args = p.parse_args()

    if not kernels.HAVE_NUMBA:
        print("numba unavailable (or VDC_DISABLE_NUMBA set); timing numpy only")
    else:
        t0 = time.perf_counter()
        kernels.splitmix64_numba(np.uint64(args.seed), 4)
        print(f"numba warm-up (compile or cache load): {time.perf_counter() - t0:.3f} s")

    print(f"{'outputs':>10}  {'numpy best':>12}  {'numba best':>12}  {'speedup':>8}")
    for n in args.sizes:
        ref = kernels.splitmix64_numpy(args.seed, n)
        np_best, _ = best_of(lambda: kernels.splitmix64_numpy(args.seed, n), args.repeat)
        if kernels.HAVE_NUMBA:
            out = kernels.splitmix64_numba(np.uint64(args.seed), n)
            assert np.array_equal(out, ref), "kernels disagree"
            nb_best, _ = best_of(lambda: kernels.splitmix64_numba(np.uint64(args.seed), n), args.repeat)
            print(f"{n:>10}  {np_best * 1e6:>10.1f}us  {nb_best * 1e6:>10.1f}us  {np_best / nb_best:>7.2f}x")
        else:
            print(f"{n:>10}  {np_best * 1e6:>10.1f}us  {'-':>12}  {'-':>8}")


if __name__ == "__main__":
    main()
