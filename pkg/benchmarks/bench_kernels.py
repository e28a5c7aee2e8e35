"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 200] [--end-to-end]

Both variants are always importable from ``sqdisk.kernels`` (``nb_*`` and
``np_*``); the library picks one at import time from ``SQDISK_NUMBA``.
"""
import argparse
import os
import subprocess
import sys
import tempfile
import time

import numpy as np

from sqdisk import _accel, kernels


def random_table(rng, n):
    alloc = rng.random(n) < 0.7
    offs = rng.integers(1, 1 << 30, n).astype(np.uint64) << np.uint64(16)
    tags = rng.integers(0, 100, n).astype(np.uint64) << np.uint64(48)
    return np.where(alloc, offs | tags, np.uint64(0)).astype(np.uint64)


def timed(fn, repeat):
    fn()  # warm up (and compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def cases(rng):
    sv, sb = random_table(rng, 512), random_table(rng, 512)
    table, merged = random_table(rng, 8192), random_table(rng, 8192)
    base = np.uint64(0x0123_4567_89AB_CDEF)
    return {
        "correct_slice (512)": lambda impl: (lambda: impl["correct_slice"](sv.copy(), sb, 90, 40)),
        "merge_view (8192)": lambda impl: (lambda: impl["merge_view"](merged.copy(), table, 7)),
        "stamp_unindexed (8192)": lambda impl: (lambda: impl["stamp_unindexed"](table.copy(), 7)),
        "strip_foreign (8192)": lambda impl: (lambda: impl["strip_foreign"](table.copy(), 7)),
        "remap_stream (8192)": lambda impl: (lambda: impl["remap_stream"](table.copy(), merged, 10, 30)),
        "payload_words (64 KiB)": lambda impl: (lambda: impl["payload_words"](base, 8192)),
    }


def impls(prefix):
    names = ["correct_slice", "merge_view", "stamp_unindexed", "strip_foreign", "remap_stream", "payload_words"]
    return {n: getattr(kernels, prefix + n) for n in names}


E2E = """
import sys, time
from sqdisk.bench import ChainSpec, genchain, bench_seq
t0 = time.perf_counter()
genchain(ChainSpec(size=256 << 20, length=20, fill_pct=90, seed=1, mode="scalable"), sys.argv[1])
t1 = time.perf_counter()
bench_seq(sys.argv[1], "scalable", cache_bytes=1 << 20)
t2 = time.perf_counter()
print(t1 - t0, t2 - t1)
"""


def end_to_end():
    """Whole-library timing in a fresh interpreter per path (includes numba start-up)."""
    print("\n%-26s %12s %12s" % ("end to end (256 MiB, L=20)", "genchain s", "bench-seq s"))
    for flag, label in (("0", "numpy"), ("1", "numba")):
        with tempfile.TemporaryDirectory() as d:
            env = dict(os.environ, SQDISK_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", E2E, os.path.join(d, "c")], env=env,
                                 capture_output=True, text=True, check=True).stdout.split()
        print("%-26s %12.2f %12.2f" % (label, float(out[0]), float(out[1])))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--end-to-end", action="store_true", help="also time genchain and bench-seq per path")
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed")
    rng = np.random.default_rng(args.seed)
    nb, nq = impls("nb_"), impls("np_")
    print("%-26s %12s %12s %8s" % ("kernel", "numpy us", "numba us", "speedup"))
    for name, make in cases(rng).items():
        t_np = timed(make(nq), args.repeat)
        t_nb = timed(make(nb), args.repeat)
        print("%-26s %12.2f %12.2f %7.1fx" % (name, t_np * 1e6, t_nb * 1e6, t_np / t_nb))
    print("library default path: %s" % ("numba" if _accel.USE_NUMBA else "numpy"))
    if args.end_to_end:
        end_to_end()


if __name__ == "__main__":
    main()
