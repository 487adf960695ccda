"""Compare the numba and pure-numpy kernel paths.

    python3 benchmarks/bench_kernels.py [--sizes 1024,2048,4096,8192] [--repeats 5]

Both paths are timed in one process (the numpy path is always importable).
Run with POINTSKIP_NO_NUMBA=1 to see the numpy-only table.
"""
import argparse

from pointskip import bench, kernels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", default="1024,2048,4096,8192")
    ap.add_argument("--centers", type=int, default=512)
    ap.add_argument("--radius", type=float, default=0.2)
    ap.add_argument("--k", type=int, default=32)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]
    rows, agree = bench.bench_kernels(sizes, args.centers, args.radius, args.k, args.repeats)
    print(bench.format_rows(rows))
    print(f"\nall ball-query paths identical: {'yes' if agree else 'NO'}")
    if not kernels.USE_NUMBA:
        print("numba path disabled (POINTSKIP_NO_NUMBA set)")
        return
    ref = {(r.name, r.n): r.median_s for r in rows if r.path in ("numpy", "numpy-scan")}
    print(f"\n{'kernel':<12}{'N':>8}{'numba speedup':>16}")
    for r in rows:
        if r.path in ("numba", "numba-scan"):
            print(f"{r.name:<12}{r.n:>8}{ref[(r.name, r.n)] / r.median_s:>15.1f}x")


if __name__ == "__main__":
    main()
