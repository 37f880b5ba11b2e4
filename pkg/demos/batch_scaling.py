"""Encrypted-inference time against batch size, element-wise measured and channel-wise modeled.

    python demos/batch_scaling.py --batch-sizes 64 256 1024 --out scaling.csv
"""
import argparse

from beaa.benchmark import scaling_summary, run_benchmark, write_benchmark_csv
from beaa.he import make_backend, preset
from beaa.model import build_sequential, fold_batchnorm


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch-sizes", type=int, nargs="+", default=[64, 256, 1024])
    ap.add_argument("--preset", default="desk")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default="scaling.csv")
    args = ap.parse_args()

    net = fold_batchnorm(build_sequential((1, 4, 4), 2, [("conv", 2, 3, 1), ("act",), ("gap",)],
                                          "element", seed=0, coeff_noise=0.1))
    be = make_backend("ckks", preset(args.preset))
    keys = be.keygen([1], seed=0)
    rows = run_benchmark(net, be, keys, args.batch_sizes, repeats=args.repeats)
    write_benchmark_csv(args.out, rows)
    print(f"{'M':>6} {'layout':<13} {'total_s':>10} {'amortized_s':>12} {'rot':>6}")
    for r in rows:
        print(f"{r['M']:>6} {r['layout']:<13} {r['total_s']:>10.3f} {r['amortized_s']:>12.5f} "
              f"{r['rot_count']:>6}")
    s = scaling_summary(rows)
    print(f"element-wise total-time variation {s['total_variation']:.1%}; amortized "
          f"M={s['batch_sizes'][-1]} / M={s['batch_sizes'][0]} = {s['amortized_ratio']:.4f}")


if __name__ == "__main__":
    main()
