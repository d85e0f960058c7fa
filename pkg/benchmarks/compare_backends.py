"""Time the compiled and pure-Python kernel backends on the same fixtures.

    python benchmarks/compare_backends.py [--masks 500] [--merges 50] [--assoc 4000] [--scaling]
"""

import argparse

from maskfuse import _kernels
from maskfuse.bench import association_scaling, compare_backends


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--masks", type=int, default=500)
    p.add_argument("--merges", type=int, default=50)
    p.add_argument("--assoc", type=int, default=4000, help="masks in the association fixture")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scaling", action="store_true", help="also print association time per doubling")
    args = p.parse_args()

    rows = compare_backends(args.masks, args.merges, args.assoc, args.seed)
    print(f"active backend: {_kernels.BACKEND}")
    head = f"{'backend':<8} {'assoc_ms':>10} {'table_ms':>10} {'rewrite_ms':>11} {'speedup':>8}"
    print(head)
    print("-" * len(head))
    for r in rows:
        print(f"{r['backend']:<8} {r['association_ms']:>10.2f} {r['mapping_table_ms']:>10.3f} "
              f"{r['naive_rewrite_ms']:>11.3f} {r['speedup']:>7.2f}x")
    if len(rows) > 1:
        base = {r["backend"]: r["association_ms"] for r in rows}
        if "python" in base and "cython" in base:
            print(f"association: cython is {base['python'] / base['cython']:.1f}x faster than python")

    if args.scaling:
        for name, mod in _kernels.backends().items():
            times = association_scaling(kernels=mod)
            sizes = sorted(times)
            ratios = ", ".join(f"{times[b] / times[a]:.2f}" for a, b in zip(sizes, sizes[1:]))
            print(f"{name}: " + " ".join(f"{n}={times[n] * 1e3:.1f}ms" for n in sizes) + f"  ratios {ratios}")


if __name__ == "__main__":
    main()
