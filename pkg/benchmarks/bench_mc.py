"""Benchmark the Monte-Carlo kernels: compiled extension vs pure Python.

Both backends run the same flattened workload (speculative tree decoding
over random order-n tables), so the ratio is the cost of the Python
interpreter loop alone.  A small same-seed run first checks that the two
backends produce bit-identical histograms and stats.

Usage: python3 benchmarks/bench_mc.py [--trials N] [--vocab V] [--k K]
"""

import argparse
import time

import numpy as np

from specdesk import mc
from specdesk.core import derive_seed
from specdesk.mc import KernelStats, flatten_drafter, flatten_lm
from specdesk.tabular import random_tabular_drafter, random_tabular_lm
from specdesk.tree import default_topology


def build_workload(args):
    target = random_tabular_lm(args.vocab, args.target_order, 1.0,
                               seed=derive_seed(args.seed, 1))
    drafter = random_tabular_drafter(args.vocab, args.drafter_order, args.k, 1.0,
                                     seed=derive_seed(args.seed, 2))
    topo = default_topology(args.k)
    tp = flatten_lm(target, 1.0)
    dp, rk = flatten_drafter(drafter, 1.0)
    parents = np.array(topo.parents, dtype=np.int64)
    depths = np.array(topo.depths, dtype=np.int64)
    ranks = np.array(topo.ranks, dtype=np.int64)
    prompt = np.zeros(max(args.target_order, args.drafter_order, 1), dtype=np.int64)
    return (tp, target.order, dp, rk, drafter.order, parents, depths, ranks,
            1, prompt, args.min_new, args.bin_len)


def run(kern, work, trials, seed):
    t0 = time.perf_counter()
    counts, vec = kern.run_speculative_trials(*work, trials, seed)
    elapsed = time.perf_counter() - t0
    return counts, KernelStats.from_vector(vec), elapsed


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=200_000,
                    help="trials for the compiled backend (default 200000)")
    ap.add_argument("--python-trials", type=int, default=None,
                    help="trials for the python backend (default trials/50)")
    ap.add_argument("--vocab", type=int, default=8)
    ap.add_argument("--k", type=int, default=3)
    ap.add_argument("--target-order", type=int, default=2)
    ap.add_argument("--drafter-order", type=int, default=1)
    ap.add_argument("--min-new", type=int, default=4)
    ap.add_argument("--bin-len", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = build_workload(args)
    py = mc._pick("python")
    try:
        compiled = mc._pick("compiled")
    except Exception:
        compiled = None

    # correctness cross-check: same seed, same trials, identical output
    if compiled is not None:
        n_check = 2_000
        c_py, s_py, _ = run(py, work, n_check, derive_seed(args.seed, 9))
        c_c, s_c, _ = run(compiled, work, n_check, derive_seed(args.seed, 9))
        assert np.array_equal(c_py, c_c), "backend histograms differ"
        assert s_py == s_c, "backend stats differ"
        print(f"cross-check: {n_check} same-seed trials bit-identical "
              f"(tau {s_py.tau:.3f})")

    rows = []
    py_trials = args.python_trials or max(2_000, args.trials // 50)
    _, stats, elapsed = run(py, work, py_trials, derive_seed(args.seed, 10))
    rows.append(("python", py_trials, elapsed, stats))
    if compiled is not None:
        run(compiled, work, 5_000, derive_seed(args.seed, 11))  # warm-up
        _, stats, elapsed = run(compiled, work, args.trials, derive_seed(args.seed, 10))
        rows.append(("compiled", args.trials, elapsed, stats))

    print(f"\nworkload: vocab={args.vocab} k={args.k} "
          f"orders=({args.target_order},{args.drafter_order}) "
          f"min_new={args.min_new}")
    print(f"{'backend':<10} {'trials':>9} {'seconds':>9} {'trials/s':>12} "
          f"{'ns/trial':>10}")
    for name, n, secs, st in rows:
        print(f"{name:<10} {n:>9} {secs:>9.3f} {n / secs:>12.0f} "
              f"{1e9 * secs / n:>10.0f}")
    if compiled is not None:
        py_rate = rows[0][1] / rows[0][2]
        c_rate = rows[1][1] / rows[1][2]
        print(f"\nspeedup: {c_rate / py_rate:.1f}x "
              f"(compiled over pure python, per trial)")
    else:
        print("\ncompiled backend not built; showing python baseline only")


if __name__ == "__main__":
    main()
