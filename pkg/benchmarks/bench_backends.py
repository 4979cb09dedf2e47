"""Timing comparison of the numba and numpy kernel sets.

Runs the hot kernels (tree sampling, truncated recursion, full two-pass,
kappa batch) on identical inputs through both backends and prints a table
of per-call times and speedups.  Usage:

    python3 benchmarks/bench_backends.py [--depth 14] [--repeats 5]
"""

import argparse
import time

import numpy as np

from gwgreen import backend
from gwgreen.conegreen import solve_green
from gwgreen.estimates import (label_invariant_permutations, p_weights,
                               two_sphere_index)
from gwgreen.model import SubstitutionMatrix, percolation_process
from gwgreen.trees import sample_tree


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--depth", type=int, default=14)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    M = SubstitutionMatrix([[2]])
    b = percolation_process(2, 0.95)
    z = np.complex128(3.0 + 1e-3j)
    tables = b.sampling_tables()
    tree = sample_tree(b, 0, args.depth, 42)
    gv = solve_green(M, complex(z))
    det = gv.values
    zeros = np.zeros(1, dtype=np.complex128)

    idx = two_sphere_index(M, 0)
    rng = np.random.default_rng(0)
    g = np.empty((512, idx.n_total), dtype=np.complex128)
    g.real = rng.normal(0, 1, g.shape)
    g.imag = rng.lognormal(-0.3, 0.7, g.shape)
    perms, _ = label_invariant_permutations(M, 0)
    pj = p_weights(M, det, 0)
    mg = np.complex128(M.M[0].astype(np.complex128) @ det)

    mods = [("numba", backend.kernel_module("numba")),
            ("numpy", backend.kernel_module("numpy"))]

    cases = {
        f"sample_tree depth={args.depth} ({tree.n_nodes} nodes)":
            lambda m: m.sample_tree_kernel(tables[0], tables[1], tables[2],
                                           np.int64(0), np.int64(args.depth),
                                           np.uint64(42)),
        "truncated_green":
            lambda m: m.truncated_green_kernel(tree.labels, tree.child_start,
                                               tree.child_count, tree.depths,
                                               z, 1, det),
        "full_green":
            lambda m: m.full_green_kernel(tree.labels, tree.parents,
                                          tree.child_start, tree.child_count,
                                          tree.depths, z),
        "full_green_tail":
            lambda m: m.full_green_tail_kernel(tree.labels, tree.parents,
                                               tree.child_start,
                                               tree.child_count, tree.depths,
                                               z, M.M, det),
        "kappa_batch (512 x %d perms)" % perms.shape[0]:
            lambda m: m.kappa_batch(g, perms, idx.labels_all, idx.n_surv,
                                    idx.hat_labels, idx.surv_to_hat,
                                    idx.oprime_slot, det, np.complex128(z),
                                    idx.deg_j, mg, pj, 2.0, True),
    }

    print(f"{'kernel':44s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}")
    for name, call in cases.items():
        row = {}
        for mod_name, mod in mods:
            call(mod)  # warm-up (JIT compile on first numba call)
            row[mod_name] = best_of(lambda: call(mod), args.repeats)
        sp = row["numpy"] / row["numba"]
        print(f"{name:44s} {row['numba'] * 1e3:9.2f}ms "
              f"{row['numpy'] * 1e3:9.2f}ms {sp:7.1f}x")


if __name__ == "__main__":
    main()
