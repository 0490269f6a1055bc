"""Numba kernels against their numpy twins on representative workloads.

Usage: ``python benchmarks/bench_kernels.py [--repeat 5]``. The first numba
call (compilation, or cache load) is excluded from the timings.
"""
import argparse
import timeit

import numpy as np

from simplex_alloc import kernels
from simplex_alloc._accel import HAVE_NUMBA
from simplex_alloc.constraints import ConstraintConfig, is_feasible, to_h_polytope


def hit_and_run_case():
    cfg = ConstraintConfig.build(13, (1, 3, 5, 7), 0.3, (2, 3, 4, 8, 9), 0.5)
    poly = to_h_polytope(cfg)
    rng = np.random.default_rng(0)
    burn, thin, count = 1000, 10, 2000
    steps = burn + thin * count
    args = (poly.a_matrix, poly.b_vector, is_feasible(cfg).point, rng.standard_normal((steps, 13)),
            rng.random(steps), burn, thin, count)
    return "hit_and_run (N=13, 21k steps)", kernels.hit_and_run_np, getattr(kernels, "hit_and_run_nb", None), args


def forward_backward_case():
    rng = np.random.default_rng(1)
    k, t = 4, 2000
    trans = rng.dirichlet(np.ones(k) * 5, size=k)
    log_em = rng.normal(size=(t, k))
    args = (log_em, trans, np.full(k, 1 / k))
    return "forward_backward (K=4, T=2000)", kernels.forward_backward_np, getattr(kernels, "forward_backward_nb", None), args


def gae_case():
    rng = np.random.default_rng(2)
    t, e = 2048, 16
    dones = (rng.random((t, e)) < 1 / 12).astype(np.float64)
    args = (rng.normal(size=(t, e)), rng.normal(size=(t, e)), dones, rng.normal(size=e), 0.99, 0.95)
    return "gae (2048 x 16 envs)", kernels.gae_np, getattr(kernels, "gae_nb", None), args


def best_of(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.2 and number < 10_000:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"{'kernel':34s} {'numpy':>12s} {'numba':>12s} {'speedup':>8s}")
    for case in (hit_and_run_case, forward_backward_case, gae_case):
        name, np_fn, nb_fn, fargs = case()
        t_np = best_of(np_fn, fargs, args.repeat)
        if nb_fn is None or not HAVE_NUMBA:
            print(f"{name:34s} {t_np * 1e3:10.3f}ms {'n/a':>12s}")
            continue
        nb_fn(*fargs)  # compile
        t_nb = best_of(nb_fn, fargs, args.repeat)
        print(f"{name:34s} {t_np * 1e3:10.3f}ms {t_nb * 1e3:10.3f}ms {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
