#!/usr/bin/env python3
"""Benchmark the numba kernels against the pure-numpy fallbacks.

Runs every hot kernel on representative problem sizes and prints a table
with the speedup.  The numpy path is the one selected by
HOMOGLAB_BACKEND=numpy; both implementations are imported directly here so
a single process compares them.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --repeats 20 --json results.json
"""

import argparse
import json
import time

import numpy as np

from homoglab.kernels import _numpy
try:
    from homoglab.kernels import _numba
    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False


def timeit(fn, args, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_csr_matvec(rng, n=512):
    # 5-point stencil pattern on an n x n grid
    nn = n * n
    diag = np.arange(nn)
    cols = np.stack([
        diag, (diag + 1) % nn, (diag - 1) % nn, (diag + n) % nn, (diag - n) % nn
    ], axis=1)
    order = np.argsort(cols, axis=1)
    cols = np.take_along_axis(cols, order, axis=1)
    data = rng.normal(size=(nn, 5))
    indptr = np.arange(nn + 1, dtype=np.int64) * 5
    x = rng.normal(size=nn)
    args = (data.reshape(-1), cols.reshape(-1).astype(np.int64), indptr, x)
    return f"csr_matvec (n={nn}, nnz={5 * nn})", args


def bench_trig_eval(rng, n_pts=200_000, modes=4, entries=4):
    points = rng.uniform(-50, 50, size=(n_pts, 2))
    mean = rng.normal(size=entries)
    freqs = rng.normal(size=(modes, 2))
    cos_amp = rng.normal(size=(modes, entries))
    sin_amp = rng.normal(size=(modes, entries))
    return f"trig_eval ({n_pts} pts, {modes} modes)", (
        points, mean, freqs, cos_amp, sin_amp
    )


def bench_shift_inf(rng, n_win=2000, n_z=400, modes=2):
    win = np.linspace(-50, 50, n_win).reshape(-1, 1)
    freqs = np.array([[1.0], [np.sqrt(2)]])[:modes]
    phase_win = win @ freqs.T
    cos_p = np.ascontiguousarray(np.cos(phase_win))
    sin_p = np.ascontiguousarray(np.sin(phase_win))
    cos_amp = np.zeros((modes, 1))
    sin_amp = np.full((modes, 1), 0.5)
    phase_y = freqs[:, 0] * 37.3
    zs = np.linspace(-4, 4, n_z).reshape(-1, 1)
    phase_z = np.ascontiguousarray(zs @ freqs.T)
    return f"shift_inf ({n_win} window x {n_z} shifts)", (
        cos_p, sin_p, cos_amp, sin_amp, phase_y, phase_z
    )


def bench_interp(rng, n_nodes=4096, n_pts=300_000, comps=2):
    values = rng.normal(size=(n_nodes, comps))
    n_axis = np.array([n_nodes], dtype=np.int64)
    origin = np.zeros(1)
    h = np.full(1, 2 * np.pi / n_nodes)
    points = rng.uniform(-1000, 1000, size=(n_pts, 1))
    return f"interp_periodic ({n_pts} pts)", (values, n_axis, origin, h, points)


BENCHES = [
    ("csr_matvec", bench_csr_matvec),
    ("trig_eval", bench_trig_eval),
    ("shift_inf", bench_shift_inf),
    ("interp_periodic", bench_interp),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--json", default=None)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"numba available: {HAVE_NUMBA}")
    header = f"{'kernel':<42} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))

    results = []
    for name, builder in BENCHES:
        label, bench_args = builder(rng)
        np_fn = getattr(_numpy, name)
        t_np = timeit(np_fn, bench_args, args.repeats)
        if HAVE_NUMBA:
            nb_fn = getattr(_numba, name)
            nb_fn(*bench_args)  # JIT warmup outside the timed region
            t_nb = timeit(nb_fn, bench_args, args.repeats)
            # the two paths must agree before we quote a speedup
            ref = np.asarray(np_fn(*bench_args), dtype=object if name == "shift_inf" else None)
            out = np.asarray(nb_fn(*bench_args), dtype=object if name == "shift_inf" else None)
            if name == "shift_inf":
                assert abs(float(ref[0]) - float(out[0])) < 1e-10
            else:
                np.testing.assert_allclose(
                    np.asarray(ref, float), np.asarray(out, float), rtol=1e-10, atol=1e-12
                )
            speed = t_np / t_nb
            print(f"{label:<42} {t_np * 1e3:>12.3f} {t_nb * 1e3:>12.3f} {speed:>8.1f}x")
        else:
            t_nb = None
            speed = None
            print(f"{label:<42} {t_np * 1e3:>12.3f} {'-':>12} {'-':>9}")
        results.append(
            {"kernel": name, "case": label, "numpy_s": t_np, "numba_s": t_nb,
             "speedup": speed}
        )

    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"numba_available": HAVE_NUMBA, "results": results}, fh, indent=2)
        print(f"\nwrote {args.json}")


if __name__ == "__main__":
    main()
