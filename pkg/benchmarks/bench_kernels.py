"""Time the compiled kernels against the numpy fallbacks.

Run ``python benchmarks/bench_kernels.py [--repeat N]``. Each kernel is fed
the same inputs on both backends; the table reports the median wall time
per call and the speedup of the compiled version.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from fodshift import _kernels_py
from fodshift.csd import CSDSolver, response_from_tensor
from fodshift.metrics import default_tessellation
from fodshift.phantom import build_cohort

try:
    from fodshift import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def _time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def cases():
    rng = np.random.default_rng(0)

    # NNLS on a CSD-sized problem
    A = rng.standard_normal((400, 45))
    b = rng.standard_normal(400)
    yield "nnls 400x45", lambda k: k.nnls(A, b)

    # LDP from a real CSD voxel
    subj = build_cohort("dhcp", 1, grid_dims=(4, 4, 4))[0]
    solver = CSDSolver(subj.dirs, response_from_tensor(subj.lambda_par, subj.lambda_perp,
                                                         subj.dirs.shells()))
    s = subj.dwi[1, 1, 1] / subj.s0
    E = np.ascontiguousarray(solver.E)
    f = -E @ (solver.Q.T @ s)
    yield "ldp csd voxel", lambda k: k.ldp(E, f)

    # peak finding over a level-4 tessellation for 512 voxels
    tess = default_tessellation(4)
    vals = np.ascontiguousarray(rng.standard_normal((512, len(tess))))
    table = tess.neighbor_table
    yield "local_maxima 512 vox", lambda k: k.local_maxima(vals, table)

    # one Adam step on the estimator's parameter count
    n = 162 * 256 + 256 + 256 * 256 + 256 + 256 * 45 + 45
    g = rng.standard_normal(n).astype(np.float32)

    def adam(k):
        p = np.zeros(n, np.float32)
        m = np.zeros(n, np.float32)
        v = np.zeros(n, np.float32)
        k.adam_update(p, g, m, v, 5e-5, 0.9, 0.999, 1e-8, 1, 1e-3)
    yield f"adam {n} f32", adam


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _kernels is None:
        raise SystemExit("compiled extension not built; run pip install -e .")
    print(f"{'kernel':<24}{'cython (ms)':>12}{'python (ms)':>13}{'speedup':>9}")
    for name, fn in cases():
        tc = _time(lambda: fn(_kernels), args.repeat)
        tp = _time(lambda: fn(_kernels_py), args.repeat)
        print(f"{name:<24}{tc * 1e3:>12.3f}{tp * 1e3:>13.3f}{tp / tc:>9.1f}")


if __name__ == "__main__":
    main()
