#!/usr/bin/env python3
"""Benchmark the numba kernels against their pure-numpy fallbacks.

Times the three hot paths (per-step fine assembly, triple-tensor
precomputation, step-time tensor contractions) under both backends
in one process.  The backend stays switchable at runtime exactly so this
comparison does not need separate interpreter runs; set
``LLGRPS_BACKEND=numpy`` to force the fallback globally instead.

Usage: python benchmarks/bench_kernels.py [--nc 4] [--refine-J 3] [--repeats 5]
"""

import argparse
import time

import numpy as np

from llgrps import _kernels
from llgrps.basis import build_measurements
from llgrps.coefficient import mstrig_field
from llgrps.harness import default_initial_field
from llgrps.mesh import build_hier_mesh
from llgrps.schemes import FineSystemBuilder, SchemeConfig
from llgrps.solver import interpolate_initial, make_component_bases, make_stepper, precompute_tensors


def timeit(fn, repeats):
    fn()  # warm-up / JIT compile, excluded
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nc", type=int, default=4)
    ap.add_argument("--refine-J", dest="refine_J", type=int, default=3)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    mesh = build_hier_mesh(args.nc, args.refine_J)
    kappa = mstrig_field()
    meas = build_measurements(mesh, "volume")
    print(f"mesh: {mesh.n_fine_nodes} fine nodes, {mesh.n_fine_triangles} triangles, "
          f"{meas.count} volume measurements")

    cfg = SchemeConfig("cimrak", dt=mesh.H**2)
    builder = FineSystemBuilder(mesh, kappa, cfg)
    m_prev = default_initial_field(mesh.n_fine_nodes)
    rng = np.random.default_rng(0)
    m_prev = m_prev + 0.05 * rng.standard_normal(m_prev.shape)

    bases = make_component_bases(mesh, kappa, meas, form="mixed", layer=2)
    tensors = precompute_tensors(mesh, kappa, bases)
    stepper = make_stepper(cfg, mesh, kappa, bases, accelerated=True, tensors=tensors)
    state = interpolate_initial(meas, bases, m_prev)

    jobs = [
        ("fine step assembly", lambda: builder.assemble(m_prev)),
        ("tensor precompute", lambda: precompute_tensors(mesh, kappa, bases)),
        ("accelerated coarse step", lambda: stepper.step(state)),
    ]

    backends = ["numpy"] + (["numba"] if _kernels._HAVE_NUMBA else [])
    results = {}
    for backend in backends:
        _kernels.set_backend(backend)
        for name, fn in jobs:
            results[(name, backend)] = timeit(fn, args.repeats)
    if _kernels._HAVE_NUMBA:
        _kernels.set_backend("numba")

    width = max(len(n) for n, _ in jobs)
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for name, _ in jobs:
        row = f"{name:<{width}}  "
        for b in backends:
            row += f"{results[(name, b)]*1e3:>10.2f}ms"
        if len(backends) == 2:
            row += f"{results[(name, 'numpy')] / results[(name, 'numba')]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
