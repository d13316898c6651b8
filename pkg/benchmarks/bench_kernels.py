"""Compare the compiled and numpy Euler-Maruyama kernels on one transformed SDE.

    python3 benchmarks/bench_kernels.py [--paths 2000] [--steps 1000] [--repeat 3]
"""

import argparse
import time

import numpy as np

from zvonkin_sde import AssumptionParams, PipelineSpec, SimConfig, build_pipeline, make_preset
from zvonkin_sde import kernels
from zvonkin_sde.simulator import simulate_transformed


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--paths", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    params = AssumptionParams(1, 3.0, 0.5, 1.0, 0.5, 0.5, 1.0)
    field = make_preset("singular_power", 1, c=0.5, gamma=0.3)
    pipe = build_pipeline(field, params, 2.0, PipelineSpec(n=1024, lam=1000.0))
    backends = ["python"]
    try:
        kernels.get_kernel("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled kernel not built; timing the numpy fallback only")

    results = {}
    for name in backends:
        cfg = SimConfig(1.0, 1.0 / args.steps, args.paths, seed=3, record_stride=args.steps, backend=name)
        best = np.inf
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            batch = simulate_transformed(pipe.transformed, pipe.zmap, [0.5], cfg)
            best = min(best, time.perf_counter() - t0)
        results[name] = (best, batch.states[:, -1])
        rate = args.paths * args.steps / best
        print(f"{name:7s} best of {args.repeat}: {best:.3f} s  ({rate:.3g} path-steps/s)")
    if len(results) == 2:
        diff = np.max(np.abs(results["cython"][1] - results["python"][1]))
        print(f"speedup {results['python'][0] / results['cython'][0]:.2f}x, max |final state diff| = {diff:.3g}")


if __name__ == "__main__":
    main()
