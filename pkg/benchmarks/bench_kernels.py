"""Compare the numba kernels with their numpy twins.

Times the fused objective and measure kernels on the default quadrature grid,
then an end-to-end Case 1 solve under each backend (in a subprocess, since the
backend is fixed at import time).

    python3 benchmarks/bench_kernels.py [--repeats 200]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from uda_lab import _kernels as K
from uda_lab._accel import NUMBA_AVAILABLE
from uda_lab.domains import LinearUdaModel, MixtureDomain, MixtureDomainPair, label_params
from uda_lab.measures import DEFAULT_SPEC

END_TO_END = (
    "import json, time; from uda_lab.casesolver import case_preset, run_case;"
    "run_case(case_preset(1), restarts=1, seed=1);"
    "t = time.perf_counter(); run_case(case_preset(1), restarts=5, seed=0);"
    "print(json.dumps(time.perf_counter() - t))"
)


def kernel_inputs():
    rng = np.random.default_rng(0)
    pair = MixtureDomainPair(
        MixtureDomain(rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2), 0.9, [0.6, 0.8]),
        MixtureDomain(rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2), 1.3, [1.0, 0.0]),
    )
    model = LinearUdaModel([0.28, 0.96], 2.5, 0.3)
    z, w = DEFAULT_SPEC.grid()
    return z, w, label_params(pair.source, model.u), label_params(pair.target, model.u), model.a, model.b


def time_call(fn, args, repeats):
    fn(*args)  # compile / warm
    return min(timeit.repeat(lambda: fn(*args), number=repeats, repeat=5)) / repeats


def end_to_end(flag):
    env = dict(os.environ, UDA_LAB_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200)
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        print("numba not importable; nothing to compare")
        return 0
    inputs = kernel_inputs()
    print(f"grid nodes: {len(inputs[0])}")
    print(f"{'kernel':<22}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>10}")
    for name in ("objective_terms", "measure_terms"):
        t_np = time_call(getattr(K, name + "_np"), inputs, args.repeats)
        t_nb = time_call(getattr(K, name + "_nb"), inputs, args.repeats)
        print(f"{name:<22}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>10.2f}")
    t_np, t_nb = end_to_end("0"), end_to_end("1")
    print(f"{'':<22}{'numpy (s)':>12}{'numba (s)':>12}")
    print(f"{'case 1, 5 restarts':<22}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
