"""Numba against numpy: per-kernel timings and an end-to-end run per backend.

    python3 benchmarks/bench_kernels.py [--repeat 2000] [--steps 3000]

The end-to-end part starts a fresh interpreter for each value of
ECMCMC_NUMBA, since the backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ecmcmc import kernels
from ecmcmc.model import ClassifierPosterior, make_blobs

END_TO_END = """
import time
import numpy as np
from ecmcmc.dynamics import EcConfig, SghmcConfig
from ecmcmc.harness import ProtocolConfig, run_elastic
from ecmcmc.kernels import BACKEND
from ecmcmc.model import ClassifierPosterior, MinibatchSpec, make_blobs

model = ClassifierPosterior(make_blobs(500, 4, 2, 2.0), (4, 16, 2), 1e-5, MinibatchSpec(100))
base = SghmcConfig(1e-3, grad_noise=10.0)
ec = EcConfig(1.0, base, center_noise=10.0, workers=6, noise_scaling="linear",
              worker_noise_includes_center=False)
run_elastic(model, ec, ProtocolConfig("elastic", 6, 8), 20, 0)
t = time.perf_counter()
run_elastic(model, ec, ProtocolConfig("elastic", 6, 8), {steps}, 0)
print(BACKEND, time.perf_counter() - t)
"""


def kernel_cases(n=114, k=6):
    rng = np.random.default_rng(0)
    v0, p0, g0, c0, z0 = rng.standard_normal((5, n))
    ones = np.ones(n)
    thetas = rng.standard_normal((k, n))
    data = make_blobs(100, 4, 2, 2.0)
    model = ClassifierPosterior(data, (4, 16, 2))
    theta = model.init_theta(rng)
    sizes = np.array(model.layers, dtype=np.int64)
    series = np.cumsum(rng.standard_normal(4000)) * 0.01
    series -= series.mean()
    return {
        "sghmc_update": lambda ns: ns.sghmc_update(v0, p0, g0, 0.01, ones, ones, ones, z0),
        "ec_worker_update": lambda ns: ns.ec_worker_update(v0, p0, g0, c0, 0.01, ones, ones, 1.0, ones, z0),
        "ec_center_update": lambda ns: ns.ec_center_update(c0, p0, thetas, 0.01, ones, ones, 1.0, ones, z0),
        "ec_deterministic_update": lambda ns: ns.ec_deterministic_update(
            thetas, thetas, c0, p0, thetas, 0.01, 1.0, 0.1),
        "eamsgd_update": lambda ns: ns.eamsgd_update(thetas, thetas, c0, thetas, 0.01, 1.0, 0.1, True),
        "mlp_nll_grad": lambda ns: ns.mlp_nll_grad(theta, data.x, data.y, sizes, True, True),
        "ips_tau": lambda ns: ns.ips_tau(series),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=2000)
    parser.add_argument("--steps", type=int, default=3000, help="worker steps in the end-to-end run")
    args = parser.parse_args(argv)

    cases = kernel_cases()
    print(f"{'kernel':26s} {'numpy us':>10s} {'numba us':>10s} {'speed-up':>9s}")
    for name, call in cases.items():
        call(kernels.NUMBA)  # compile outside the timed loop
        t_np = timeit.timeit(lambda: call(kernels.NUMPY), number=args.repeat) / args.repeat * 1e6
        t_nb = timeit.timeit(lambda: call(kernels.NUMBA), number=args.repeat) / args.repeat * 1e6
        print(f"{name:26s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:8.2f}x")

    print(f"\nend to end: elastic K=6 classifier run, {args.steps} steps per worker")
    for flag in ("0", "1"):
        env = dict(os.environ, ECMCMC_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", END_TO_END.format(steps=args.steps)],
                             env=env, capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"  ECMCMC_NUMBA={flag} ({backend:5s}) {float(seconds):8.2f} s")


if __name__ == "__main__":
    main()
