import os
import subprocess
import sys

import numpy as np
import pytest

from ecmcmc import kernels

SCRIPT = """
import hashlib
import numpy as np
from ecmcmc.dynamics import EcConfig, SghmcConfig
from ecmcmc.harness import ProtocolConfig, run_elastic
from ecmcmc.kernels import BACKEND
from ecmcmc.model import GaussianTarget

model = GaussianTarget(np.zeros(3), np.diag([0.5, 1.0, 2.0]), grad_noise=0.3)
ec = EcConfig(0.7, SghmcConfig(0.05, grad_noise=1.0), center_noise=0.5, workers=3)
run = run_elastic(model, ec, ProtocolConfig("elastic", 3, 2), 500, 1)
print(BACKEND, hashlib.sha256(run.samples.tobytes()).hexdigest())
"""


def run_with(flag):
    env = dict(os.environ, ECMCMC_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


def test_env_flag_selects_backend_and_results_agree():
    numpy_backend, numpy_digest = run_with("0")
    numba_backend, numba_digest = run_with("1")
    assert (numpy_backend, numba_backend) == ("numpy", "numba")
    assert numpy_digest == numba_digest


@pytest.mark.parametrize("name", ["sghmc_update", "ec_worker_update"])
def test_update_flavours_agree_bitwise(name):
    rng = np.random.default_rng(0)
    v = rng.standard_normal((6, 20))
    ones = np.ones(20)
    if name == "sghmc_update":
        args = (v[0], v[1], v[2], 0.01, ones, ones * 0.5, ones * 0.1, v[3])
    else:
        args = (v[0], v[1], v[2], v[4], 0.01, ones, ones * 0.5, 0.8, ones * 0.1, v[3])
    a = getattr(kernels.NUMPY, name)(*args)
    b = getattr(kernels.NUMBA, name)(*args)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_center_update_flavours_agree_bitwise():
    rng = np.random.default_rng(1)
    c, r, z = rng.standard_normal((3, 5))
    thetas = rng.standard_normal((4, 5))
    ones = np.ones(5)
    a = kernels.NUMPY.ec_center_update(c, r, thetas, 0.01, ones, ones, 1.0, ones * 0.2, z)
    b = kernels.NUMBA.ec_center_update(c, r, thetas, 0.01, ones, ones, 1.0, ones * 0.2, z)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)
