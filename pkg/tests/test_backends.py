import os
import subprocess
import sys

import numpy as np
import pytest

from spatial_sir import _backend, _pycore
from spatial_sir.engine import TestFunctionTriple, martingale_path, simulate
from spatial_sir.kernels import GaussianT, Local, MeanField
from spatial_sir.model import ModelParams

from conftest import random_population

needs_compiled = pytest.mark.skipif("cython" not in _backend.available_backends(), reason="compiled core not built")


def _backend_in_subprocess(value):
    env = dict(os.environ, SPATIAL_SIR_BACKEND=value)
    res = subprocess.run([sys.executable, "-c", "from spatial_sir._backend import BACKEND; print(BACKEND)"],
                         capture_output=True, text=True, env=env)
    return res.returncode, res.stdout.strip()


def test_environment_forces_python_backend():
    assert _backend_in_subprocess("python") == (0, "python")


@needs_compiled
def test_default_prefers_compiled_core():
    assert _backend_in_subprocess("auto") == (0, "cython")


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        _backend.get_core("fortran")
    assert _backend.get_core("python") is _pycore


@needs_compiled
@pytest.mark.parametrize("spec", [MeanField(GaussianT(0.25)), Local(0.25)], ids=["meanfield", "local"])
def test_event_logs_identical_across_backends(spec):
    pop = random_population(800, 4, infected=0.05, removed=0.0)
    params = ModelParams(1.0, 5.0, 3.0)
    a = simulate(pop, params, spec, [1.0, 3.0], 17, backend="python")
    b = simulate(pop, params, spec, [1.0, 3.0], 17, backend="cython")
    assert a.n_events > 100
    assert np.array_equal(a.indices, b.indices) and np.array_equal(a.kinds, b.kinds)
    assert np.allclose(a.times, b.times, rtol=1e-12, atol=0)


@needs_compiled
def test_martingale_paths_agree_across_backends():
    pop = random_population(300, 6)
    params = ModelParams(1.0, 4.0, 2.0)
    spec = Local(0.25)
    traj = simulate(pop, params, spec, [2.0], 3)
    phi = TestFunctionTriple(lambda xy: np.column_stack([xy[:, 0], xy[:, 1] ** 2, np.cos(xy[:, 0])]), "phi")
    a = martingale_path(traj, phi, times=[0.5, 1.0, 2.0], backend="python")
    b = martingale_path(traj, phi, times=[0.5, 1.0, 2.0], backend="cython")
    assert np.allclose(a.martingale, b.martingale, rtol=1e-9, atol=1e-13)
    assert np.allclose(a.quadratic_variation, b.quadratic_variation, rtol=1e-9, atol=1e-15)
