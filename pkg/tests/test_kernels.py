import os
import subprocess
import sys

import numpy as np
import pytest

from srdhomog import kernels


def test_backend_reports_mode():
    assert kernels.backend() in ("numba", "numpy")


def test_env_flag_selects_numpy_backend():
    code = "from srdhomog import kernels; print(kernels.backend())"
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={**os.environ, "SRDHOMOG_KERNELS": "numpy"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_invalid_env_flag_rejected():
    code = "import srdhomog.kernels"
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={**os.environ, "SRDHOMOG_KERNELS": "sideways"},
        capture_output=True, text=True,
    )
    assert out.returncode != 0


@pytest.mark.skipif(not kernels.NUMBA_ENABLED, reason="numba backend unavailable")
class TestBackendEquivalence:
    def test_strain_at_points(self, rng):
        for dim in (2, 3):
            n = 500
            dofs = rng.standard_normal((n, 2**dim, dim))
            grads = rng.standard_normal((n, 2**dim, dim))
            a = kernels._strain_at_points_np(dofs, grads)
            b = kernels._strain_at_points_nb(dofs, grads)
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)

    def test_scatter_add_pairs(self, rng):
        vals = rng.standard_normal((1000, 6))
        slots = rng.integers(0, 50, size=1000)
        a = np.zeros((50, 6))
        b = np.zeros((50, 6))
        kernels._scatter_add_pairs_np(vals, slots, a)
        kernels._scatter_add_pairs_nb(vals, slots, b)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)

    def test_energy_dot(self, rng):
        sig = rng.standard_normal((200, 4, 3))
        eps = rng.standard_normal((200, 4, 3))
        w = rng.random((200, 4))
        a = kernels._energy_dot_np(sig, eps, w)
        b = kernels._energy_dot_nb(sig, eps, w)
        assert a == pytest.approx(b, rel=1e-12)
