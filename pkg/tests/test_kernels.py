import os
import subprocess
import sys

import numpy as np
import pytest

from lobstefan import _kernels

needs_numba = pytest.mark.skipif(_kernels.run_book_nb is None, reason="numba not importable")


def _case(n=40, steps=300, seed=1, noisy=True):
    dx = 0.05
    dt = 0.4 * dx * dx
    x = dx * np.arange(1, n + 1)
    rng = np.random.default_rng(seed)
    shape = (steps, n) if noisy else (0, n)
    na = rng.normal(0, 0.3, shape)
    nb = rng.normal(0, 0.3, shape)
    return (3 * x * np.exp(-1.5 * x), 2 * x * np.exp(-x), 0.25, 0.4, 0.3, na, nb, dx, dt, 2.0, 1e6, steps)


@needs_numba
@pytest.mark.parametrize("noisy", [False, True])
def test_backends_agree(noisy):
    a = _case(noisy=noisy)
    out_np = _kernels.run_book(*a, backend="numpy")
    out_nb = _kernels.run_book(*a, backend="numba")
    for u, v in zip(out_np[:4], out_nb[:4]):
        np.testing.assert_allclose(u, v, rtol=0, atol=1e-13)
    assert out_np[4] == out_nb[4] == -1


@needs_numba
def test_backends_agree_on_truncation():
    a = list(_case(noisy=False))
    a[10] = 0.1  # threshold below the opening velocity
    s_np = _kernels.run_book(*a, backend="numpy")[4]
    s_nb = _kernels.run_book(*a, backend="numba")[4]
    assert s_np == s_nb == 0


def test_diffuse_stencil():
    v = np.array([0.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(_kernels.diffuse_np(v, 0.25), [0.25, 0.5, 0.25, 0.0])


def test_far_ghost_is_replicated():
    v = np.ones(5)
    # only the first cell feels the zero ghost
    np.testing.assert_allclose(_kernels.diffuse_np(v, 0.5), [0.5, 1, 1, 1, 1])


def test_shift_by_whole_cell():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(_kernels.shift_np(v, 1.0), [2.0, 3.0, 4.0, 4.0])
    np.testing.assert_allclose(_kernels.shift_np(v, -1.0), [0.0, 1.0, 2.0, 3.0])


def test_shift_half_cell_interpolates():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_allclose(_kernels.shift_np(v, 0.5), [1.5, 2.5, 3.5, 4.0])
    np.testing.assert_allclose(_kernels.shift_np(v, -0.5), [0.5, 1.5, 2.5, 3.5])


def test_unknown_backend():
    with pytest.raises(ValueError):
        _kernels.run_book(*_case(steps=1), backend="fortran")


def test_env_flag_selects_numpy():
    code = "from lobstefan import _kernels as k; print(k.PURE_NUMPY, k.USE_NUMBA)"
    env = dict(os.environ, LOBSTEFAN_PURE_NUMPY="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["True", "False"]
    env["LOBSTEFAN_PURE_NUMPY"] = "0"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split()[0] == "False"
