import os
import subprocess
import sys

import numpy as np
import pytest

from mmolre import _kernels
from oracles import conv1d_ref

needs_numba = pytest.mark.skipif(not _kernels.HAS_NUMBA, reason="numba not installed")

SHAPES = [(1, 5, 2, 4, 3, 1), (3, 7, 4, 2, 1, 0), (2, 4, 3, 3, 5, 2), (2, 2, 3, 3, 3, 0)]


@pytest.mark.parametrize("B,T,c_in,c_out,K,pad", SHAPES)
def test_numpy_forward_matches_loops(rng, B, T, c_in, c_out, K, pad):
    x, w, b = rng.normal(size=(B, T, c_in)), rng.normal(size=(K, c_in, c_out)), rng.normal(size=c_out)
    out = _kernels.conv1d_forward_np(x, w, b, pad)
    for i in range(B):
        np.testing.assert_allclose(out[i], conv1d_ref(x[i], w, b, pad), atol=1e-12)


@needs_numba
@pytest.mark.parametrize("B,T,c_in,c_out,K,pad", SHAPES)
def test_numba_and_numpy_agree(rng, B, T, c_in, c_out, K, pad):
    x, w, b = rng.normal(size=(B, T, c_in)), rng.normal(size=(K, c_in, c_out)), rng.normal(size=c_out)
    np.testing.assert_allclose(
        _kernels._conv1d_forward_nb(x, w, b, pad), _kernels.conv1d_forward_np(x, w, b, pad), atol=1e-12
    )
    g = rng.normal(size=(B, T + 2 * pad - K + 1, c_out))
    for a, e in zip(_kernels._conv1d_backward_nb(x, w, g, pad), _kernels.conv1d_backward_np(x, w, g, pad)):
        np.testing.assert_allclose(a, e, atol=1e-12)


def test_backward_is_adjoint_of_forward(rng):
    # <conv(x), g> is bilinear, so its gradients follow from one forward each
    x, w = rng.normal(size=(2, 6, 3)), rng.normal(size=(3, 3, 4))
    g = rng.normal(size=(2, 6, 4))
    gx, gw, gb = _kernels.conv1d_backward(x, w, g, 1)
    dx = rng.normal(size=x.shape)
    lhs = np.sum(_kernels.conv1d_forward(dx, w, np.zeros(4), 1) * g)
    np.testing.assert_allclose(lhs, np.sum(gx * dx), rtol=1e-12)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 1)), rtol=1e-12)


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), ("off", "numpy")])
def test_env_flag_selects_numpy(flag, expected):
    env = {**os.environ, "MOLRE_NUMBA": flag}
    proc = subprocess.run(
        [sys.executable, "-c", "from mmolre._kernels import backend_name; print(backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert proc.stdout.strip() == expected


@needs_numba
def test_default_backend_is_numba():
    env = {k: v for k, v in os.environ.items() if k != "MOLRE_NUMBA"}
    proc = subprocess.run(
        [sys.executable, "-c", "from mmolre._kernels import backend_name; print(backend_name())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert proc.stdout.strip() == "numba"
