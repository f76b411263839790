import subprocess
import sys

import numpy as np
import pytest

from viptt import _kernels

BACKENDS = _kernels.available_backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def _pair():
    return _kernels.get_backend("python"), _kernels.get_backend("cython")


def test_backend_selection():
    assert _kernels.get_backend("python").BACKEND == "python"
    with pytest.raises(ValueError):
        _kernels.get_backend("fortran")
    assert _kernels.BACKEND in BACKENDS


def test_env_forces_pure_python():
    code = "from viptt import _kernels; print(_kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={"VIPTT_PURE_PYTHON": "1", "PATH": ""},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
@pytest.mark.parametrize("k,pad", [(1, 0), (3, 1), (3, 0)])
def test_conv_parity(k, pad):
    py, cy = _pair()
    rng = np.random.default_rng(k + pad)
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    ya, yb = py.conv2d_forward(x, w, b, pad), cy.conv2d_forward(x, w, b, pad)
    assert np.allclose(ya, yb, atol=1e-12, rtol=0)
    dy = rng.normal(size=ya.shape)
    for a, c in zip(py.conv2d_backward(x, w, dy, pad), cy.conv2d_backward(x, w, dy, pad)):
        assert a.shape == c.shape and np.allclose(a, c, atol=1e-12, rtol=0)


@needs_compiled
def test_maxpool_parity_with_ties_and_odd_sizes():
    py, cy = _pair()
    x = np.random.default_rng(0).integers(0, 3, size=(2, 2, 5, 7)).astype(np.float64)
    (ya, ia), (yb, ib) = py.maxpool2_forward(x), cy.maxpool2_forward(x)
    assert np.array_equal(ya, yb) and np.array_equal(ia, ib)
    dy = np.random.default_rng(1).normal(size=ya.shape)
    assert np.array_equal(py.maxpool2_backward(dy, ia, x.shape), cy.maxpool2_backward(dy, ib, x.shape))


@needs_compiled
@pytest.mark.parametrize("deg", [0.0, 10.0, -45.0, 90.0, 137.0])
def test_rotation_parity(deg):
    py, cy = _pair()
    vol = np.random.default_rng(2).random((3, 9, 12))
    a, b = py.rotate_bilinear(vol, np.radians(deg)), cy.rotate_bilinear(vol, np.radians(deg))
    assert np.allclose(a, b, atol=1e-12, rtol=0)
