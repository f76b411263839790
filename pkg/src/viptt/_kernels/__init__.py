"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is used when it was built and ``VIPTT_PURE_PYTHON``
is unset or ``0``. Both modules expose the same functions plus a
``BACKEND`` string.
"""
import os

from . import _pure

try:
    from . import _ckernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def available_backends():
    return ["cython", "python"] if _compiled is not None else ["python"]


def get_backend(name=None):
    if name is None:
        forced = os.environ.get("VIPTT_PURE_PYTHON", "0") not in ("", "0")
        name = "python" if forced or _compiled is None else "cython"
    if name == "python":
        return _pure
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


_active = get_backend()
BACKEND = _active.BACKEND
conv2d_forward = _active.conv2d_forward
conv2d_backward = _active.conv2d_backward
maxpool2_forward = _active.maxpool2_forward
maxpool2_backward = _active.maxpool2_backward
rotate_bilinear = _active.rotate_bilinear
