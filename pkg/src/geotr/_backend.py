"""Kernel backend selection.

The compiled ``_ckernels`` extension is preferred; the pure-Python
``_pykernels`` module is used when the extension is missing or when the
environment variable ``GEOTR_PURE_PYTHON`` is set to a truthy value.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_FORCE_PYTHON = os.environ.get("GEOTR_PURE_PYTHON", "").lower() in ("1", "true", "yes")

kernels = _pykernels if (_FORCE_PYTHON or _ckernels is None) else _ckernels


def available():
    """Names of the importable backends."""
    names = ["python"]
    if _ckernels is not None:
        names.append("cython")
    return names


def get(name):
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def use(name):
    """Switch the process-wide backend; returns the previous name."""
    global kernels
    previous = kernels.NAME
    kernels = get(name)
    return previous


def current():
    return kernels.NAME
