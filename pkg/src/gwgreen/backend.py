"""Kernel backend selection.

Two interchangeable kernel sets exist: numba (default, compiled, GIL-free)
and pure numpy (fallback).  Selection happens once at import through the
environment variable ``GWGREEN_BACKEND``:

    GWGREEN_BACKEND=auto    numba if importable, else numpy (default)
    GWGREEN_BACKEND=numba   require numba (warn + fall back if unavailable)
    GWGREEN_BACKEND=numpy   force the pure-numpy path

Tree structures are bit-identical across backends (integer RNG); green values
agree to rounding because complex division differs in the last ulp.  Anything
needing bitwise agreement between solved fixed points and tree recursions
must route both through the same backend, which is why the label-system map
``herglotz_apply`` is part of the kernel set.
"""

from __future__ import annotations

import os
import warnings


def _load(name: str):
    if name == "numba":
        from . import _kernels_numba as mod
    else:
        from . import _kernels_numpy as mod
    return mod


def _choose():
    requested = os.environ.get("GWGREEN_BACKEND", "auto").lower()
    if requested not in ("auto", "numba", "numpy"):
        warnings.warn(f"unknown GWGREEN_BACKEND={requested!r}, using auto")
        requested = "auto"
    if requested in ("auto", "numba"):
        try:
            return "numba", _load("numba")
        except ImportError as exc:
            if requested == "numba":
                warnings.warn(f"numba backend requested but unavailable "
                              f"({exc}); falling back to numpy")
    return "numpy", _load("numpy")


BACKEND_NAME, _mod = _choose()

sample_tree_kernel = _mod.sample_tree_kernel
truncated_green_kernel = _mod.truncated_green_kernel
full_green_kernel = _mod.full_green_kernel
full_green_tail_kernel = _mod.full_green_tail_kernel
herglotz_apply = _mod.herglotz_apply
kappa_batch = _mod.kappa_batch


def active_backend() -> str:
    return BACKEND_NAME


def kernel_module(name: str | None = None):
    """Kernel module by explicit name ('numba' or 'numpy'); the active one
    when name is None.  Benchmarks and parity tests use this to run both."""
    if name is None:
        return _mod
    if name not in ("numba", "numpy"):
        raise ValueError("backend name must be 'numba' or 'numpy'")
    return _load(name)
