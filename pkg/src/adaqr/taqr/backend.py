"""Kernel backend selection: compiled extension if available, NumPy otherwise.

Set ADAQR_TAQR_BACKEND=py or =c to force a backend; the default (auto)
prefers the compiled kernel and silently falls back to pure NumPy.
"""

import os
import warnings

from . import _simplex_py

_requested = os.environ.get("ADAQR_TAQR_BACKEND", "auto").lower()
if _requested not in {"auto", "c", "py"}:
    warnings.warn(f"unknown ADAQR_TAQR_BACKEND={_requested!r}, using auto")
    _requested = "auto"

_impl = None
if _requested in ("auto", "c"):
    try:
        from . import _simplex_c as _impl
    except ImportError:
        if _requested == "c":
            raise ImportError(
                "ADAQR_TAQR_BACKEND=c but the compiled kernel is not built; "
                "reinstall with a C toolchain or use py/auto"
            )
        _impl = None
if _impl is None:
    _impl = _simplex_py

solve_from_basis = _impl.solve_from_basis
gj_inverse = _impl.gj_inverse

# status codes (identical constants in both kernels)
OPT = _simplex_py.OPT
CAP = _simplex_py.CAP
SINGULAR = _simplex_py.SINGULAR
INCONSISTENT = _simplex_py.INCONSISTENT


def backend_name():
    """'c' when the compiled kernel is active, else 'py'."""
    return "c" if _impl is not _simplex_py else "py"


def get_kernel(name):
    """Fetch a specific kernel module by name ('py' or 'c'); for benchmarks."""
    if name == "py":
        return _simplex_py
    if name == "c":
        from . import _simplex_c
        return _simplex_c
    raise ValueError(f"unknown kernel {name!r}")
