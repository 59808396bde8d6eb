"""Select the training-kernel implementation at import time.

``UNLEARNAUDIT_BACKEND`` may be ``auto`` (default: compiled if importable),
``c`` (compiled, fail loudly if missing) or ``python`` (numpy fallback).
"""
import os

from . import _npkernels

_choice = os.environ.get("UNLEARNAUDIT_BACKEND", "auto").lower()
if _choice not in ("auto", "c", "python"):
    raise ImportError(f"UNLEARNAUDIT_BACKEND must be auto, c or python, not {_choice!r}")

_compiled = None
if _choice != "python":
    try:
        from . import _ckernels as _compiled
    except ImportError:
        if _choice == "c":
            raise

NAME = "c" if _compiled is not None else "python"
kernels = _compiled if _compiled is not None else _npkernels


def get(name: str):
    """Kernel module by name, for benchmarks and cross-checks."""
    if name == "python":
        return _npkernels
    if name == "c":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(name)


def compiled_available() -> bool:
    return _compiled is not None
