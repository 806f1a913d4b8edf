"""Backend selection for the row kernels.

The compiled extension is used when it imports cleanly; set
``PROTEUS_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

try:
    if os.environ.get("PROTEUS_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py


def backend_name():
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def set_backend(name):
    """Switch the kernel backend at runtime ("compiled" or "python")."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}")
    _active = BACKENDS[name]


def get():
    return _active
