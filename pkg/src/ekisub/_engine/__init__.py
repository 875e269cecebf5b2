"""Run-loop backends.

The compiled Cython kernel is preferred when present; the numpy reference
loop is the fallback and the semantic definition. Selection happens once at
import. Set EKISUB_BACKEND=python to force the fallback or
EKISUB_BACKEND=compiled to require the extension.
"""

import os

from . import reference

_requested = os.environ.get("EKISUB_BACKEND", "").strip().lower()

_impl = reference
_backend = "python"
if _requested in ("python", "reference"):
    pass
else:
    try:
        from . import _fastloop

        _impl = _fastloop
        _backend = "compiled"
    except ImportError:
        if _requested in ("compiled", "fast"):
            raise
        _impl = reference


def backend_name() -> str:
    """Which run-loop implementation is active: 'compiled' or 'python'."""
    return _backend


def run_loop(*args, **kwargs):
    return _impl.run_loop(*args, **kwargs)


QUANTITIES = reference.QUANTITIES
