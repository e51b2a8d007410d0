"""Selects the chunk-integrator backend at import time.

The compiled extension is preferred; the pure-Python twin is used when the
extension is absent or when LANGEVINLAB_BACKEND=python is set.  Both expose
the same integrate_chunk contract and produce bit-identical trajectories.
"""

import os

from . import _kernels_py

if os.environ.get("LANGEVINLAB_BACKEND", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
integrate_chunk = _impl.integrate_chunk

VARIANT_CODES = {
    "overdamped": _kernels_py.OVERDAMPED,
    "underdamped": _kernels_py.UNDERDAMPED,
    "nonreversible": _kernels_py.NONREVERSIBLE,
    "mirror": _kernels_py.MIRROR,
    "highorder": _kernels_py.HIGHORDER,
    "hfhr": _kernels_py.HFHR,
}
