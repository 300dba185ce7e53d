"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the ``UKAST_BACKEND``
environment variable:

* ``auto`` (default) - use numba when it is importable, else numpy
* ``numba``          - require numba, raise if unavailable
* ``numpy``          - force the pure-numpy implementations

Both implementations expose the same functions with identical semantics;
``benchmarks/bench_kernels.py`` compares them side by side.
"""

import os

_choice = os.environ.get("UKAST_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"UKAST_BACKEND must be one of auto/numba/numpy, got {_choice!r}"
    )

if _choice == "numpy":
    from . import numpy_impl as _impl

    BACKEND = "numpy"
else:
    try:
        from . import numba_impl as _impl

        BACKEND = "numba"
    except ImportError as exc:
        if _choice == "numba":
            raise RuntimeError(
                "UKAST_BACKEND=numba but numba is not importable"
            ) from exc
        from . import numpy_impl as _impl

        BACKEND = "numpy"

pau_forward = _impl.pau_forward
pau_backward = _impl.pau_backward
adamw_update = _impl.adamw_update
