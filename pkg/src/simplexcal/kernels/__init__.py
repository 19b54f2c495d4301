"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import from the ``SIMPLEXCAL_BACKEND``
environment variable:

* ``auto`` (default) - numba when importable, else numpy
* ``numba``          - require the jit path, raise if unavailable
* ``numpy``          - force the reference path

``benchmarks/bench_kernels.py`` compares the two paths head to head.
"""

import os
import warnings

_ENV_VAR = "SIMPLEXCAL_BACKEND"
_CHOICES = ("auto", "numba", "numpy")


def _select():
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice not in _CHOICES:
        warnings.warn(
            f"{_ENV_VAR}={choice!r} not in {_CHOICES}; falling back to 'auto'",
            stacklevel=2,
        )
        choice = "auto"
    if choice == "numpy":
        from . import _numpy as impl

        return impl, "numpy"
    try:
        from . import _numba as impl

        return impl, "numba"
    except ImportError:
        if choice == "numba":
            raise
        from . import _numpy as impl

        return impl, "numpy"


_impl, _backend_name = _select()


def backend() -> str:
    """Name of the kernel backend selected at import ('numba' or 'numpy')."""
    return _backend_name


logsumexp_rows = _impl.logsumexp_rows
softmax_rows = _impl.softmax_rows
softplus_arr = _impl.softplus_arr
concrete_draws = _impl.concrete_draws
concrete_log_density_rows = _impl.concrete_log_density_rows
mc_mean_rows = _impl.mc_mean_rows
