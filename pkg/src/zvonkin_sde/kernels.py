"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``ZVONKIN_KERNEL=python`` to force the fallback.
"""

import os

from . import _fallback

BACKEND = "python"
simulate_block = _fallback.simulate_block

if os.environ.get("ZVONKIN_KERNEL", "").lower() != "python":
    try:
        from . import _kernels
    except ImportError:  # extension not built
        pass
    else:
        BACKEND = "cython"
        simulate_block = _kernels.simulate_block


def get_kernel(name: str | None = None):
    """Return ``simulate_block`` for ``"cython"``, ``"python"`` or the default."""
    if name is None:
        return simulate_block
    if name == "python":
        return _fallback.simulate_block
    if name == "cython":
        from . import _kernels

        return _kernels.simulate_block
    raise ValueError(f"unknown kernel backend {name!r}")
