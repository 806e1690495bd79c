"""Hot counting kernels with a compiled core and a numpy fallback.

The compiled extension (``_core``, built from Cython) is preferred; if it
was not built, or ``CAUSALDX_PURE_PYTHON=1`` is set, the numpy lane in
``_fallback`` is used. Both expose the same two functions with identical
semantics:

- ``transition_counts``: successor/occurrence counting behind the
  transition-probability matrix build.
- ``node_config_counts``: per-node parent-configuration counting behind
  DAG log-likelihood fitting.

``KERNEL_IMPL`` names the active lane ("cython" or "python").
"""

from __future__ import annotations

import os

from . import _fallback

if os.environ.get("CAUSALDX_PURE_PYTHON", "") == "1":
    _impl = _fallback
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _fallback

KERNEL_IMPL: str = _impl.IMPL
transition_counts = _impl.transition_counts
node_config_counts = _impl.node_config_counts

__all__ = ["KERNEL_IMPL", "transition_counts", "node_config_counts"]
