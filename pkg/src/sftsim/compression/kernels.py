"""Backend selection for the bitstream kernels.

Prefers the compiled extension and falls back to the pure-Python
implementation when it is unavailable. Set ``SFTSIM_BACKEND=python`` to force
the fallback (used by the benchmark), or ``SFTSIM_BACKEND=compiled`` to make
a missing extension a hard error.
"""

from __future__ import annotations

import os

_requested = os.environ.get("SFTSIM_BACKEND", "").strip().lower()

if _requested == "python":
    from sftsim.compression import _kernels_py as _impl

    BACKEND = "python"
else:
    try:
        from sftsim.compression import _kernels_cy as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from sftsim.compression import _kernels_py as _impl  # type: ignore[no-redef]

        BACKEND = "python"

rice_encode = _impl.rice_encode
rice_decode = _impl.rice_decode
prefix_encode = _impl.prefix_encode
prefix_decode = _impl.prefix_decode
