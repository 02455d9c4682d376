"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: a numba-jitted one (fast,
default when numba imports) and a pure-numpy one (no compilation, always
available).  The environment variable ``ZONESEG_BACKEND`` picks one at
import time:

- unset or ``auto``: numba if importable, else numpy
- ``numba``: require numba, fail loudly if missing
- ``numpy``: force the fallback

Both backends produce results equal to within floating-point roundoff
and are individually run-to-run deterministic.
"""

from __future__ import annotations

import os

from ..errors import ConfigError

_choice = os.environ.get("ZONESEG_BACKEND", "auto").strip().lower() or "auto"

if _choice == "auto":
    try:
        from . import numba_kernels as _impl
    except ImportError:
        from . import numpy_kernels as _impl
elif _choice == "numba":
    from . import numba_kernels as _impl
elif _choice == "numpy":
    from . import numpy_kernels as _impl
else:
    raise ConfigError(
        f"ZONESEG_BACKEND must be 'auto', 'numba', or 'numpy', got {_choice!r}"
    )

backend_name = _impl.BACKEND_NAME

conv2d_forward = _impl.conv2d_forward
conv2d_input_grad = _impl.conv2d_input_grad
conv2d_weight_grad = _impl.conv2d_weight_grad
tconv2d_forward = _impl.tconv2d_forward
tconv2d_input_grad = _impl.tconv2d_input_grad
tconv2d_weight_grad = _impl.tconv2d_weight_grad
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward
