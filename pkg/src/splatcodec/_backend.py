"""Pick the compiled kernels when available, else the numpy fallback.

Set ``SPLATCODEC_PURE_PYTHON=1`` to force the fallback. ``CGS_THREADS`` caps
the worker threads used by the compiled rasterizer.
"""

import math
import os

from . import _pykernels

kernels = _pykernels
scalar_exp = _pykernels.scalar_exp
NAME = "python"

if not os.environ.get("SPLATCODEC_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        pass
    else:
        kernels = _ckernels
        scalar_exp = math.exp  # libm, as called from C
        NAME = "cython"


def threads() -> int:
    try:
        n = int(os.environ.get("CGS_THREADS", "0"))
    except ValueError:
        n = 0
    cpus = os.cpu_count() or 1
    return max(1, min(n, cpus)) if n > 0 else cpus
