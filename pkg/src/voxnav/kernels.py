"""Backend selection for the hot loops.

The compiled extension is used when it imports cleanly; setting
``VOXNAV_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
raycast = _pykernels.raycast
astar = _pykernels.astar
im2col = _pykernels.im2col
col2im = _pykernels.col2im

if not os.environ.get("VOXNAV_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None
    else:
        BACKEND = "cython"
        raycast = _ckernels.raycast
        astar = _ckernels.astar
        im2col = _ckernels.im2col
        col2im = _ckernels.col2im


def backends():
    """Mapping of available backend name -> kernel module."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels as ck
    except ImportError:
        return out
    out["cython"] = ck
    return out
