"""Hot numeric kernels with a compiled core and a NumPy fallback.

The Cython extension is preferred when importable; setting
``RADSYNTH_PURE=1`` forces the NumPy implementation. ``BACKEND`` names the
active one so benchmarks and tests can report it.
"""

import os

from . import _py

if os.environ.get("RADSYNTH_PURE") == "1":
    _impl = _py
    BACKEND = "numpy"
else:
    try:
        from . import _cy as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _py
        BACKEND = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
diffusion_step = _impl.diffusion_step
bilinear_resize = _impl.bilinear_resize
