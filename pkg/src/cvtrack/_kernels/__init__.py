"""Hot-kernel backend selection.

The compiled Cython core is preferred when importable; otherwise the numpy
fallback is used.  Set CVTRACK_FORCE_FALLBACK=1 to skip the compiled core
(used by the benchmark and the backend-equivalence tests).
"""

import os

if os.environ.get("CVTRACK_FORCE_FALLBACK"):
    from . import _fallback as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _fallback as _impl

BACKEND = _impl.BACKEND
hungarian = _impl.hungarian
attn_forward = _impl.attn_forward
attn_backward = _impl.attn_backward

__all__ = ["BACKEND", "hungarian", "attn_forward", "attn_backward"]
