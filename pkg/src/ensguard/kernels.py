"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is imported. Set ENSGUARD_PURE_PYTHON=1 to force the fallback.
"""

import os

if os.environ.get("ENSGUARD_PURE_PYTHON", "") not in ("", "0"):
    from . import _pykernels as _impl
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        from . import _pykernels as _impl
        BACKEND = "python"

first_mismatch = _impl.first_mismatch
relation_mismatch_bits = _impl.relation_mismatch_bits
relation_mismatch_float = _impl.relation_mismatch_float
checksum = _impl.checksum
majority_repair = _impl.majority_repair

__all__ = [
    "BACKEND",
    "first_mismatch",
    "relation_mismatch_bits",
    "relation_mismatch_float",
    "checksum",
    "majority_repair",
]
