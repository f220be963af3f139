"""Kernel backend selection.

The hot inner loops (bit packing, (de)quantization, the page-table tree) have
two implementations: a compiled Cython extension and a numpy / pure-Python
fallback. The compiled one is used when it was built; ``DYNACT_BACKEND=python``
forces the fallback, ``DYNACT_BACKEND=compiled`` insists on the extension.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_requested = os.environ.get("DYNACT_BACKEND", "").strip().lower()
if _requested in ("", "auto"):
    kernels = _ckernels if _ckernels is not None else _pykernels
elif _requested == "python":
    kernels = _pykernels
elif _requested in ("c", "compiled"):
    if _ckernels is None:
        raise RuntimeError(
            "DYNACT_BACKEND=compiled but the dynact._ckernels extension is "
            "not built; run `python setup.py build_ext --inplace`"
        )
    kernels = _ckernels
else:
    raise RuntimeError(f"unknown DYNACT_BACKEND value {_requested!r}")

BACKEND = kernels.BACKEND_NAME


def available_backends():
    """Name -> kernel module for every backend importable right now."""
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["compiled"] = _ckernels
    return out
