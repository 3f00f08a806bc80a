"""Training hot kernels with a compiled core and a NumPy fallback.

The compiled Cython backend is used when its extension module imports;
otherwise the NumPy implementation takes over. Set ``FEDHOME_KERNELS=py``
or ``FEDHOME_KERNELS=cy`` to force a backend (forcing ``cy`` raises if the
extension is unavailable).
"""

from __future__ import annotations

import os

from . import _pykernels

_forced = os.environ.get("FEDHOME_KERNELS", "").strip().lower()

if _forced == "py":
    _impl = _pykernels
elif _forced == "cy":
    from . import _cykernels as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _cykernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

forward_probs = _impl.forward_probs
loss_and_grad = _impl.loss_and_grad
clipped_grad_sum = _impl.clipped_grad_sum


def active_backend() -> str:
    """Name of the backend in use: "cy" (compiled) or "py" (NumPy)."""
    return _impl.BACKEND


def backends():
    """All importable backend modules, for parity tests and benchmarks."""
    mods = [_pykernels]
    try:
        from . import _cykernels

        mods.append(_cykernels)
    except ImportError:
        pass
    return mods
