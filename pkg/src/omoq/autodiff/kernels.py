"""Backend selection for the recurrent hot loops.

The compiled extension is used when it imports; ``OMOQ_PURE_PYTHON=1``
forces the numpy fallback. :func:`use_backend` switches at runtime.
"""

import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["cython"] = _compiled

BACKEND = ""
gru_forward = None
gru_backward = None


def use_backend(name: str) -> None:
    global BACKEND, gru_forward, gru_backward
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    impl = BACKENDS[name]
    BACKEND = name
    gru_forward = impl.gru_forward
    gru_backward = impl.gru_backward


def available() -> list[str]:
    return sorted(BACKENDS)


if os.environ.get("OMOQ_PURE_PYTHON", "") not in ("", "0") or _compiled is None:
    use_backend("python")
else:
    use_backend("cython")
