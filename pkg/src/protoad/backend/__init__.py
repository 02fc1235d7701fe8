"""Kernel backend selection.

The hot inner-loop kernels (layer norm, softmax, GELU, optimizer update)
exist twice: a Cython extension (`protoad.backend._core`) and a pure-numpy
fallback (`protoad.backend.reference`). The compiled core is picked at
import time when present; otherwise the fallback is used silently.

Set the environment variable ``PROTOAD_BACKEND=reference`` (or
``compiled``) to force a choice, or call :func:`set_backend` at runtime
(used by the benchmark and the parity tests). Both backends implement the
same arithmetic; results agree to rounding but are not bit-identical, so
reproducibility guarantees hold per backend.

The "compiled" backend is a measured mix: kernels dominated by large
vectorized transcendentals stay on numpy even when the extension is
present, because single-element libm calls lose to SIMD there.
"""

from __future__ import annotations

import os

from . import reference

KERNELS = (
    "layernorm_forward",
    "layernorm_backward",
    "softmax_forward",
    "softmax_backward",
    "gelu_forward",
    "gelu_backward",
    "adamw_update",
)

_impls = {"reference": reference}
try:
    from . import _core  # compiled extension, optional

    _impls["compiled"] = _core
except ImportError:
    _core = None

# Kernels where the fused C loops lose to numpy's SIMD transcendentals
# (scalar expf cannot compete with vectorized exp at float32; see
# benchmarks/bench_backends.py). The compiled backend keeps the numpy
# implementation for these.
_NUMPY_WINS = ("softmax_forward", "gelu_backward")

_active = "reference"


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_impls))


def active_backend() -> str:
    return _active


def set_backend(name: str) -> str:
    """Select the kernel implementation; returns the previous name."""
    global _active
    if name not in _impls:
        raise ValueError(
            f"backend {name!r} not available (have {available_backends()})"
        )
    impl = _impls[name]
    for fname in KERNELS:
        if name == "compiled" and fname in _NUMPY_WINS:
            globals()[fname] = getattr(reference, fname)
        else:
            globals()[fname] = getattr(impl, fname)
    prev, _active = _active, name
    return prev


_requested = os.environ.get("PROTOAD_BACKEND")
if _requested:
    set_backend(_requested)
else:
    set_backend("compiled" if "compiled" in _impls else "reference")
