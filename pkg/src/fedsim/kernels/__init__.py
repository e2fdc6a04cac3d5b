"""Kernel backend selection: compiled extension with NumPy fallback.

The compiled backend is used when the extension built; otherwise the
NumPy reference backend is selected. `FEDSIM_KERNELS=reference|native`
pins a backend at import time, and `set_backend` switches at runtime
(tests and the benchmark use it). Backends agree to roundoff; every run
is deterministic within whichever backend is active.
"""

from __future__ import annotations

import os

from . import reference

try:
    from . import _native as native
except ImportError:
    native = None

_BACKENDS = {"reference": reference}
if native is not None:
    _BACKENDS["native"] = native

_requested = os.environ.get("FEDSIM_KERNELS")
if _requested is not None and _requested not in _BACKENDS:
    raise ImportError(
        f"FEDSIM_KERNELS={_requested!r} is not available; "
        f"choose from {sorted(_BACKENDS)}"
    )

_active = _BACKENDS[_requested or ("native" if native is not None else "reference")]


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def active_backend() -> str:
    return _active.NAME


def set_backend(name: str) -> None:
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}"
        ) from None


def get(name: str | None = None):
    """Return a backend module (the active one by default)."""
    if name is None:
        return _active
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {sorted(_BACKENDS)}"
        )
    return _BACKENDS[name]


def logistic_loss_grad(W, b, X, y):
    return _active.logistic_loss_grad(W, b, X, y)


def mlp_hidden(W1, b1, X):
    return _active.mlp_hidden(W1, b1, X)


def mlp_loss_grad(W1, b1, W2, b2, X, y):
    return _active.mlp_loss_grad(W1, b1, W2, b2, X, y)
