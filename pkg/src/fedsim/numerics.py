"""Error-free float64 transforms used by the exact aggregation path.

A client update travels as ``delta = fl(w_new - w_prev)`` plus the
round-off of that subtraction. Keeping the round-off makes the pair an
exact double-double representation of ``w_new - w_prev``, so the server
can reproduce ``w_new`` bit-for-bit from ``(w_prev, delta, residual)``.
A single rounded float64 delta cannot do this: once local training runs
more than one step, a few percent of coordinates have no representable
delta that adds back to the trained value.

All functions are vectorized over ndarrays and assume round-to-nearest
IEEE 754 double precision (the only mode NumPy runs in).
"""

from __future__ import annotations

import numpy as np

_SPLITTER = 134217729.0  # 2**27 + 1, Dekker's constant for float64


def two_sum(a, b):
    """Return (s, e) with s = fl(a+b) and s + e == a + b exactly."""
    s = a + b
    bb = s - a
    e = (a - (s - bb)) + (b - bb)
    return s, e


def two_diff(a, b):
    """Return (d, e) with d = fl(a-b) and d + e == a - b exactly."""
    return two_sum(a, -b)


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def two_prod(a, b):
    """Return (p, e) with p = fl(a*b) and p + e == a * b exactly."""
    p = a * b
    a_hi, a_lo = _split(a)
    b_hi, b_lo = _split(b)
    e = ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo
    return p, e


def dd_add(x_hi, x_lo, y_hi, y_lo):
    """Add two double-double values, renormalized to (hi, lo)."""
    s, e = two_sum(x_hi, y_hi)
    e = e + (x_lo + y_lo)
    hi, lo = two_sum(s, e)
    return hi, lo


def dd_scale(hi, lo, factor):
    """Multiply a double-double value by a float64 scalar."""
    p, e = two_prod(hi, np.float64(factor))
    return p, e + lo * factor


def dd_round(w, hi, lo):
    """Round w + (hi, lo) to float64, with one final rounding."""
    t_hi, t_lo = two_sum(w, hi)
    return t_hi + (t_lo + lo)
