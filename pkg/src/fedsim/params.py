"""Flat parameter vectors with named segment layouts.

A model's weights live in one contiguous float64 array; the layout maps
segment names (e.g. ``"W1"``, ``"head.b"``) to shaped views into it.
The global model, client models, and client deltas all share one layout,
which is what makes aggregation a plain vector operation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from math import prod

import numpy as np


class ParameterError(ValueError):
    """Raised for layout mismatches and malformed parameter values."""


class NonFiniteParameterError(ParameterError):
    """Raised when an operation would produce NaN or Inf parameters."""


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return prod(self.shape)


@dataclass(frozen=True)
class Layout:
    """Ordered (name, shape) segments covering a flat vector."""

    segments: tuple[Segment, ...]
    _offsets: dict[str, tuple[int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for seg in self.segments:
            if seg.name in offsets:
                raise ParameterError(f"duplicate segment name {seg.name!r}")
            offsets[seg.name] = (pos, pos + seg.size)
            pos += seg.size
        object.__setattr__(self, "_offsets", offsets)

    @classmethod
    def of(cls, *segments: tuple[str, tuple[int, ...]]) -> "Layout":
        return cls(tuple(Segment(name, tuple(shape)) for name, shape in segments))

    @property
    def size(self) -> int:
        return sum(seg.size for seg in self.segments)

    def span(self, name: str) -> tuple[int, int]:
        try:
            return self._offsets[name]
        except KeyError:
            raise ParameterError(f"unknown segment {name!r}") from None

    def names(self) -> tuple[str, ...]:
        return tuple(seg.name for seg in self.segments)


@dataclass(frozen=True)
class ParameterVector:
    """Immutable float64 vector plus the layout describing it."""

    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ParameterError(f"parameter values must be 1-D, got shape {values.shape}")
        if values.size != self.layout.size:
            raise ParameterError(
                f"layout describes {self.layout.size} values, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise NonFiniteParameterError(
                f"non-finite parameter at flat index {bad} ({self._segment_of(bad)})"
            )
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def _segment_of(self, index: int) -> str:
        for seg in self.layout.segments:
            lo, hi = self.layout.span(seg.name)
            if lo <= index < hi:
                return f"segment {seg.name!r} offset {index - lo}"
        return "out of layout"

    def segment(self, name: str) -> np.ndarray:
        """Read-only shaped view of one segment."""
        lo, hi = self.layout.span(name)
        seg = next(s for s in self.layout.segments if s.name == name)
        return self.values[lo:hi].reshape(seg.shape)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout)

    def mutable_values(self) -> np.ndarray:
        return self.values.copy()

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for seg in self.layout.segments:
            h.update(f"{seg.name}:{seg.shape};".encode())
        h.update(self.values.tobytes())
        return h.hexdigest()

    def __len__(self) -> int:
        return self.values.size

    def allequal(self, other: "ParameterVector") -> bool:
        """Bitwise equality of values under the same layout."""
        return (
            self.layout == other.layout
            and self.values.tobytes() == other.values.tobytes()
        )
