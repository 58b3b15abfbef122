"""Runtime values flowing through programs, and finite distributions over them.

A value is one of:
  * ``str``       -- an answer token ('yes', 'red', 'True', ...)
  * ``int``       -- a numeric answer (counts, sums)
  * ``Detection`` -- a ranked tuple of grid cells found by LOC (possibly empty)
  * ``Region``    -- a rectangular sub-view of one input image

Probabilities inside a :class:`Categorical` are either plain floats or
differentiable scalars from :mod:`visprob.autodiff`; both expose arithmetic,
and differentiable ones carry a ``.value`` attribute.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable

Cell = tuple[int, int]  # (row, col)


@dataclass(frozen=True)
class Detection:
    """Cells returned by LOC for one query, ranked by score (best first)."""

    image: str
    cells: tuple[Cell, ...]

    def __len__(self) -> int:
        return len(self.cells)

    def primary(self) -> Cell | None:
        return self.cells[0] if self.cells else None


@dataclass(frozen=True)
class Region:
    """Inclusive cell rectangle inside the named input image."""

    image: str
    r0: int
    c0: int
    r1: int
    c1: int

    def cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.r0, self.r1 + 1)
                for c in range(self.c0, self.c1 + 1)]

    def contains(self, cell: Cell) -> bool:
        return self.r0 <= cell[0] <= self.r1 and self.c0 <= cell[1] <= self.c1

    def size(self) -> int:
        return (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1)


Value = Any  # str | int | Detection | Region


def token_of(value: Value) -> str:
    """Canonical string form of an answer value, used for label matching."""
    if isinstance(value, bool):  # never stored, but be safe
        return "True" if value else "False"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    raise TypeError(f"value {value!r} has no token form")


def _num(p) -> float:
    """Float view of a probability that may be a differentiable scalar."""
    return p.value if hasattr(p, "value") else float(p)


class Categorical:
    """Finite support plus a probability for each entry.

    Support entries are unique; probabilities sum to 1 within 1e-9 and may
    dip to -1e-12 from float cancellation.
    """

    __slots__ = ("support", "probs")

    def __init__(self, support: list[Value], probs: list, validate: bool = True):
        self.support = list(support)
        self.probs = list(probs)
        if validate:
            self.validate()

    def validate(self) -> None:
        if len(self.support) != len(self.probs):
            raise ValueError("support/probs length mismatch")
        if len(set(self.support)) != len(self.support):
            raise ValueError(f"duplicate support entries: {self.support!r}")
        total = 0.0
        for p in self.probs:
            v = _num(p)
            if v < -1e-12:
                raise ValueError(f"negative probability {v}")
            total += v
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {total}, not 1")

    def argmax(self) -> Value:
        """Most probable value; ties broken by support order."""
        best_i = 0
        best_p = _num(self.probs[0])
        for i in range(1, len(self.probs)):
            v = _num(self.probs[i])
            if v > best_p:
                best_p = v
                best_i = i
        return self.support[best_i]

    def prob_of(self, value: Value):
        for s, p in zip(self.support, self.probs):
            if s == value:
                return p
        return 0.0

    def as_float_dict(self) -> dict[Value, float]:
        return {s: _num(p) for s, p in zip(self.support, self.probs)}

    def max_abs_diff(self, other: "Categorical") -> float:
        """Largest per-value probability difference (union of supports)."""
        a = self.as_float_dict()
        b = other.as_float_dict()
        keys = set(a) | set(b)
        return max(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in keys)

    def __repr__(self) -> str:
        inner = ", ".join(f"{s!r}: {_num(p):.4g}" for s, p in zip(self.support, self.probs))
        return f"Categorical({{{inner}}})"


def point_mass(value: Value) -> Categorical:
    return Categorical([value], [1.0])


def from_dict(d: dict, validate: bool = True) -> Categorical:
    return Categorical(list(d.keys()), list(d.values()), validate=validate)


def union_support(parts: Iterable[list[Value]]) -> list[Value]:
    """Stable union: first-occurrence order across the given supports."""
    seen: dict = {}
    for sup in parts:
        for v in sup:
            if v not in seen:
                seen[v] = True
    return list(seen)
