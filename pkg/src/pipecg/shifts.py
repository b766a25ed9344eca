"""Shift schedules for the auxiliary basis polynomial prod_i (t - sigma_i)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ShiftSchedule:
    shifts: tuple[float, ...]
    basis_kind: str = "user"

    def __post_init__(self):
        object.__setattr__(self, "shifts", tuple(float(s) for s in self.shifts))
        if not all(math.isfinite(s) for s in self.shifts):
            raise ValueError("shifts must be finite")
        if self.basis_kind not in ("chebyshev", "monomial", "user"):
            raise ValueError(f"unknown basis kind {self.basis_kind!r}")

    def __len__(self):
        return len(self.shifts)

    def __iter__(self):
        return iter(self.shifts)

    def __getitem__(self, i):
        return self.shifts[i]

    def as_array(self) -> np.ndarray:
        return np.array(self.shifts, dtype=np.float64)


SHIFT_ORDERS = ("natural", "leja")


def chebyshev_shifts(l: int, lam_min: float, lam_max: float, order: str = "natural") -> ShiftSchedule:
    """Roots of the degree-l Chebyshev polynomial mapped to [lam_min, lam_max].

    ``order="natural"`` keeps the closed-form order i = 0..l-1 (descending);
    ``order="leja"`` applies :func:`leja_order`. The set of shifts is the same,
    but the partial products P_k, k < l, that build the first l basis vectors
    differ, which matters a lot for deep pipelines (l >= 10).
    """
    if l < 1:
        raise ValueError("pipeline depth must be >= 1")
    if not lam_min < lam_max:
        raise ValueError(f"empty spectral interval [{lam_min}, {lam_max}]")
    if order not in SHIFT_ORDERS:
        raise ValueError(f"shift order must be one of {SHIFT_ORDERS}")
    mid = (lam_max + lam_min) / 2
    half = (lam_max - lam_min) / 2
    roots = [mid + half * math.cos((2 * i + 1) * math.pi / (2 * l)) for i in range(l)]
    if order == "leja":
        roots = leja_order(roots)
    return ShiftSchedule(roots, "chebyshev")


def leja_order(points) -> list[float]:
    """Greedy Leja ordering: start at the point of largest modulus, then
    repeatedly take the point maximising the product of distances to the
    points already chosen. Ties go to the lowest original index."""
    rest = [float(p) for p in points]
    if not rest:
        return []
    first = max(range(len(rest)), key=lambda k: (abs(rest[k]), -k))
    out = [rest.pop(first)]
    while rest:
        # log-distances avoid underflow for long lists
        score = [sum(math.log(abs(p - q)) if p != q else -math.inf for q in out) for p in rest]
        k = max(range(len(rest)), key=lambda m: (score[m], -m))
        out.append(rest.pop(k))
    return out


def monomial_shifts(l: int) -> ShiftSchedule:
    if l < 1:
        raise ValueError("pipeline depth must be >= 1")
    return ShiftSchedule([0.0] * l, "monomial")
