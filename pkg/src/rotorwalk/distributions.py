"""Rotor laws, offspring laws, rotor matrices and their generating functions.

A rotor law on the regular tree with forward degree ``d`` is a probability
vector ``r[0..d]`` where ``r[j]`` is the chance that a fresh rotor points at
neighbour ``j`` (0 is the parent).  A child ``j`` is *good* when the initial
rotor is strictly smaller than ``j``, so a vertex has ``d - rho`` good children.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import DegenerateConditioning, InvalidLaw, MissingRow

SUM_TOL = 1e-12


def _check_probs(values: Sequence[float], what: str) -> None:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidLaw(f"{what}: expected a non-empty probability vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidLaw(f"{what}: probabilities must be finite and non-negative")
    if abs(math.fsum(arr) - 1.0) > SUM_TOL:
        raise InvalidLaw(f"{what}: probabilities sum to {math.fsum(arr)!r}, not 1")


@dataclass(frozen=True)
class RotorLaw:
    """Law of i.i.d. rotors on the regular tree with ``d`` children per vertex."""

    d: int
    r: tuple[float, ...]

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise InvalidLaw(f"forward degree must be an integer >= 2, got {self.d!r}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "r", tuple(float(x) for x in self.r))
        if len(self.r) != self.d + 1:
            raise InvalidLaw(f"rotor law for d={self.d} needs {self.d + 1} entries, got {len(self.r)}")
        _check_probs(self.r, "rotor law")

    @classmethod
    def uniform(cls, d: int) -> "RotorLaw":
        return cls(d, tuple(Fraction(1, d + 1) for _ in range(d + 1)))

    def mean(self) -> float:
        return math.fsum(j * rj for j, rj in enumerate(self.r))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.r, dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "rotor", "d": self.d, "r": list(self.r)}


@dataclass(frozen=True)
class OffspringLaw:
    """Finitely supported offspring law stored sparsely as ``{k: p_k}``."""

    p: Mapping[int, float]

    def __post_init__(self):
        items = {}
        for k, v in dict(self.p).items():
            if int(k) != k or k < 0:
                raise InvalidLaw(f"offspring counts must be non-negative integers, got {k!r}")
            if float(v) != 0.0:
                items[int(k)] = float(v)
        if not items:
            raise InvalidLaw("offspring law has no mass")
        _check_probs(list(items.values()), "offspring law")
        object.__setattr__(self, "p", dict(sorted(items.items())))

    @classmethod
    def from_dense(cls, probs: Sequence[float]) -> "OffspringLaw":
        return cls({k: v for k, v in enumerate(probs)})

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(self.p)

    @property
    def max_k(self) -> int:
        return max(self.p)

    def prob(self, k: int) -> float:
        return self.p.get(k, 0.0)

    def mean(self) -> float:
        return math.fsum(k * v for k, v in self.p.items())

    def dense(self) -> np.ndarray:
        out = np.zeros(self.max_k + 1)
        for k, v in self.p.items():
            out[k] = v
        return out

    def to_dict(self) -> dict:
        return {"kind": "offspring", "p": {str(k): v for k, v in self.p.items()}}


@dataclass(frozen=True)
class RotorMatrix:
    """Rows ``Q_k = (q_{k,0}, ..., q_{k,k})`` keyed by child count ``k``.

    ``q_{k,l}`` is the probability that a vertex with ``k`` children has ``l``
    good children, i.e. that its initial rotor equals ``k - l``.
    """

    rows: Mapping[int, tuple[float, ...]]

    def __post_init__(self):
        rows = {}
        for k, row in dict(self.rows).items():
            k = int(k)
            row = tuple(float(x) for x in row)
            if len(row) != k + 1:
                raise InvalidLaw(f"row Q_{k} must have {k + 1} entries, got {len(row)}")
            _check_probs(row, f"row Q_{k}")
            rows[k] = row
        object.__setattr__(self, "rows", dict(sorted(rows.items())))

    @classmethod
    def uniform(cls, ks) -> "RotorMatrix":
        return cls({k: tuple(Fraction(1, k + 1) for _ in range(k + 1)) for k in ks})

    def row(self, k: int) -> tuple[float, ...]:
        try:
            return self.rows[k]
        except KeyError:
            raise MissingRow(f"rotor matrix has no row for k={k}") from None

    def check_covers(self, off: OffspringLaw) -> None:
        missing = [k for k in off.support if k not in self.rows]
        if missing:
            raise MissingRow(f"rotor matrix lacks rows for offspring counts {missing}")

    def to_dict(self) -> dict:
        return {"kind": "qmatrix", "rows": {str(k): list(v) for k, v in self.rows.items()}}


@dataclass(frozen=True)
class GenFun:
    """Polynomial generating function ``f(s) = sum_j c_j s**j``."""

    coeffs: tuple[float, ...]
    check: bool = field(default=True, compare=False, repr=False)

    def __post_init__(self):
        c = tuple(float(x) for x in self.coeffs)
        while len(c) > 1 and c[-1] == 0.0:
            c = c[:-1]
        object.__setattr__(self, "coeffs", c)
        if self.check:
            _check_probs(c, "generating function coefficients")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, s):
        return eval_genfun(self, s)

    def deriv(self) -> "GenFun":
        c = self.coeffs
        if len(c) == 1:
            return GenFun((0.0,), check=False)
        return GenFun(tuple(j * c[j] for j in range(1, len(c))), check=False)

    def mean(self) -> float:
        return math.fsum(j * cj for j, cj in enumerate(self.coeffs))


Law = Union[RotorLaw, OffspringLaw]


def good_child_law(law: RotorLaw) -> OffspringLaw:
    """Law of the number of good children: ``P[xi = j] = r[d - j]``."""
    d = law.d
    return OffspringLaw({j: law.r[d - j] for j in range(d + 1)})


def gw_good_child_law(off: OffspringLaw, Q: RotorMatrix) -> OffspringLaw:
    """Good-child law ``nu_l = sum_{k >= l} p_k q_{k,l}`` on a Galton-Watson tree."""
    Q.check_covers(off)
    nu: dict[int, list[float]] = {}
    for k, pk in off.p.items():
        for l, qkl in enumerate(Q.row(k)):
            nu.setdefault(l, []).append(pk * qkl)
    return OffspringLaw({l: math.fsum(parts) for l, parts in nu.items()})


def mean(law: Law) -> float:
    return law.mean()


def genfun(law: OffspringLaw) -> GenFun:
    return GenFun(tuple(law.dense()))


def eval_genfun(f: GenFun, s):
    """Horner evaluation; accepts scalars or arrays."""
    s = np.asarray(s, dtype=float)
    acc = np.zeros_like(s)
    for c in reversed(f.coeffs):
        acc = acc * s + c
    return float(acc) if acc.ndim == 0 else acc


def deriv_eval(f: GenFun, s):
    return eval_genfun(f.deriv(), s)


def conditioned_genfuns(f: GenFun, q: float) -> tuple[GenFun, GenFun]:
    """Backbone and trap generating functions for extinction probability ``q``.

    ``g(s) = (f((1-q)s + q) - q) / (1-q)`` and ``h(s) = f(qs) / q``.  Both are
    returned as exact polynomials so their derivatives are available without
    differencing.
    """
    if not 0.0 < q < 1.0:
        raise DegenerateConditioning(f"conditioning needs 0 < q < 1, got {q!r}")
    c = np.asarray(f.coeffs)
    n = len(c)
    h = c * q ** (np.arange(n) - 1.0)
    # expand f(a*s + b) by binomial sums, a = 1-q, b = q
    a, b = 1.0 - q, q
    comp = np.zeros(n)
    for j in range(n):
        for i in range(j + 1):
            comp[i] += c[j] * math.comb(j, i) * a**i * b ** (j - i)
    g = comp.copy()
    g[0] -= q
    g /= 1.0 - q
    if abs(g[0]) < 1e-12:
        g[0] = 0.0
    return GenFun(tuple(g), check=False), GenFun(tuple(h), check=False)
