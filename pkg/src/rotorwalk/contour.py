"""Contour functions of finite subtrees of the d-ary tree.

A point ``x`` in [0, 1] is read as its base-``d`` digit sequence, i.e. a ray
from the root; letter ``k`` selects the child in neighbour slot ``d - k``.
The contour of a finite subtree ``A`` at ``x`` is the first level ``n >= 1``
at which the ray leaves ``A``.  For recurrent rotor walks, ``g_k(x)`` is the
expected contour of the range after ``k`` complete excursions.

Points are restricted to eventually-constant expansions (tail digit ``0`` or
``d - 1``).  A grid cell ``[j/d^L, (j+1)/d^L)`` is represented by its left
endpoint, i.e. its digit word followed by zeros.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from .distributions import RotorLaw, good_child_law
from .errors import GridTooLarge, InvalidLaw

DEFAULT_GRID_CAP = 1 << 22
INF = math.inf


@dataclass(frozen=True)
class CumulativeLaw:
    """``p[i] = r_0 + ... + r_{i-1}`` and ``q[i] = r_i + ... + r_d``."""

    p: tuple[float, ...]
    q: tuple[float, ...]

    @classmethod
    def from_rotor_law(cls, law: RotorLaw) -> "CumulativeLaw":
        r = law.r
        d = law.d
        p = tuple(math.fsum(r[:i]) for i in range(d + 1))
        q = tuple(math.fsum(r[i:]) for i in range(d + 1))
        return cls(p, q)


@dataclass(frozen=True)
class DadicPoint:
    d: int
    digits: tuple[int, ...] = ()
    tail: int = 0

    def __post_init__(self):
        object.__setattr__(self, "digits", tuple(int(x) for x in self.digits))
        if self.tail not in (0, self.d - 1):
            raise ValueError(f"tail digit must be 0 or {self.d - 1}, got {self.tail}")
        if any(not 0 <= x < self.d for x in self.digits):
            raise ValueError(f"digits must lie in 0..{self.d - 1}")

    @classmethod
    def from_cell(cls, j: int, L: int, d: int) -> "DadicPoint":
        """Left endpoint of cell ``j`` of the level-``L`` grid."""
        digits = []
        for _ in range(L):
            j, rem = divmod(j, d)
            digits.append(rem)
        return cls(d, tuple(reversed(digits)), 0)

    def digit(self, i: int) -> int:
        """The ``i``-th digit, counted from 1."""
        return self.digits[i - 1] if i <= len(self.digits) else self.tail

    def shift(self, l: int) -> "DadicPoint":
        """Drop the first ``l`` digits (the fractional part of ``d**l * x``)."""
        return DadicPoint(self.d, self.digits[l:], self.tail)

    def prepend(self, i: int) -> "DadicPoint":
        """The point ``(x + i)/d``."""
        return DadicPoint(self.d, (i,) + self.digits, self.tail)

    @property
    def value(self) -> float:
        x = math.fsum(dg * self.d ** -(i + 1) for i, dg in enumerate(self.digits))
        if self.tail:
            x += self.d ** -len(self.digits)
        return x


@dataclass
class ContourGrid:
    d: int
    L: int
    values: np.ndarray  # float; +inf marks a ray that never leaves

    @property
    def x_left(self) -> np.ndarray:
        return np.arange(self.values.shape[-1]) / float(self.d**self.L)


def _check_law(law: RotorLaw) -> CumulativeLaw:
    if not isinstance(law, RotorLaw):
        raise InvalidLaw("contours are defined for rotor walks on regular trees")
    return CumulativeLaw.from_rotor_law(law)


def is_formal(law: RotorLaw) -> bool:
    """True when the walk is transient and excursions need not complete."""
    return good_child_law(law).mean() > 1.0 + 1e-12


def grid_words(d: int, L: int) -> np.ndarray:
    cells = np.arange(d**L, dtype=np.int64)
    words = np.empty((cells.size, max(L, 1)), dtype=np.int64)
    for pos in range(L - 1, -1, -1):
        words[:, pos] = cells % d
        cells //= d
    return words


def contour_of_range(store, L: int, d: Optional[int] = None, at_time: Optional[int] = None,
                     tail_cap: int = 1 << 30) -> ContourGrid:
    """Contour of the visited set held in ``store`` on the level-``L`` grid.

    ``store`` is a ``NodeStore`` or an ``Environment``.  With ``at_time`` the
    range is taken as it stood after that many steps.
    """
    if hasattr(store, "store"):
        store = store.store
    d = store.max_children if d is None else d
    words = grid_words(d, L)
    t = np.iinfo(np.int64).max if at_time is None else int(at_time)
    vals = K.contour_descend(store.children, store.nchild, store.first_visit, d, words, L, tail_cap, t)
    if np.any(vals == -2):
        raise RuntimeError("contour ray reached a recycled vertex")
    out = vals.astype(float)
    out[vals == -1] = INF
    return ContourGrid(d, L, out)


def first_excursion_depth_law(x: DadicPoint, law: RotorLaw, m_max: int) -> tuple[np.ndarray, float]:
    """``P[f_{R_1}(x) = m]`` for ``m = 1..m_max`` and the leftover tail mass.

    The first excursion reaches level ``m`` but not ``m + 1`` along the ray
    when the first ``m - 1`` ray vertices are good children and the ``m``-th is
    not.  Index ``m`` of the returned array holds the probability (index 0 is 0).
    """
    cum = _check_law(law)
    d = law.d
    out = np.zeros(m_max + 1)
    run = 1.0
    for m in range(1, m_max + 1):
        xm = x.digit(m)
        out[m] = run * cum.q[d - xm]
        run *= cum.p[d - xm]
    tail = 1.0 - math.fsum(out)
    return out, tail


def excursion_depth_law_k(x: DadicPoint, law: RotorLaw, k: int, m_max: int) -> tuple[np.ndarray, float]:
    """Law of the contour at ``x`` after ``k`` excursions, truncated at ``m_max``.

    Each excursion pushes the ray at least one level further; the depth added
    by the later excursions is the ``(k-1)``-excursion law at the shifted point.
    Results are memoised per suffix of the digit word, since every shift of an
    eventually-constant point is one of ``len(digits) + 1`` suffixes.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_law(law)
    nd = len(x.digits)
    first = {}
    memo: dict[tuple[int, int], np.ndarray] = {}

    def base(s: int) -> np.ndarray:
        if s not in first:
            first[s] = first_excursion_depth_law(x.shift(s), law, m_max)[0]
        return first[s]

    def law_k(s: int, kk: int) -> np.ndarray:
        if kk == 1:
            return base(s)
        key = (s, kk)
        if key in memo:
            return memo[key]
        one = base(s)
        out = np.zeros(m_max + 1)
        for l in range(1, m_max):
            if one[l] == 0.0:
                continue
            rest = law_k(min(s + l, nd), kk - 1)
            out[l + 1 :] += one[l] * rest[1 : m_max + 1 - l]
        memo[key] = out
        return out

    probs = law_k(0, k)
    return probs, 1.0 - math.fsum(probs)


def _mul(a: float, g: float) -> float:
    # a zero-probability branch contributes nothing even if its mean diverges
    return 0.0 if a == 0.0 else a * g


def _tail_vector(law: RotorLaw, tail: int, k: int) -> np.ndarray:
    mass = law.r[law.d] if tail == 0 else 1.0 - law.r[0]
    j = np.arange(k + 1, dtype=float)
    if mass <= 0.0:
        out = np.full(k + 1, INF)
        out[0] = 0.0
        return out
    return j / mass


def _unwind(vec: np.ndarray, p: float) -> np.ndarray:
    out = np.empty_like(vec)
    out[0] = 0.0
    for j in range(1, vec.size):
        out[j] = 1.0 + _mul(1.0 - p, vec[j - 1]) + _mul(p, vec[j])
    return out


def expected_contour_vector(x: DadicPoint, law: RotorLaw, k: int) -> np.ndarray:
    """``(g_0(x), ..., g_k(x))`` via the self-similar recursion."""
    if k < 0:
        raise ValueError("k must be >= 0")
    cum = _check_law(law)
    vec = _tail_vector(law, x.tail, k)
    for i in reversed(x.digits):
        vec = _unwind(vec, cum.p[law.d - i])
    return vec


def expected_contour(x: DadicPoint, law: RotorLaw, k: int) -> float:
    return float(expected_contour_vector(x, law, k)[k])


def expected_contour_grid(law: RotorLaw, k: int, L: int, cap: int = DEFAULT_GRID_CAP) -> np.ndarray:
    """``g_0..g_k`` on every cell of the level-``L`` grid, shape ``(k+1, d**L)``.

    Built level by level: the cells of level ``t`` starting with digit ``i``
    are the level ``t-1`` cells mapped through ``x -> (x+i)/d``.
    """
    cum = _check_law(law)
    d = law.d
    if d**L > cap:
        raise GridTooLarge(f"{d}**{L} cells exceeds the cap of {cap}")
    cur = _tail_vector(law, 0, k)[:, None]
    for _ in range(L):
        blocks = []
        for i in range(d):
            p = cum.p[d - i]
            nxt = np.empty_like(cur)
            nxt[0] = 0.0
            lo = cur[:-1]
            with np.errstate(invalid="ignore"):
                a = np.where(1.0 - p == 0.0, 0.0, (1.0 - p) * lo)
                b = np.where(p == 0.0, 0.0, p * cur[1:])
            nxt[1:] = 1.0 + a + b
            blocks.append(nxt)
        cur = np.concatenate(blocks, axis=1)
    return cur


def self_similar_residual(law: RotorLaw, k: int, L: int) -> float:
    """Largest violation of the self-similar equations on the level-``L`` grid.

    Left-hand sides come from the grid builder, right-hand sides from
    point-wise evaluation at the level ``L-1`` cells.
    """
    cum = _check_law(law)
    d = law.d
    grid = expected_contour_grid(law, k, L)
    worst = 0.0
    for j in range(d ** (L - 1)):
        x = DadicPoint.from_cell(j, L - 1, d)
        gx = expected_contour_vector(x, law, k)
        for i in range(d):
            p = cum.p[d - i]
            cell = i * d ** (L - 1) + j
            for kk in range(1, k + 1):
                rhs = 1.0 + _mul(1.0 - p, gx[kk - 1]) + _mul(p, gx[kk])
                lhs = grid[kk, cell]
                if math.isinf(lhs) or math.isinf(rhs):
                    if lhs != rhs:
                        return INF
                    continue
                worst = max(worst, abs(lhs - rhs))
    return worst


@dataclass
class EmpiricalContour:
    mean: np.ndarray
    se: np.ndarray
    replicas: int
    truncated: int
    peak_live_nodes: int


def contour_replica(
    law: RotorLaw,
    k: int,
    L: int,
    seed: int,
    stream: int,
    step_cap: int = 1 << 40,
    node_budget: int = 50_000_000,
) -> tuple[Optional[np.ndarray], int]:
    """Range contour of one walk stopped at its ``k``-th return.

    Returns ``(values, peak live vertices)``; values are None when the step
    cap or the node budget was hit first.
    For ``k = 1`` vertices off the grid rays are recycled as soon as their
    subtree is finished, so heavy-tailed excursions cost time but not memory.
    """
    from .engine import Environment, RandomSource, Regular, run_until_returns
    from .errors import MemoryBudgetExceeded

    env = Environment(
        Regular(law), RandomSource(seed, stream), node_budget=node_budget,
        initial_capacity=256, prune_depth=L if k == 1 else None,
    )
    try:
        st = run_until_returns(env, k, step_cap)
    except MemoryBudgetExceeded:
        return None, int(env.state[K.S_PEAK_LIVE])
    peak = st.extra["peak_live_nodes"]
    if st.truncated:
        return None, peak
    return contour_of_range(env, L).values, peak


def empirical_mean_contour(
    law: RotorLaw,
    k: int,
    L: int,
    replicas: int,
    seed: int,
    step_cap: int = 1 << 40,
    node_budget: int = 50_000_000,
    threads: Optional[int] = 1,
) -> EmpiricalContour:
    """Monte Carlo mean of the range contour after ``k`` excursions.

    Replica ``i`` uses stream ``i`` of ``seed``.  Replicas that hit
    ``step_cap`` or the node budget are counted and excluded.
    """
    from .parallel import map_ordered

    _check_law(law)
    results = map_ordered(
        lambda i: contour_replica(law, k, L, seed, i, step_cap, node_budget),
        range(replicas), threads,
    )
    vals = [v for v, _ in results if v is not None]
    truncated = replicas - len(vals)
    peak = max(p for _, p in results)
    if not vals:
        nan = np.full(grid_words(law.d, L).shape[0], np.nan)
        return EmpiricalContour(nan, nan.copy(), 0, truncated, peak)
    arr = np.asarray(vals)
    n = arr.shape[0]
    mean = arr.mean(axis=0)
    se = arr.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full_like(mean, np.nan)
    return EmpiricalContour(mean, se, n, truncated, peak)
