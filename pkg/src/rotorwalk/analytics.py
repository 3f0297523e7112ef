"""Regimes and limit constants for rotor walks on regular and Galton-Watson trees.

Transient constants are computed from the two expectations that drive the
regeneration structure of the walk:

* ``e_trap``  - mean size of a trap tree hanging off the escape ray, a
  subcritical tree with generating function ``h(s) = f(qs)/q``, so
  ``e_trap = 1 / (1 - h'(1))``;
* ``e_right`` - mean number of trap trees per ray vertex,
  ``(q / (1 - q)) * (1 - f'(q))``.

The range constant is ``(1 + e_right*e_trap) / (1 + 2*e_right*e_trap)`` and
the speed is ``1 / (1 + 2*e_right*e_trap)``.  The closed forms printed in the
literature for the same quantities are evaluated alongside as diagnostics;
they do not agree with the tabulated values and are never used as results.
"""
from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Union

from .distributions import (
    GenFun,
    OffspringLaw,
    RotorLaw,
    RotorMatrix,
    conditioned_genfuns,
    deriv_eval,
    eval_genfun,
    genfun,
    good_child_law,
    gw_good_child_law,
)
from .errors import NonConvergence, NotPositiveRecurrent, NotTransient

NULL_TOL = 1e-12
FIXED_POINT_TOL = 1e-14
FIXED_POINT_MAX_ITER = 100_000
NEWTON_STEPS = 5

EnvLaw = Union[RotorLaw, tuple[OffspringLaw, RotorMatrix]]


class Regime(str, enum.Enum):
    POSITIVE_RECURRENT = "PositiveRecurrent"
    NULL_RECURRENT = "NullRecurrent"
    TRANSIENT = "Transient"

    @property
    def recurrent(self) -> bool:
        return self is not Regime.TRANSIENT


def classify(m: float, tol: float = NULL_TOL) -> Regime:
    if m < 0:
        raise ValueError(f"mean offspring must be non-negative, got {m!r}")
    if abs(m - 1.0) <= tol:
        return Regime.NULL_RECURRENT
    return Regime.POSITIVE_RECURRENT if m < 1.0 else Regime.TRANSIENT


def extinction_probability(f: GenFun, tol: float = NULL_TOL) -> float:
    """Smallest non-negative root of ``f(s) = s``.

    Fixed-point iteration from 0 increases monotonically to the smallest root,
    so it cannot overshoot to the trivial root at 1 the way a bare Newton
    iteration can.  A few guarded Newton steps polish the result.
    """
    c = f.coeffs
    if len(c) == 2 and c[1] == 1.0:
        # f(s) = s: a single infinite line of descent, never extinct
        return 0.0
    if f.mean() <= 1.0 + tol:
        return 1.0

    rc = c[::-1]

    def horner(x: float) -> float:
        acc = 0.0
        for cj in rc:
            acc = acc * x + cj
        return acc

    s = 0.0
    converged = False
    for _ in range(FIXED_POINT_MAX_ITER):
        nxt = horner(s)
        if abs(nxt - s) < FIXED_POINT_TOL:
            s = nxt
            converged = True
            break
        s = nxt

    fp = f.deriv()
    for _ in range(NEWTON_STEPS):
        resid = eval_genfun(f, s) - s
        if resid == 0.0:
            break
        slope = eval_genfun(fp, s) - 1.0
        if slope >= 0.0:
            break
        cand = s - resid / slope
        if not 0.0 <= cand < 1.0 or abs(eval_genfun(f, cand) - cand) >= abs(resid):
            break
        s = cand

    if abs(eval_genfun(f, s) - s) > 1e-13 and not converged:
        raise NonConvergence(f"fixed-point iteration did not settle (s={s!r})")
    return s


@dataclass(frozen=True)
class TransientIngredients:
    q: float
    f_prime_q: float
    h_prime_1: float
    e_trap: float
    e_right: float
    # the alternative trap-size expressions quoted alongside the exact ones
    h_prime_1_printed: float = math.nan
    e_trap_printed: float = math.nan


def transient_ingredients(f: GenFun) -> TransientIngredients:
    m = f.mean()
    if classify(m) is not Regime.TRANSIENT:
        raise NotTransient(f"good-child mean {m!r} <= 1: walk is recurrent")
    q = extinction_probability(f)
    fq = deriv_eval(f, q)
    _, h = conditioned_genfuns(f, q)
    h1 = h.mean()
    e_trap = 1.0 / (1.0 - h1)
    e_right = q / (1.0 - q) * (1.0 - fq)
    h1_printed = fq / q
    e_trap_printed = q / (q - fq) if q != fq else math.inf
    return TransientIngredients(q, fq, h1, e_trap, e_right, h1_printed, e_trap_printed)


@dataclass(frozen=True)
class Constants:
    alpha: float
    ell: float
    regime: Regime
    m: float
    mu: float
    ingredients: TransientIngredients | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def einstein_residual(self) -> float:
        return 2.0 * self.alpha - self.ell - 1.0

    def to_dict(self) -> dict:
        out = {
            "regime": self.regime.value,
            "m": self.m,
            "mu": self.mu,
            "alpha": self.alpha,
            "ell": self.ell,
            "einstein_residual": self.einstein_residual,
        }
        if self.ingredients is not None:
            ing = self.ingredients
            out.update(
                q=ing.q,
                f_prime_q=ing.f_prime_q,
                h_prime_1=ing.h_prime_1,
                e_trap=ing.e_trap,
                e_right=ing.e_right,
            )
        out["diagnostics"] = dict(self.diagnostics)
        return out


def _unpack(law: EnvLaw) -> tuple[OffspringLaw, float]:
    """Good-child law and mean tree degree ``mu`` of the environment."""
    if isinstance(law, RotorLaw):
        return good_child_law(law), float(law.d)
    off, Q = law
    return gw_good_child_law(off, Q), off.mean()


def printed_alpha(q: float, fq: float) -> float:
    return (q - fq * (q * q - q + 1)) / (q * q + q - fq * (2 * q * q - q + 1))


def printed_ell(q: float, fq: float) -> float:
    return (q - fq) * (1 - q) / (q + q * q - fq * (2 * q * q - q + 1))


def corollary_uniform_alpha(d: int, q: float) -> float:
    """Closed form quoted for the uniform law on the d-ary tree (diagnostic only)."""
    return q * (1 - d) * (1 - q ** (d + 1)) / ((d + 1) * (q - 1) ** 3) + q * q * (
        1 - q ** (d - 1)
    ) / (q - 1) ** 3


def gw_uniform_range_limit(mu: float) -> float:
    """``(mu - 1)/mu`` for uniform rotors on a Galton-Watson tree.

    Only valid on the recurrent side ``mu <= 2``; beyond that the transient
    formula applies and a warning is issued.
    """
    if mu > 2.0 + NULL_TOL:
        warnings.warn(
            f"(mu-1)/mu is a recurrent-regime limit; mu={mu} > 2 is transient",
            RuntimeWarning,
            stacklevel=2,
        )
    return (mu - 1.0) / mu


def _is_uniform_regular(law: EnvLaw) -> bool:
    return isinstance(law, RotorLaw) and max(law.r) - min(law.r) < 1e-15


def _is_uniform_q(law: EnvLaw) -> bool:
    if isinstance(law, RotorLaw):
        return False
    _, Q = law
    return all(max(row) - min(row) < 1e-15 for row in Q.rows.values())


def constants(law: EnvLaw, null_tol: float = NULL_TOL) -> Constants:
    """Range and speed constants with regime and diagnostics."""
    nu, mu = _unpack(law)
    f = genfun(nu)
    m = f.mean()
    regime = classify(m, null_tol)
    diag: dict = {}
    ing = None

    if regime is Regime.POSITIVE_RECURRENT:
        alpha = (mu - 1.0) / (2.0 * (mu - m))
        ell = 0.0
        lam = 1.0 + (mu - 1.0) / (1.0 - m)
        diag["leaf_process_mean"] = lam
        diag["alpha_from_leaf_mean"] = 0.5 * (1.0 - 1.0 / lam)
    elif regime is Regime.NULL_RECURRENT:
        alpha, ell = 0.5, 0.0
    else:
        ing = transient_ingredients(f)
        prod = ing.e_right * ing.e_trap
        alpha = (1.0 + prod) / (1.0 + 2.0 * prod)
        ell = 1.0 / (1.0 + 2.0 * prod)
        diag["alpha_printed"] = printed_alpha(ing.q, ing.f_prime_q)
        diag["ell_printed"] = printed_ell(ing.q, ing.f_prime_q)
        diag["alpha_printed_deviation"] = diag["alpha_printed"] - alpha
        diag["ell_printed_deviation"] = diag["ell_printed"] - ell
        diag["h_prime_1_printed"] = ing.h_prime_1_printed
        diag["e_trap_printed"] = ing.e_trap_printed
        if _is_uniform_regular(law):
            diag["alpha_corollary"] = corollary_uniform_alpha(law.d, ing.q)
            diag["alpha_corollary_deviation"] = diag["alpha_corollary"] - alpha

    if _is_uniform_q(law):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            diag["alpha_uniform_gw_formula"] = gw_uniform_range_limit(mu)
        if caught:
            diag["alpha_uniform_gw_formula_warning"] = str(caught[0].message)

    return Constants(alpha, ell, regime, m, mu, ing, diag)


def range_constant(law: EnvLaw, null_tol: float = NULL_TOL) -> Constants:
    return constants(law, null_tol)


def speed_constant(law: EnvLaw, null_tol: float = NULL_TOL) -> Constants:
    return constants(law, null_tol)


def leaf_process_mean(law: EnvLaw) -> float:
    """Mean offspring of the leaf-count process between returns to the sink.

    ``1 + (d-1)/(1-m)`` on the regular tree and ``(mu-m)/(1-m)`` on a
    Galton-Watson tree (these agree when ``mu = d``).
    """
    nu, mu = _unpack(law)
    m = nu.mean()
    if m >= 1.0:
        raise NotPositiveRecurrent(f"good-child mean {m!r} >= 1")
    return (mu - m) / (1.0 - m)


def alpha_from_leaf_mean(nu: float) -> float:
    return 0.5 * (1.0 - 1.0 / nu)
