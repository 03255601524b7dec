"""Lifted random-duality free energy at lifting level ``r``.

The free energy is assembled from three parts:

    psi = coupling - sphere + net

    coupling = 1/2 sum_{k=2..r} (p_{k-1} q_{k-1} - p_k q_k) c_k
    sphere   = gp - sum_k log(Theta_k / Theta_{k-1}) / (2 c_k) + q_r / (2 Theta_r)
    net      = g - (alpha / c_r) E log A_r

with ``p_1 = q_1 = 1``, ``Theta_1 = 2 gp`` and
``Theta_k = Theta_{k-1} - c_k (q_{k-1} - q_k)``. Here ``gp`` and ``g`` stand for
the sphere and net multipliers ``gamma_sq^(p)`` and ``gamma_sq``. The nested
means ``A_k`` are built from the closed-form innermost Gaussian integral
``f_zt`` (see ``fzt_kernel``); ``capacity`` is the ``alpha`` where ``psi``
vanishes at its stationary point.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from scipy.special import erfc

from . import activations as acts
from ._kernels import nested_log_mean
from .errors import DomainError
from .overlap import OverlapCurve, curve_for, effective_coeffs
from .quadrature import gauss_hermite

NESTED_ORDER = 80
MAX_LEVEL = 4


@dataclass(frozen=True)
class LiftParams:
    """Free-energy arguments at level ``r``.

    ``p``, ``q`` and ``c`` hold the entries ``k = 2..r`` (empty at ``r = 1``).
    """

    r: int
    p: Tuple[float, ...] = ()
    q: Tuple[float, ...] = ()
    c: Tuple[float, ...] = ()
    gamma_sq: float = 0.5
    gamma_sq_p: float = 0.5

    def __post_init__(self):
        n = self.r - 1
        if self.r < 1 or not (len(self.p) == len(self.q) == len(self.c) == n):
            raise DomainError(f"level {self.r} needs {n} entries in p, q and c")

    def with_(self, **kw):
        return replace(self, **kw)

    def theta(self):
        """Sphere recursion ``Theta_1 .. Theta_r``."""
        th = [2.0 * self.gamma_sq_p]
        qq = (1.0,) + tuple(self.q)
        for k in range(1, self.r):
            th.append(th[-1] - self.c[k - 1] * (qq[k - 1] - qq[k]))
        return th

    def check(self):
        """Raise ``DomainError`` outside the admissible region."""
        if not (self.gamma_sq > 0 and self.gamma_sq_p > 0):
            raise DomainError("multipliers must be positive")
        for name, v in (("p", self.p), ("q", self.q)):
            seq = (1.0,) + tuple(v) + (0.0,)
            if any(b > a for a, b in zip(seq[:-1], seq[1:])):
                raise DomainError(f"{name} must be nonincreasing inside [0, 1]: {v}")
        if any(ck < 0 for ck in self.c):
            raise DomainError("c must be nonnegative")
        if min(self.theta()) <= 0:
            raise DomainError("sphere recursion left its domain (Theta <= 0)")


@dataclass(frozen=True)
class FztInputs:
    h_eff: float
    B: float
    C: float
    gap: float


def z_infinity(act):
    """Limit of the normalized projection value, ``(m2 - m1^2) / (2 dm2)``."""
    ms = acts.moments(acts.get(act))
    if ms.dm2 == 0:
        raise DomainError("E f'(g)^2 vanishes")
    return ms.variance / (2.0 * ms.dm2)


def psi_level1(alpha, act):
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    return -1.0 + math.sqrt(alpha * z_infinity(act))


def fzt_kernel(inp):
    """``E_g exp(-B max(sqrt(gap) g + C, 0)^2)`` in closed form."""
    if inp.B < 0 or inp.gap < 0:
        raise DomainError("fzt_kernel needs B >= 0 and gap >= 0")
    a = 2.0 * inp.gap * inp.B + 1.0
    zd = math.exp(-inp.B * inp.C * inp.C / a) / (2.0 * math.sqrt(a)) * erfc(inp.h_eff / math.sqrt(2.0 * a))
    zu = 0.5 * erfc(-inp.h_eff / math.sqrt(2.0))
    return float(zd + zu)


def sphere_term(params):
    gp = params.gamma_sq_p
    if params.r == 1:
        return gp + 1.0 / (4.0 * gp)
    qq = (1.0,) + tuple(params.q)
    th_prev = 2.0 * gp
    total = gp
    for k in range(1, params.r):
        ck = params.c[k - 1]
        dq = qq[k - 1] - qq[k]
        th = th_prev - ck * dq
        if th <= 0:
            raise DomainError("sphere recursion left its domain (Theta <= 0)")
        if ck == 0.0:
            total += dq / (2.0 * th_prev)
        else:
            total -= math.log1p(-ck * dq / th_prev) / (2.0 * ck)
        th_prev = th
    return total + qq[-1] / (2.0 * th_prev)


def coupling_term(params):
    pp = (1.0,) + tuple(params.p)
    qq = (1.0,) + tuple(params.q)
    return 0.5 * math.fsum(
        (pp[k - 1] * qq[k - 1] - pp[k] * qq[k]) * params.c[k - 1] for k in range(1, params.r)
    )


def _curve(act_or_curve, order):
    if isinstance(act_or_curve, OverlapCurve):
        return act_or_curve
    return curve_for(act_or_curve, order)


def net_expectation(params, curve, order=NESTED_ORDER):
    """``E log A_r``, the nested Gaussian part of the net term (``r >= 2``)."""
    r = params.r
    if r > MAX_LEVEL:
        raise DomainError(f"nested net term implemented for r <= {MAX_LEVEL}")
    coeffs = effective_coeffs(curve, (1.0,) + tuple(params.p) + (0.0,)).bbar
    if coeffs[0] <= 0.0:
        raise DomainError("degenerate top coefficient (p2 at the top of the curve)")
    c = params.c
    B = c[0] / (4.0 * params.gamma_sq)
    kappa = [c[k] / c[k - 1] for k in range(1, r - 1)]
    grid = gauss_hermite(order)
    return nested_log_mean(np.array(coeffs), B, np.array(kappa), grid.nodes, grid.weights, order)


def net_term(params, curve, alpha, grid=None):
    order = NESTED_ORDER if grid is None else grid.order
    g = params.gamma_sq
    if params.r == 1 or (params.r == 2 and params.c[0] == 0.0):
        zinf = 0.5 * (curve.pbar_top - curve.pbar_bottom)
        return g + alpha * zinf / (4.0 * g)
    cr = params.c[-1]
    if cr <= 0.0:
        raise DomainError("c_r must be positive")
    return g - alpha / cr * net_expectation(params, curve, order)


def psi(params, alpha, act_or_curve, grid=None):
    """Free energy at ``params``; zero at the stationary point marks capacity."""
    order = NESTED_ORDER if grid is None else grid.order
    curve = _curve(act_or_curve, order)
    if params.r == 1:
        return -sphere_term(params) + net_term(params, curve, alpha, grid)
    return coupling_term(params) - sphere_term(params) + net_term(params, curve, alpha, grid)
