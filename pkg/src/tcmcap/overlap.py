"""Normalized overlap curve and the effective field coefficients.

For correlation ``p`` between two standard normal inputs the curve is

    pbar(p) = E_h[(E_g f(sqrt(1 - p) g + sqrt(p) h))^2] / E f'(g)^2,

which runs from ``m1^2 / dm2`` at ``p = 0`` to ``m2 / dm2`` at ``p = 1``.
"""

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import erf, erfc

from . import activations as acts
from .errors import DomainError
from .quadrature import gauss_hermite, piecewise_grid, split_rule, fsum_rows

NESTED_ORDER = 80
LATTICE_SIZE = 2001

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_p(p):
    if not (0.0 <= p <= 1.0):
        raise DomainError(f"overlap p must lie in [0, 1], got {p}")


def pbar_relu_closed(p, order=NESTED_ORDER):
    """ReLU curve with the inner Gaussian mean done analytically.

    The outer integral is split at ``h = 0`` where the inner mean bends
    sharply as ``p -> 1``.
    """
    p = float(p)
    _check_p(p)
    grid = piecewise_grid((0.0,), order)
    h = grid.nodes
    s = math.sqrt(1.0 - p)
    mu = math.sqrt(p) * h
    if s == 0.0:
        mean = np.maximum(mu, 0.0)
    else:
        t = mu / s
        mean = s * _INV_SQRT_2PI * np.exp(-0.5 * t * t) + mu * 0.5 * erfc(-t / math.sqrt(2.0))
    return 2.0 * math.fsum(grid.weights * mean * mean)


def pbar_erf_closed(p):
    """Closed-form erf curve via the arcsine identity."""
    p = float(p)
    _check_p(p)
    c2 = p / (1.0 + 2.0 * (1.0 - p))
    ms = acts.ERF_SPEC.closed_form_moments
    return (2.0 / math.pi) * math.asin(2.0 * c2 / (1.0 + 2.0 * c2)) / ms.dm2


def pbar_quadratic_closed(p):
    p = float(p)
    _check_p(p)
    return 0.25 * (1.0 + 2.0 * p * p)


def _inner_means(act, p, h, order):
    """``E_g f(sqrt(1-p) g + sqrt(p) h)`` for every outer node ``h``."""
    s, r = math.sqrt(1.0 - p), math.sqrt(p)
    if s == 0.0:
        return act.value(r * h)
    if not act.kinks:
        g = gauss_hermite(order)
        vals = act.value(s * g.nodes[None, :] + r * h[:, None])
        return fsum_rows(vals, g.weights)
    if len(act.kinks) == 1:
        nodes, wts = split_rule((act.kinks[0] - r * h) / s, order)
        return fsum_rows(act.value(s * nodes + r * h[:, None]), wts)
    out = np.empty_like(h)
    for i, hi in enumerate(h):
        g = piecewise_grid(tuple((k - r * hi) / s for k in act.kinks), order)
        out[i] = math.fsum(g.weights * act.value(s * g.nodes + r * hi))
    return out


def pbar_generic(act, p, order=NESTED_ORDER):
    """Nested-quadrature evaluation valid for any activation."""
    p = float(p)
    _check_p(p)
    dm2 = acts.moments(act).dm2
    if act.kinks and p > 0.0:
        outer = piecewise_grid(tuple(k / math.sqrt(p) for k in act.kinks), order)
    else:
        outer = gauss_hermite(order)
    m = _inner_means(act, p, outer.nodes, order)
    return math.fsum(outer.weights * m * m) / dm2


def pbar(act, p, grid=None):
    """Overlap curve value, using closed forms where they exist."""
    act = acts.get(act)
    order = NESTED_ORDER if grid is None else grid.order
    if act.code == acts.RELU:
        return pbar_relu_closed(p, order)
    if act.code == acts.ERF:
        return pbar_erf_closed(p)
    if act.code == acts.QUADRATIC:
        return pbar_quadratic_closed(p)
    return pbar_generic(act, p, order)


class OverlapCurve:
    """Memoized ``pbar`` with cubic interpolation.

    The lattice is uniform in ``s = sqrt(1 - p)`` rather than in ``p``. The
    ReLU curve has a ``(1 - p)^{3/2}`` term that is smooth in ``s`` but not in
    ``p``, and the change of variable keeps every other curve smooth as well.
    """

    def __init__(self, act, order=NESTED_ORDER, size=LATTICE_SIZE):
        self.activation = acts.get(act)
        self.order = int(order)
        ms = acts.moments(self.activation)
        self.moments = ms
        self.pbar_top = ms.m2 / ms.dm2
        self.pbar_bottom = ms.m1 * ms.m1 / ms.dm2
        s = np.linspace(0.0, 1.0, int(size))
        self._s = s
        p = np.clip(1.0 - s * s, 0.0, 1.0)
        vals = np.array([self.direct(float(x)) for x in p])
        # exact endpoints keep b_k = 0 for repeated boundary overlaps
        vals[0], vals[-1] = self.pbar_top, self.pbar_bottom
        self._spline = CubicSpline(s, vals)

    def direct(self, p):
        return pbar(self.activation, p, gauss_hermite(self.order))

    def __call__(self, p):
        if np.isscalar(p):
            _check_p(p)
            return float(self._spline(math.sqrt(max(1.0 - p, 0.0))))
        p = np.asarray(p, dtype=float)
        if np.any((p < 0.0) | (p > 1.0)):
            raise DomainError("overlap p must lie in [0, 1]")
        return self._spline(np.sqrt(np.maximum(1.0 - p, 0.0)))

    def lattice(self):
        """The stored ``(p, pbar)`` pairs in increasing ``p``."""
        s = self._s[::-1]
        return 1.0 - s * s, self._spline(s)


_CURVES = {}


def curve_for(act, order=NESTED_ORDER):
    """Shared, lazily built curve per (activation, order)."""
    act = acts.get(act)
    key = (act.name, id(act), int(order))
    if key not in _CURVES:
        _CURVES[key] = OverlapCurve(act, order)
    return _CURVES[key]


@dataclass(frozen=True)
class EffectiveFieldCoeffs:
    """``bbar[k] = sqrt(pbar(p_{k+1}) - pbar(p_{k+2}))`` for ``k = 0..r-1``,
    i.e. the coefficients b2, ..., b_{r+1}."""

    bbar: Tuple[float, ...] = field(default=())

    @property
    def total(self):
        return math.fsum(b * b for b in self.bbar)


def effective_coeffs(curve, p_vec):
    """Coefficients for ``p_vec = (1, p2, ..., p_r, 0)`` in descending order."""
    p_vec = [float(x) for x in p_vec]
    if len(p_vec) < 2 or p_vec[0] != 1.0 or p_vec[-1] != 0.0:
        raise DomainError("p_vec must start at 1 and end at 0")
    if any(b > a for a, b in zip(p_vec[:-1], p_vec[1:])):
        raise DomainError("p_vec must be sorted in descending order")
    vals = [curve.pbar_top] + [curve(x) for x in p_vec[1:-1]] + [curve.pbar_bottom]
    out = []
    for a, b in zip(vals[:-1], vals[1:]):
        d = a - b
        if d < -1e-12:
            raise DomainError(f"overlap curve not monotone: increment {d:.3e}")
        out.append(math.sqrt(max(d, 0.0)))
    return EffectiveFieldCoeffs(tuple(out))
