"""Activation functions and their Gaussian moments.

Every activation exposes a vectorized value and derivative. The four built-in
ones also carry exact (or high-precision) moments and an integer code used by
the compiled kernels to select the activation without Python callbacks.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import erf as _erf

from .errors import DomainError, QuadratureError
from .quadrature import gauss_hermite, piecewise_grid, expect1

RELU, QUADRATIC, ERF, TANH = 0, 1, 2, 3
CUSTOM = -1


@dataclass(frozen=True)
class MomentSet:
    """``m1 = E f(g)``, ``m2 = E f(g)^2``, ``dm2 = E f'(g)^2``."""

    m1: float
    m2: float
    dm2: float

    def __post_init__(self):
        if not self.dm2 > 0:
            raise DomainError(f"E f'(g)^2 must be positive, got {self.dm2}")
        if self.m2 < self.m1 * self.m1 - 1e-12:
            raise DomainError("negative variance: m2 < m1^2")

    @property
    def variance(self):
        return self.m2 - self.m1 * self.m1


@dataclass(frozen=True)
class ActivationSpec:
    name: str
    value: Callable
    derivative: Callable
    closed_form_moments: Optional[MomentSet] = None
    # points where f is not smooth; quadrature splits there
    kinks: Tuple[float, ...] = ()
    code: int = field(default=CUSTOM, compare=False)


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_d(x):
    # right derivative at the kink
    return np.where(np.asarray(x) >= 0.0, 1.0, 0.0)


def _quad(x):
    x = np.asarray(x, dtype=float)
    return x * x


def _quad_d(x):
    return 2.0 * np.asarray(x, dtype=float)


def _erf_d(x):
    x = np.asarray(x, dtype=float)
    return 2.0 / math.sqrt(math.pi) * np.exp(-x * x)


def _tanh_d(x):
    t = np.tanh(x)
    return 1.0 - t * t


_ASIN23 = math.asin(2.0 / 3.0)

RELU_SPEC = ActivationSpec(
    "relu",
    _relu,
    _relu_d,
    MomentSet(0.5 * math.sqrt(2.0 / math.pi), 0.5, 0.5),
    kinks=(0.0,),
    code=RELU,
)
QUADRATIC_SPEC = ActivationSpec("quadratic", _quad, _quad_d, MomentSet(1.0, 3.0, 4.0), code=QUADRATIC)
ERF_SPEC = ActivationSpec(
    "erf",
    _erf,
    _erf_d,
    MomentSet(0.0, 2.0 / math.pi * _ASIN23, 4.0 / (math.sqrt(5.0) * math.pi)),
    code=ERF,
)
# no closed form; converged Gaussian integrals (checked against order-240 rules)
TANH_SPEC = ActivationSpec(
    "tanh",
    np.tanh,
    _tanh_d,
    MomentSet(0.0, 0.394294490397841, 0.464402902448268),
    code=TANH,
)

_REGISTRY = {s.name: s for s in (RELU_SPEC, QUADRATIC_SPEC, ERF_SPEC, TANH_SPEC)}

BUILTIN = tuple(_REGISTRY)


def get(name):
    """Look up an activation by id."""
    if isinstance(name, ActivationSpec):
        return name
    try:
        return _REGISTRY[name.lower()]
    except KeyError:
        raise DomainError(f"unknown activation {name!r}; choose from {', '.join(BUILTIN)}") from None


def register(spec):
    """Add a custom activation. Its moments are always computed by quadrature."""
    if spec.name in _REGISTRY and _REGISTRY[spec.name] is not spec:
        raise DomainError(f"activation {spec.name!r} already registered")
    if spec.closed_form_moments is not None or spec.code != CUSTOM:
        spec = ActivationSpec(spec.name, spec.value, spec.derivative, None, spec.kinks)
    _REGISTRY[spec.name] = spec
    return spec


def custom(name, value, derivative, kinks=()):
    return ActivationSpec(name, value, derivative, None, tuple(kinks))


def eval(act, x):
    return float(act.value(float(x))) if np.isscalar(x) else act.value(np.asarray(x, dtype=float))


def deriv(act, x):
    return float(act.derivative(float(x))) if np.isscalar(x) else act.derivative(np.asarray(x, dtype=float))


def expectation_grid(act, order):
    """Gauss-Legendre panels on [-10, 10], split at the kinks (or at 0).

    Hermite rules converge slowly for tanh-like integrands whose poles sit
    close to the real axis; the two-panel Legendre rule is at rounding level
    by order 40 for all built-in activations.
    """
    return piecewise_grid(tuple(act.kinks) or (0.0,), order)


def quadrature_moments(act, order=120):
    grid = expectation_grid(act, order)
    m1 = expect1(act.value, grid)
    m2 = expect1(lambda x: act.value(x) ** 2, grid)
    dm2 = expect1(lambda x: act.derivative(x) ** 2, grid)
    return MomentSet(m1, m2, dm2)


def moments(act, grid=None, check=True):
    """Gaussian moments of ``act``.

    Closed forms are returned when the activation carries them. Otherwise the
    moments are integrated at ``grid.order`` and, if ``check`` is set, at
    twice that order; disagreement beyond 1e-7 raises ``QuadratureError``.
    """
    if act.closed_form_moments is not None:
        return act.closed_form_moments
    order = 120 if grid is None else grid.order
    ms = quadrature_moments(act, order)
    if check:
        ref = quadrature_moments(act, min(2 * order, 512))
        diff = max(abs(ms.m1 - ref.m1), abs(ms.m2 - ref.m2), abs(ms.dm2 - ref.dm2))
        if diff > 1e-7:
            raise QuadratureError(f"moments of {act.name} not converged (difference {diff:.2e})")
    return ms
