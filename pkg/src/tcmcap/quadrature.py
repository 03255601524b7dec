"""Deterministic expectations over standard Gaussian variables.

Two families of rules live here:

* probabilists' Gauss-Hermite grids for smooth integrands;
* kink-split Gauss-Legendre panels on a truncated line for integrands with a
  known non-smooth point (``max(x, 0)`` and friends), where Hermite rules
  lose their spectral convergence.

All weights are normalized so that constants integrate to one under the
standard normal measure.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf, roots_hermitenorm

from .errors import DomainError, QuadratureError

MAX_ORDER = 512
#: Half-width of the truncated line used by the split rules. The Gaussian mass
#: outside [-10, 10] is below 1e-23.
HALF_WIDTH = 10.0

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class QuadratureGrid:
    """Nodes and normalized weights for ``E f(g)``, ``g ~ N(0, 1)``."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.nodes.setflags(write=False)
        self.weights.setflags(write=False)

    def __len__(self):
        return self.nodes.size


@lru_cache(maxsize=None)
def gauss_hermite(order):
    """Probabilists' Gauss-Hermite rule for the standard normal weight.

    Parameters
    ----------
    order : int
        Number of nodes, between 2 and 512.

    Returns
    -------
    QuadratureGrid
        Exact for polynomials up to degree ``2 * order - 1``.
    """
    order = int(order)
    if not 2 <= order <= MAX_ORDER:
        raise DomainError(f"Gauss-Hermite order must lie in [2, {MAX_ORDER}], got {order}")
    x, w = roots_hermitenorm(order)
    w = w / math.fsum(w)
    return QuadratureGrid(order, x, w)


@lru_cache(maxsize=None)
def _legendre(order):
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def split_rule(kinks, order, half_width=HALF_WIDTH):
    """Gaussian-weighted Legendre panels broken at one point per row.

    For every entry ``k`` of ``kinks`` the line ``[-L, L]`` is cut into
    ``[-L, k]`` and ``[k, L]`` and each half gets an ``order``-point
    Gauss-Legendre rule with the normal density folded into the weights.

    Parameters
    ----------
    kinks : array_like
        Break points, any shape ``S``. Values outside ``[-L, L]`` are clipped.
    order : int
        Legendre nodes per panel.

    Returns
    -------
    nodes, weights : ndarray
        Shape ``S + (2 * order,)``.
    """
    k = np.clip(np.asarray(kinks, dtype=float), -half_width, half_width)
    lx, lw = _legendre(int(order))
    lo = np.stack([np.full_like(k, -half_width), k], axis=-1)
    hi = np.stack([k, np.full_like(k, half_width)], axis=-1)
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    nodes = mid[..., None] + half[..., None] * lx
    weights = half[..., None] * lw * np.exp(-0.5 * nodes * nodes) / _SQRT_2PI
    shape = k.shape + (2 * lx.size,)
    return nodes.reshape(shape), weights.reshape(shape)


@lru_cache(maxsize=64)
def piecewise_grid(breaks, order, half_width=HALF_WIDTH):
    """Fixed grid with Legendre panels between sorted ``breaks``.

    ``breaks`` is a tuple so the result can be cached. The returned grid
    reports ``order`` as the per-panel node count.
    """
    pts = [-half_width] + sorted(min(max(b, -half_width), half_width) for b in breaks) + [half_width]
    lx, lw = _legendre(int(order))
    xs, ws = [], []
    for a, b in zip(pts[:-1], pts[1:]):
        if b <= a:
            continue
        m, h = 0.5 * (a + b), 0.5 * (b - a)
        x = m + h * lx
        xs.append(x)
        ws.append(h * lw * np.exp(-0.5 * x * x) / _SQRT_2PI)
    return QuadratureGrid(int(order), np.concatenate(xs), np.concatenate(ws))


def _eval_on(fn, x):
    try:
        v = np.asarray(fn(x), dtype=float)
        if v.shape == x.shape:
            return v
    except (TypeError, ValueError):
        pass
    return np.array([float(fn(t)) for t in x.ravel()]).reshape(x.shape)


def fsum_rows(a, w):
    """Compensated ``a @ w`` along the last axis."""
    prod = np.asarray(a) * w
    flat = prod.reshape(-1, prod.shape[-1])
    out = np.fromiter((math.fsum(row) for row in flat), dtype=float, count=flat.shape[0])
    return out.reshape(prod.shape[:-1])


def expect1(fn, grid):
    """``E fn(g)`` on ``grid``.

    ``fn`` may be vectorized; scalar callables are evaluated node by node.
    Summation is compensated, so the result does not depend on node order
    beyond rounding of the individual products.
    """
    vals = _eval_on(fn, grid.nodes)
    if not np.all(np.isfinite(vals)):
        raise QuadratureError("integrand is not finite on the grid")
    return math.fsum(vals * grid.weights)


def expect2_nested(inner, reducer, grid, outer_grid=None):
    """``E_y reducer(E_x inner(x, y))`` with ``x``, ``y`` independent normals.

    ``inner`` is called once with broadcast arrays ``x[None, :]`` and
    ``y[:, None]``; ``reducer`` receives the vector of inner means.
    """
    og = grid if outer_grid is None else outer_grid
    x = grid.nodes[None, :]
    y = og.nodes[:, None]
    vals = np.asarray(inner(x, y), dtype=float)
    vals = np.broadcast_to(vals, (og.nodes.size, grid.nodes.size))
    if not np.all(np.isfinite(vals)):
        raise QuadratureError("inner integrand is not finite on the grid")
    means = fsum_rows(vals, grid.weights)
    with np.errstate(all="ignore"):
        red = np.asarray(reducer(means), dtype=float)
    if not np.all(np.isfinite(red)):
        raise QuadratureError("reducer left its domain on the inner means")
    return math.fsum(np.broadcast_to(red, means.shape) * og.weights)


def erf_mean_identity(a, b):
    """``E erf(a g + b) = erf(b / sqrt(1 + 2 a^2))``."""
    return float(erf(b / math.sqrt(1.0 + 2.0 * a * a)))
