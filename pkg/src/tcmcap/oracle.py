"""Finite-d Monte Carlo check of the projection value.

For a draw ``g ~ N(0, I_d)`` and output weights ``w = (-1, ..., -1, +1, ..., +1)``
the projection value is

    z(g) = min_q |g - q|^2   subject to   f(q)^T w >= 0,

and ``E z`` tends to ``z_infinity = (m2 - m1^2) / (2 dm2)`` as ``d`` grows.
``sample_z1`` evaluates the first-order candidate ``q = g + nu f'(g) * w`` and,
when ``polish`` is on, the exact coordinate-wise Lagrangian minimizer at the
smallest multiplier that restores feasibility; the smaller feasible value wins.

The polished value is the exact minimum for the quadratic (one quadratic
constraint has no duality gap) and for ReLU, which is solved by enumerating
how many negative entries of the positive block to switch on. For erf and
tanh at very small ``d`` the multiplier can jump over the optimum, and the
value is then the distance to a feasible point, an upper bound.
"""

import math
from dataclasses import dataclass, asdict
from typing import List

import numpy as np

from . import activations as acts
from ._kernels import _argmin_numpy, relu_exact_numpy, relu_exact_point, z1_batch, z1_batch_numpy
from .errors import DomainError
from .free_energy import z_infinity


@dataclass(frozen=True)
class McConfig:
    d: int
    samples: int
    seed: int = 0
    polish: bool = True
    # draws per RNG substream; part of the reproducibility key
    chunk: int = 1000

    def __post_init__(self):
        if not (isinstance(self.d, (int, np.integer)) and self.d > 0 and self.d % 2 == 0):
            raise DomainError(f"d must be an even positive integer, got {self.d}")
        if not self.samples > 0:
            raise DomainError("samples must be positive")
        if not self.chunk > 0:
            raise DomainError("chunk must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class McEstimate:
    activation: str
    d: int
    samples: int
    seed: int
    mean: float
    stderr: float
    n_infeasible_fallbacks: int
    n_rescaled: int
    limit: float

    @property
    def gap(self):
        return self.mean - self.limit

    @property
    def rescaled_fraction(self):
        return self.n_rescaled / self.samples

    def to_dict(self):
        out = asdict(self)
        out["gap"] = self.gap
        return out


def output_weights(d):
    half = d // 2
    return np.concatenate([-np.ones(half), np.ones(d - half)])


def sample_z1(act, g, polish=True):
    """Projection value for a single draw ``g`` (even length)."""
    act = acts.get(act)
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or g.size == 0 or g.size % 2:
        raise DomainError("g must be a vector of even length")
    z, _, _ = z1_batch(act, g[None, :], polish)
    return float(z[0])


def project(act, g, polish=True):
    """The projected point ``q`` behind ``sample_z1`` and its value.

    Diagnostic helper on the numpy path; returns ``(q, z)``.
    """
    act = acts.get(act)
    g = np.asarray(g, dtype=float)
    if g.ndim != 1 or g.size == 0 or g.size % 2:
        raise DomainError("g must be a vector of even length")
    w = output_weights(g.size)
    z, _, _, nu = z1_batch_numpy(act, g[None, :], polish, return_nu=True)
    if np.isfinite(nu[0]) and act.code == 0:
        _, nu_ex, k = relu_exact_numpy(g, g.size // 2, -float(act.value(g) @ w))
        q = relu_exact_point(g, g.size // 2, nu_ex, k)
    elif np.isfinite(nu[0]):
        q = _argmin_numpy(act, g[None, :], nu[0] * w[None, :])[0][0]
    else:
        s = float(act.value(g) @ w)
        fp = act.derivative(g)
        D = float(fp @ fp)
        step = -s / D if (s < 0.0 and D > 0.0) else 0.0
        q = g + step * w * fp
    return q, float(z[0])


def _chunks(cfg):
    n_full, rest = divmod(cfg.samples, cfg.chunk)
    sizes = [cfg.chunk] * n_full + ([rest] if rest else [])
    streams = np.random.SeedSequence(int(cfg.seed)).spawn(len(sizes))
    for size, ss in zip(sizes, streams):
        yield np.random.Generator(np.random.Philox(ss)).standard_normal((size, cfg.d))


def mc_estimate(act, cfg):
    """Sample mean and standard error of the projection value.

    Each chunk of draws has its own Philox substream spawned from ``cfg.seed``,
    so the estimate depends only on ``(seed, d, samples, chunk)``.
    """
    act = acts.get(act)
    parts, fallbacks, rescaled = [], 0, 0
    for G in _chunks(cfg):
        z, fb, rs = z1_batch(act, G, cfg.polish)
        parts.append(z)
        fallbacks += int(fb.sum())
        rescaled += int(rs.sum())
    z = np.concatenate(parts)
    n = z.size
    mean = math.fsum(z) / n
    sd = math.sqrt(math.fsum((z - mean) ** 2) / (n - 1)) if n > 1 else 0.0
    return McEstimate(
        activation=act.name,
        d=int(cfg.d),
        samples=n,
        seed=int(cfg.seed),
        mean=mean,
        stderr=sd / math.sqrt(n),
        n_infeasible_fallbacks=fallbacks,
        n_rescaled=rescaled,
        limit=z_infinity(act),
    )


def convergence_study(act, d_list, samples, seed=0, polish=True) -> List[McEstimate]:
    """One estimate per dimension in ``d_list`` (ascending, even)."""
    d_list = [int(d) for d in d_list]
    if not d_list or any(b <= a for a, b in zip(d_list[:-1], d_list[1:])):
        raise DomainError("d_list must be strictly ascending")
    return [mc_estimate(act, McConfig(d, samples, seed, polish)) for d in d_list]


def gaps_shrink(study, n_sigma=3.0):
    """True when each gap is no larger than the previous one up to noise."""
    for a, b in zip(study[:-1], study[1:]):
        noise = n_sigma * math.hypot(a.stderr, b.stderr)
        if abs(b.gap) > abs(a.gap) + noise:
            return False
    return True
