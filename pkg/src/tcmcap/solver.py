"""Stationary points of the lifted free energy and the capacity root-find.

The sphere-side stationarity conditions (in ``q`` and ``gamma_sq^(p)``) have
closed-form solutions expressing ``gamma_sq^(p)`` and ``c`` through ``p`` and
``q``. Substituting them leaves the unknowns ``(p_2..p_r, q_2..q_r,
gamma_sq)``, which are found by a damped Newton iteration on the remaining
derivatives ``d psi / d p_k``, ``d psi / d c_k`` and ``d psi / d gamma_sq``.
The capacity is the ``alpha`` where the free energy vanishes at that point.
"""

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional, Tuple

import numpy as np

from . import activations as acts
from . import free_energy as fe
from .errors import BracketError, DomainError, SolverError
from .free_energy import LiftParams
from .overlap import OverlapCurve, curve_for


@dataclass(frozen=True)
class SolverConfig:
    fd_step: float = 1e-5
    jac_step: float = 1e-4
    damping: float = 1.0
    max_iters: int = 60
    alpha_bracket: Tuple[float, float] = (1.5, 5.0)
    stationarity_tol: float = 1e-9
    accept_tol: float = 1e-7
    psi_tol: float = 1e-10
    max_alpha_steps: int = 40
    max_step: float = 0.3
    grid_order: int = 80
    init_2full: Tuple[float, float] = (0.5, 0.3)

    def __post_init__(self):
        if not 1e-7 <= self.fd_step <= 1e-4:
            raise DomainError("fd_step must lie in [1e-7, 1e-4]")
        if not 0 < self.damping <= 1:
            raise DomainError("damping must lie in (0, 1]")
        lo, hi = self.alpha_bracket
        if not 0 < lo < hi:
            raise DomainError("alpha bracket needs 0 < lo < hi")


@dataclass(frozen=True)
class Level:
    """Lifting level selector: ``r`` plus the partial/full variant."""

    r: int
    partial: bool = False

    @classmethod
    def parse(cls, text):
        t = str(text).strip().lower()
        if t in ("1", "1-full"):
            return cls(1)
        if t in ("2-partial", "2p"):
            return cls(2, True)
        if t.startswith("r-full:"):
            t = t.split(":", 1)[1] + "-full"
        if t.endswith("-full") and t[:-5].isdigit():
            r = int(t[:-5])
            if 2 <= r <= fe.MAX_LEVEL:
                return cls(r)
            if r == 1:
                return cls(1)
        raise DomainError(f"unknown level {text!r}; use 1, 2-partial, 2-full, 3-full or r-full:N (N <= {fe.MAX_LEVEL})")

    @property
    def label(self):
        if self.r == 1:
            return "1"
        return f"{self.r}-{'partial' if self.partial else 'full'}"

    @property
    def variant(self):
        return "partial" if self.partial else "full"


@dataclass
class CapacityReport:
    activation: str
    level: str
    variant: str
    alpha_c: float
    params: LiftParams
    stationarity_residual: float
    psi_residual: float
    newton_iterations: int = 0
    alpha_iterations: int = 0
    wall_time: float = 0.0
    note: str = ""

    def row(self):
        """Values in table order for levels up to 3 (absent entries 0)."""
        p = list(self.params.p) + [0.0] * (2 - len(self.params.p))
        q = list(self.params.q) + [0.0] * (2 - len(self.params.q))
        c = list(self.params.c) + [0.0] * (2 - len(self.params.c))
        extra = {}
        for k in range(len(self.params.p) - 1, 1, -1):
            extra[f"p{k + 2}"] = self.params.p[k]
            extra[f"q{k + 2}"] = self.params.q[k]
            extra[f"c{k + 2}"] = self.params.c[k]
        row = {"gamma_sq": self.params.gamma_sq, "gamma_sq_p": self.params.gamma_sq_p}
        row.update({k: v for k, v in extra.items() if k.startswith("p")})
        row.update({"p3": p[1], "p2": p[0]})
        row.update({k: v for k, v in extra.items() if k.startswith("q")})
        row.update({"q3": q[1], "q2": q[0]})
        row.update({k: v for k, v in extra.items() if k.startswith("c")})
        row.update({"c3": c[1], "c2": c[0], "alpha_c": self.alpha_c})
        return row

    def to_dict(self):
        d = asdict(self)
        d["params"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.params).items()}
        return d


# ------------------------------------------------------------ closed forms


def _prod(a, b, start, stop, shift):
    v = 1.0
    for k in range(start, stop + 1, 2):
        v *= (a[k + shift] - a[k + shift + 1]) / (b[k + shift] - b[k + shift + 1])
    return v


def closed_form_gamma_c(level, p, q):
    """``gamma_sq^(p)`` and ``c_2..c_r`` solving the sphere-side stationarity.

    ``p`` and ``q`` hold entries ``2..r``. The sign pattern of the square-root
    factor in ``c_i`` is ``(-1)^(r+i+1)``; for odd ``r`` this equals
    ``(-1)^i``.
    """
    r = int(level.r if isinstance(level, Level) else level)
    p, q = [float(x) for x in p], [float(x) for x in q]
    if len(p) != r - 1 or len(q) != r - 1:
        raise DomainError(f"level {r} needs {r - 1} entries in p and q")
    P = [None, 1.0] + p
    Q = [None, 1.0] + q
    for v in (P, Q):
        seq = v[1:] + [0.0]
        if any(not (a > b) for a, b in zip(seq[:-1], seq[1:])):
            raise DomainError("closed forms need strictly decreasing p and q in (0, 1)")
    ratio = Q[r] / P[r]
    gp = 0.5 * (Q[1] - Q[2]) / (P[1] - P[2]) * _prod(P, Q, 2, r - 1, 0) * _prod(Q, P, 2, r - 2, 1)
    gp *= math.sqrt(ratio ** ((-1) ** (r + 1)))
    cs = []
    for i in range(2, r + 1):
        e = (-1) ** (r + i + 1)
        t1 = _prod(P, Q, i, r - 1, 0) * _prod(Q, P, i, r - 2, 1) * math.sqrt(ratio**e) / (P[i - 1] - P[i])
        t2 = _prod(Q, P, i, r - 1, 0) * _prod(P, Q, i, r - 2, 1) * math.sqrt(ratio**-e) / (Q[i - 1] - Q[i])
        cs.append(t1 - t2)
    return gp, cs


def partial2_relation(c2):
    """``gamma_sq^(p)`` at the partial second level."""
    if c2 < 0:
        raise DomainError("c2 must be nonnegative")
    return 0.25 * (c2 + math.sqrt(c2 * c2 + 4.0))


# ------------------------------------------------------------ problems


def _bump(params, name, idx, dv):
    if name in ("gamma_sq", "gamma_sq_p"):
        return params.with_(**{name: getattr(params, name) + dv})
    vals = list(getattr(params, name))
    vals[idx] += dv
    return params.with_(**{name: tuple(vals)})


def _value(params, name, idx):
    return getattr(params, name) if idx is None else getattr(params, name)[idx]


class _Problem:
    """Reduced unknowns ``x`` and the stationarity residual for one level."""

    def __init__(self, level, curve, cfg):
        self.level = level
        self.curve = curve
        self.cfg = cfg
        self.order = cfg.grid_order

    def psi(self, params, alpha):
        return fe.psi(params, alpha, self.curve, _grid(self.order))

    def gradient(self, params, alpha, names):
        out = np.empty(len(names))
        for i, (name, idx) in enumerate(names):
            h = self.cfg.fd_step * max(1.0, abs(_value(params, name, idx)))
            up = self._try_psi(_bump(params, name, idx, h), alpha)
            dn = self._try_psi(_bump(params, name, idx, -h), alpha)
            if up is not None and dn is not None:
                # five-point stencil: near the level-3 ReLU point c2 is large
                # and the h^2 term of the three-point rule reaches 1e-7
                up2 = self._try_psi(_bump(params, name, idx, 2.0 * h), alpha)
                dn2 = self._try_psi(_bump(params, name, idx, -2.0 * h), alpha)
                if up2 is not None and dn2 is not None:
                    out[i] = (8.0 * (up - dn) - (up2 - dn2)) / (12.0 * h)
                else:
                    out[i] = (up - dn) / (2.0 * h)
                continue
            # one-sided second-order stencil next to the domain boundary
            sgn = 1.0 if up is not None else -1.0
            f0 = self.psi(params, alpha)
            f1 = self._try_psi(_bump(params, name, idx, sgn * h), alpha)
            f2 = self._try_psi(_bump(params, name, idx, 2.0 * sgn * h), alpha)
            if f1 is None or f2 is None:
                raise DomainError(f"no finite-difference stencil for {name} inside the domain")
            out[i] = sgn * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)
        return out

    def _try_psi(self, params, alpha):
        try:
            return self.psi(params, alpha)
        except (DomainError, ValueError, ZeroDivisionError):
            return None

    def scales(self, x):
        # overlaps live on [0, 1]; multipliers move relative to their size
        return np.maximum(np.abs(x), 0.05)

    def residual(self, x, alpha):
        params = self.unpack(x)
        return self.gradient(params, alpha, self.equations)

    def admissible(self, x):
        try:
            params = self.unpack(x)
            params.check()
            # keep finite-difference probes in c away from the c = 0 boundary
            if params.r >= 2 and min(params.c) <= 100.0 * self.cfg.fd_step:
                return False
            return True
        except (DomainError, ValueError, ZeroDivisionError):
            return False



class _Partial2(_Problem):
    """Partial second level: ``p2 = q2 = 0``, unknowns ``(c2, gamma_sq)``."""

    equations = (("c", 0), ("gamma_sq", None))

    def unpack(self, x):
        c2, g = float(x[0]), float(x[1])
        return LiftParams(2, (0.0,), (0.0,), (c2,), g, partial2_relation(max(c2, 0.0)))

    def pack(self, params):
        return np.array([params.c[0], params.gamma_sq])


class _Pinned2(_Problem):
    """Second level with ``p2 = q2 = 0`` and ``gamma_sq^(p)`` left free."""

    equations = (("c", 0), ("gamma_sq_p", None), ("gamma_sq", None))

    def unpack(self, x):
        return LiftParams(2, (0.0,), (0.0,), (float(x[0]),), float(x[2]), float(x[1]))

    def pack(self, params):
        return np.array([params.c[0], params.gamma_sq_p, params.gamma_sq])


class _Full(_Problem):
    """Full level ``r``: unknowns ``(p_2..p_r, q_2..q_r, gamma_sq)``."""

    def __init__(self, level, curve, cfg):
        super().__init__(level, curve, cfg)
        n = level.r - 1
        self.equations = tuple(("p", k) for k in range(n)) + tuple(("c", k) for k in range(n)) + (("gamma_sq", None),)

    def unpack(self, x):
        n = self.level.r - 1
        p, q, g = tuple(float(v) for v in x[:n]), tuple(float(v) for v in x[n : 2 * n]), float(x[-1])
        gp, c = closed_form_gamma_c(self.level.r, p, q)
        return LiftParams(self.level.r, p, q, tuple(c), g, gp)

    def pack(self, params):
        return np.array(list(params.p) + list(params.q) + [params.gamma_sq])

    def scales(self, x):
        sc = np.ones_like(x)
        sc[-1] = max(abs(x[-1]), 0.05)
        return sc


def _grid(order):
    from .quadrature import gauss_hermite

    return gauss_hermite(order)


# ------------------------------------------------------------ Newton


@dataclass
class _NewtonResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool


def _jacobian(prob, x, alpha, F0):
    n = x.size
    J = np.empty((F0.size, n))
    for j in range(n):
        h = prob.cfg.jac_step * max(abs(x[j]), 0.1)
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        fp = _safe_residual(prob, xp, alpha)
        fm = _safe_residual(prob, xm, alpha)
        if fp is not None and fm is not None:
            J[:, j] = (fp - fm) / (2.0 * h)
        elif fp is not None:
            J[:, j] = (fp - F0) / h
        elif fm is not None:
            J[:, j] = (F0 - fm) / h
        else:
            raise DomainError("Jacobian stencil leaves the admissible region")
    return J


def _safe_residual(prob, x, alpha):
    if not prob.admissible(x):
        return None
    try:
        F = prob.residual(x, alpha)
    except DomainError:
        return None
    return F if np.all(np.isfinite(F)) else None


def newton(prob, x0, alpha, max_iters=None):
    """Damped Newton with a non-monotone backtracking line search.

    Steps are accepted when the Euclidean residual drops below the largest of
    the last few accepted residuals (a plain monotone test crawls along the
    curved, badly conditioned valleys of the level-3 system). The iteration
    stops at ``stationarity_tol``; once the residual is below ``accept_tol``
    a stalled line search (finite-difference noise floor) also counts as
    convergence. The best iterate seen is returned.
    """
    cfg = prob.cfg
    x = np.array(x0, dtype=float)
    if not prob.admissible(x):
        raise SolverError("initial point outside the admissible region")
    F = prob.residual(x, alpha)
    history = [float(np.linalg.norm(F))]
    best_x, best_err = x, float(np.max(np.abs(F)))
    it = 0
    limit = cfg.max_iters if max_iters is None else max_iters
    while it < limit and best_err > cfg.stationarity_tol:
        it += 1
        try:
            J = _jacobian(prob, x, alpha, F)
        except DomainError:
            break
        try:
            dx = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -F, rcond=None)[0]
        # trust cap in units relative to each unknown keeps the iterate on
        # the branch it started from
        big = float(np.max(np.abs(dx) / prob.scales(x)))
        t = cfg.damping * min(1.0, cfg.max_step / big) if big > 0 else cfg.damping
        ref = max(history[-5:])
        accepted = False
        for _ in range(40):
            xt = x + t * dx
            Ft = _safe_residual(prob, xt, alpha)
            if Ft is not None:
                mt = float(np.linalg.norm(Ft))
                if mt < (1.0 - 1e-4 * t) * ref:
                    x, F = xt, Ft
                    history.append(mt)
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        err = float(np.max(np.abs(F)))
        if err < best_err:
            best_x, best_err = x, err
    return _NewtonResult(best_x, best_err, it, best_err <= cfg.accept_tol)


# ------------------------------------------------------------ public API


def _problem(level, curve, cfg, pinned=False):
    if level.r == 2 and level.partial:
        return _Pinned2(level, curve, cfg) if pinned else _Partial2(level, curve, cfg)
    return _Full(level, curve, cfg)


def _as_curve(act_or_curve, cfg):
    if isinstance(act_or_curve, OverlapCurve):
        return act_or_curve
    return curve_for(act_or_curve, cfg.grid_order)


def solve_stationary(level, act_or_curve, alpha, init, cfg=None, pinned=False):
    """Stationary parameters at fixed ``alpha`` starting from ``init``."""
    cfg = cfg or SolverConfig()
    level = level if isinstance(level, Level) else Level.parse(level)
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    if level.r == 1:
        act = act_or_curve.activation if isinstance(act_or_curve, OverlapCurve) else acts.get(act_or_curve)
        zinf = fe.z_infinity(act)
        return LiftParams(1, gamma_sq=0.5 * math.sqrt(alpha * zinf), gamma_sq_p=0.5)
    prob = _problem(level, _as_curve(act_or_curve, cfg), cfg, pinned)
    res = newton(prob, prob.pack(init), alpha)
    if not res.converged:
        raise SolverError(f"stationarity not reached at alpha={alpha:.6g}: residual {res.residual:.3e} after {res.iterations} steps")
    return prob.unpack(res.x)


def _level1_report(act, t0):
    zinf = fe.z_infinity(act)
    alpha = 1.0 / zinf
    params = LiftParams(1, gamma_sq=0.5 * math.sqrt(alpha * zinf), gamma_sq_p=0.5)
    return CapacityReport(act.name, "1", "full", alpha, params, 0.0, abs(fe.psi_level1(alpha, act)), wall_time=time.perf_counter() - t0)


def _partial_start(prob, alpha):
    """Coarse scan over ``c2`` (with ``gamma_sq`` optimized) for a start.

    Returns ``None`` when the free energy decreases away from ``c2 = 0``,
    i.e. the partial level brings no improvement over level 1.
    """
    from scipy.optimize import minimize_scalar

    def best(c2):
        f = lambda g: prob.psi(prob.unpack([c2, g]), alpha)
        r = minimize_scalar(f, bounds=(1e-4, 10.0), method="bounded", options={"xatol": 1e-9})
        return r.fun, r.x

    base = fe.psi(LiftParams(1, gamma_sq=0.5 * math.sqrt(alpha * fe.z_infinity(prob.curve.activation)), gamma_sq_p=0.5), alpha, prob.curve)
    eps = 1e-3
    if best(eps)[0] <= base:
        return None
    cands = [(best(c2), c2) for c2 in (0.25, 0.5, 1.0, 2.0, 4.0)]
    (val, g), c2 = max(cands, key=lambda t: t[0][0])
    if val <= base:
        return None
    return np.array([c2, g])


def _lift_starts(prev):
    """Candidate starts for level ``r`` from a level ``r - 1`` solution.

    The new top overlap sits close to 1 while the old entries move down one
    slot and shrink slightly. Two profiles cover the activations seen so far
    (a top gap of about 10% or 15% of the old one); the others are fallbacks.
    """
    p, q, g = list(prev.params.p), list(prev.params.q), prev.params.gamma_sq
    for shrink, qmix, gfac, drop in _START_PROFILES:
        pn = [1.0 - shrink * (1.0 - p[0])] + [v * (1.0 - drop) for v in p]
        qn = [q[0] + qmix * (1.0 - q[0])] + [v * (1.0 - drop) for v in q]
        yield np.array(pn + qn + [gfac * g])


_START_PROFILES = (
    (0.10, 0.55, 0.6, 0.05),
    (0.15, 0.60, 0.8, 0.02),
    (0.12, 0.60, 0.7, 0.03),
    (0.08, 0.55, 0.5, 0.06),
)


def _distinct(params, tol=1e-3):
    """Reject solutions that fold back onto the lower level (p_k = p_{k+1})."""
    for v in (params.p, params.q):
        seq = (1.0,) + tuple(v)
        if any(a - b < tol for a, b in zip(seq[:-1], seq[1:])):
            return False
    return True


def capacity(level, act_or_curve, cfg=None, warm=None, pinned=False):
    """Capacity at ``level``.

    ``warm`` is an optional report from the next lower level used for the
    continuation start; without it the lower levels are solved first.
    With ``pinned`` the partial second level is solved as the full second
    level restricted to ``p2 = q2 = 0``, leaving ``gamma_sq^(p)`` free instead
    of tying it to ``c2``; both must give the same capacity.
    """
    t0 = time.perf_counter()
    cfg = cfg or SolverConfig()
    level = level if isinstance(level, Level) else Level.parse(level)
    if level.r == 1:
        # closed form: only the moments are needed, not the overlap curve
        act = act_or_curve.activation if isinstance(act_or_curve, OverlapCurve) else acts.get(act_or_curve)
        return _level1_report(act, t0)
    curve = _as_curve(act_or_curve, cfg)
    act = curve.activation
    lo, hi = cfg.alpha_bracket
    pinned = pinned and level.partial
    prob = _problem(level, curve, cfg, pinned)

    if pinned:
        alpha = 1.0 / fe.z_infinity(act)
        x = _partial_start(_problem(level, curve, cfg), alpha)
        if x is None:
            return capacity(level, curve, cfg)
        # same coarse start as the partial solve, then all three unknowns free
        x = np.array([x[0], partial2_relation(x[0]), x[1]])
    elif level.partial:
        alpha = 1.0 / fe.z_infinity(act)
        x = _partial_start(prob, alpha)
        if x is None:
            rep = _level1_report(act, t0)
            rep.level, rep.variant = level.label, "partial"
            rep.params = LiftParams(2, (0.0,), (0.0,), (0.0,), rep.params.gamma_sq, 0.5)
            rep.note = "no improvement over level 1: stationary c2 is 0"
            return rep
    elif level.r == 2:
        if warm is None:
            warm = capacity(Level(2, True), curve, cfg)
        alpha = warm.alpha_c
        p2, q2 = cfg.init_2full
        x = np.array([p2, q2, warm.params.gamma_sq])
    else:
        if warm is None:
            warm = capacity(Level(level.r - 1), curve, cfg)
        alpha = warm.alpha_c
        x = None
        for xt in _lift_starts(warm):
            if not prob.admissible(xt):
                continue
            res = newton(prob, xt, alpha, max_iters=25)
            if res.converged and _distinct(prob.unpack(res.x)):
                x = res.x
                break
        if x is None:
            raise SolverError(f"no admissible start found for level {level.label}")
    alpha = min(max(alpha, lo), hi)
    return _alpha_search(prob, level, act, x, alpha, cfg, t0)


def _alpha_search(prob, level, act, x, alpha, cfg, t0):
    lo, hi = cfg.alpha_bracket
    below, above = None, None  # alphas with psi < 0 / psi > 0
    good_alpha, good_x = None, None
    n_newton = 0
    for k in range(cfg.max_alpha_steps):
        res = newton(prob, x, alpha)
        n_newton += res.iterations
        if not res.converged:
            if good_alpha is None:
                raise SolverError(f"stationarity not reached at alpha={alpha:.6g} (residual {res.residual:.3e})")
            # step back towards the last converged alpha
            alpha = 0.5 * (alpha + good_alpha)
            x = good_x
            continue
        x = res.x
        params = prob.unpack(x)
        val = prob.psi(params, alpha)
        good_alpha, good_x = alpha, x
        if abs(val) <= cfg.psi_tol:
            return CapacityReport(
                act.name, level.label, level.variant, alpha, params, res.residual, abs(val), n_newton, k + 1, time.perf_counter() - t0
            )
        if val < 0:
            below = alpha
        else:
            above = alpha
        # envelope theorem: d psi / d alpha equals the explicit derivative
        slope = -fe.net_expectation(params, prob.curve, prob.order) / params.c[-1]
        step = alpha - val / slope if slope > 0 else alpha + (hi - lo) * 0.05 * (-1 if val > 0 else 1)
        if below is not None and above is not None and not (min(below, above) < step < max(below, above)):
            step = 0.5 * (below + above)
        if step < lo or step > hi:
            edge = lo if step < lo else hi
            if alpha == edge:
                raise BracketError(f"free energy keeps its sign on [{lo}, {hi}]")
            step = edge
        alpha = step
    raise SolverError("alpha iteration did not converge")


def sweep(activations, levels, cfg=None):
    """Capacities for every (activation, level); failures reported per cell."""
    cfg = cfg or SolverConfig()
    levels = [lv if isinstance(lv, Level) else Level.parse(lv) for lv in levels]
    out = {}
    for a in activations:
        act = acts.get(a)
        curve = curve_for(act, cfg.grid_order)
        done = {}
        for lv in sorted(levels, key=lambda v: (v.r, not v.partial)):
            warm = done.get((lv.r - 1, False)) if lv.r > 2 else done.get((2, True))
            try:
                rep = capacity(lv, curve, cfg, warm=warm)
            except Exception as exc:  # noqa: BLE001 - reported per cell
                rep = exc
            done[(lv.r, lv.partial)] = rep if isinstance(rep, CapacityReport) else None
            out[(act.name, lv.label)] = rep
    return out
