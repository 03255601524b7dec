"""Hot loops, each in a numba flavour and a vectorized numpy flavour.

``nested_log_mean`` is the net-term expectation; ``z1_batch`` evaluates the
finite-d projection value for a block of Gaussian draws. Public callers go
through the dispatchers at the bottom, which honour the backend switch in
``_accel``.
"""

import math

import numpy as np
from scipy.special import log_ndtr

from ._accel import njit, numba_enabled
from .quadrature import HALF_WIDTH, split_rule, _legendre

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------- numpy side


def log_fzt_numpy(h, B, C, gap):
    """``log(f_zd + f_zu)`` in a form that survives both Gaussian tails."""
    a = 2.0 * gap * B + 1.0
    lzd = -B * C * C / a - 0.5 * np.log(a) + log_ndtr(-h / np.sqrt(a))
    lzu = log_ndtr(h)
    return np.logaddexp(lzd, lzu)


def _fzt_log_at(C, b2, B):
    h = -C / b2
    return log_fzt_numpy(h, B, C, b2 * b2)


def _logsumexp_last(a, logw):
    t = a + logw
    m = np.max(t, axis=-1, keepdims=True)
    return np.squeeze(m, -1) + np.log(np.sum(np.exp(t - m), axis=-1))


def nested_log_mean_numpy(b, B, kappa, xo, wo, n_inner):
    """Outer expectation of ``log A_r`` (see ``free_energy.net_term``).

    ``b`` holds ``b2 .. b_{r+1}``; ``kappa`` holds ``c_k / c_{k-1}`` for
    ``k = 3 .. r``.
    """
    r = len(b)
    b2, b3 = b[0], b[1]
    if r == 2:
        nodes, wts = split_rule(np.zeros(()), n_inner)
        return float(np.sum(wts * _fzt_log_at(b3 * nodes, b2, B)))
    if r == 3:
        s = b[2] * xo
    elif r == 4:
        s = b[2] * xo[:, None] + b[3] * xo[None, :]
    else:
        raise ValueError("nested net term supports r <= 4")
    kink = -s / b3 if b3 > 0.0 else np.zeros_like(s)
    nodes, wts = split_rule(kink, n_inner)
    la2 = _fzt_log_at(b3 * nodes + s[..., None], b2, B)
    with np.errstate(divide="ignore"):
        # panels collapsed onto the truncation edge carry zero weight
        logw = np.log(wts)
    la3 = _logsumexp_last(kappa[0] * la2, logw)
    if r == 3:
        return float(np.sum(wo * la3))
    # la3[j, l]: middle index j (g4), outer l (g5)
    la4 = _logsumexp_last(kappa[1] * la3.T, np.log(wo))
    return float(np.sum(wo * la4))


# ---------------------------------------------------------------- numba side


@njit
def _log_ndtr(x):
    if x > 0.0:
        return math.log1p(-0.5 * math.erfc(x / _SQRT2))
    if x > -37.0:
        return math.log(0.5 * math.erfc(-x / _SQRT2))
    # asymptotic tail; the first omitted term is below 2e-15 for x < -37
    u = 1.0 / (x * x)
    series = u * (-1.0 + u * (3.0 + u * (-15.0 + u * (105.0 - 945.0 * u))))
    return -0.5 / u - math.log(-x) - _LOG_SQRT_2PI + math.log1p(series)


@njit
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def _log_fzt_scalar(C, b2, B):
    h = -C / b2
    a = 2.0 * b2 * b2 * B + 1.0
    lzd = -B * C * C / a - 0.5 * math.log(a) + _log_ndtr(-h / math.sqrt(a))
    return _logaddexp(lzd, _log_ndtr(h))


@njit
def _split_log_mean(s, b2, b3, B, kap, lx, lw, L, buf_v, buf_w):
    """log E_{g3} exp(kap * log f(b3 g3 + s)) on the kink-split rule."""
    k = -s / b3 if b3 > 0.0 else 0.0
    if k < -L:
        k = -L
    elif k > L:
        k = L
    n = lx.size
    lo0, hi0 = -L, k
    lo1, hi1 = k, L
    m = -np.inf
    for panel in range(2):
        lo = lo0 if panel == 0 else lo1
        hi = hi0 if panel == 0 else hi1
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        for i in range(n):
            x = mid + half * lx[i]
            j = panel * n + i
            w = half * lw[i] * math.exp(-0.5 * x * x - _LOG_SQRT_2PI)
            buf_w[j] = w
            v = kap * _log_fzt_scalar(b3 * x + s, b2, B)
            buf_v[j] = v
            if w > 0.0 and v > m:
                m = v
    acc = 0.0
    for j in range(2 * n):
        acc += buf_w[j] * math.exp(buf_v[j] - m)
    return m + math.log(acc)


@njit
def _nested_log_mean_nb(b, B, kappa, xo, wo, lx, lw, L):
    r = b.size
    b2 = b[0]
    b3 = b[1]
    n = lx.size
    buf_v = np.empty(2 * n)
    buf_w = np.empty(2 * n)
    if r == 2:
        total = 0.0
        for panel in range(2):
            lo = -L if panel == 0 else 0.0
            hi = 0.0 if panel == 0 else L
            mid = 0.5 * (lo + hi)
            half = 0.5 * (hi - lo)
            for i in range(n):
                x = mid + half * lx[i]
                w = half * lw[i] * math.exp(-0.5 * x * x - _LOG_SQRT_2PI)
                total += w * _log_fzt_scalar(b3 * x, b2, B)
        return total
    no = xo.size
    if r == 3:
        total = 0.0
        for l in range(no):
            total += wo[l] * _split_log_mean(b[2] * xo[l], b2, b3, B, kappa[0], lx, lw, L, buf_v, buf_w)
        return total
    la3 = np.empty(no)
    total = 0.0
    for l in range(no):
        m = -np.inf
        for j in range(no):
            v = kappa[1] * _split_log_mean(b[2] * xo[j] + b[3] * xo[l], b2, b3, B, kappa[0], lx, lw, L, buf_v, buf_w)
            la3[j] = v
            if v > m:
                m = v
        acc = 0.0
        for j in range(no):
            acc += wo[j] * math.exp(la3[j] - m)
        total += wo[l] * (m + math.log(acc))
    return total


# ------------------------------------------------------- finite-d projection


@njit
def _act(code, x):
    if code == 0:
        return x if x > 0.0 else 0.0
    if code == 1:
        return x * x
    if code == 2:
        return math.erf(x)
    return math.tanh(x)


@njit
def _dact(code, x):
    if code == 0:
        return 1.0 if x >= 0.0 else 0.0
    if code == 1:
        return 2.0 * x
    if code == 2:
        return 1.1283791670955126 * math.exp(-x * x)
    t = math.tanh(x)
    return 1.0 - t * t


@njit
def _ddact(code, x):
    if code == 2:
        return -2.0 * x * 1.1283791670955126 * math.exp(-x * x)
    if code == 3:
        t = math.tanh(x)
        return -2.0 * t * (1.0 - t * t)
    return 0.0


@njit
def _coord_argmin(code, g, dg, nu_w):
    """Minimizer of ``(g - q)^2 - 2 nu_w f(q)`` over ``q`` for one coordinate.

    ``nu_w`` is the multiplier times the output weight (sign included) and
    ``dg = f'(g)`` seeds the Newton iteration. Returns ``q``, ``f(q)`` and
    ``w f'(q) dq/dnu``, the coordinate's share of the constraint slope.
    """
    if code == 0:
        if nu_w <= 0.0:
            # f pushed down: clamp positive inputs towards zero
            q = g
            if g > 0.0:
                q = g + nu_w
                if q < 0.0:
                    q = 0.0
        elif g >= 0.0 or nu_w + 2.0 * g > 0.0:
            # for g < 0 the jump to g + nu_w beats staying put
            q = g + nu_w
        else:
            q = g
        if q > 0.0:
            return q, q, 1.0
        return q, 0.0, 0.0
    if code == 1:
        den = 1.0 - 2.0 * nu_w
        q = g / den
        return q, q * q, 4.0 * q * q / den
    if abs(nu_w) * _CURV[code] < 0.8:
        return _convex_newton(code, g, dg, nu_w)
    return _global_argmin(code, g, nu_w)


# largest |f''| and f' of erf and tanh (indexed by code)
_CURV = np.array([0.0, 2.0, 0.9678828980765734, 0.769800358919501])
_SLOPE = np.array([1.0, 0.0, 1.1283791670955126, 1.0])
_SCAN = 64


@njit
def _d12(code, q):
    if code == 2:
        d1 = 1.1283791670955126 * math.exp(-q * q)
        return d1, -2.0 * q * d1
    t = math.tanh(q)
    d1 = 1.0 - t * t
    return d1, -2.0 * t * d1


@njit
def _convex_newton(code, g, dg, nu_w):
    """Unique stationary point when ``1 - nu_w f''`` stays above 0.2."""
    q = g + nu_w * dg
    t = 0.0
    d1 = 0.0
    den = 1.0
    for _ in range(60):
        if code == 2:
            d1 = 1.1283791670955126 * math.exp(-q * q)
            d2 = -2.0 * q * d1
        else:
            t = math.tanh(q)
            d1 = 1.0 - t * t
            d2 = -2.0 * t * d1
        den = 1.0 - nu_w * d2
        dq = -(q - g - nu_w * d1) / den
        q += dq
        if abs(dq) <= 1e-6 * (1.0 + abs(q)):
            # quadratic convergence leaves an error of order dq^2 in q; a
            # Taylor update carries f and f' to the new point
            t += d1 * dq + 0.5 * d2 * dq * dq
            d1 += d2 * dq
            break
    fq = math.erf(q) if code == 2 else t
    return q, fq, d1 * d1 / den


@njit
def _global_argmin(code, g, nu_w):
    """Scan the interval holding every stationary point, then refine.

    Stationary points satisfy ``q = g + nu_w f'(q)`` with ``0 < f' <= slope``,
    so they lie between ``g`` and ``g + nu_w * slope``.
    """
    a = g
    b = g + nu_w * _SLOPE[code]
    if b < a:
        a, b = b, a
    h = (b - a) / _SCAN
    best = 0
    best_v = np.inf
    for k in range(_SCAN + 1):
        x = a + k * h
        v = (g - x) * (g - x) - 2.0 * nu_w * _act(code, x)
        if v < best_v:
            best_v = v
            best = k
    lo = a + max(best - 1, 0) * h
    hi = a + min(best + 1, _SCAN) * h
    q = a + best * h
    # safeguarded Newton on phi'(q) / 2 = q - g - nu_w f'(q) inside [lo, hi]
    for _ in range(100):
        d1, d2 = _d12(code, q)
        r = q - g - nu_w * d1
        if r > 0.0:
            hi = q
        else:
            lo = q
        den = 1.0 - nu_w * d2
        qn = q - r / den if den > 0.0 else 0.5 * (lo + hi)
        if not (lo <= qn <= hi):
            qn = 0.5 * (lo + hi)
        if abs(qn - q) <= 1e-15 * (1.0 + abs(q)):
            q = qn
            break
        q = qn
    d1, d2 = _d12(code, q)
    den = 1.0 - nu_w * d2
    return q, _act(code, q), d1 * d1 / den if den > 0.0 else 0.0


@njit
def _eval_nu(code, g, dg, nu, half):
    """Constraint ``f(q)^T w``, its slope in ``nu`` and ``|g - q|^2``."""
    c = 0.0
    dc = 0.0
    dist = 0.0
    for j in range(g.size):
        wj = -1.0 if j < half else 1.0
        q, fq, sl = _coord_argmin(code, g[j], dg[j], nu * wj)
        c += wj * fq
        dc += sl
        e = g[j] - q
        dist += e * e
    return c, dc, dist


@njit
def _next_nu(x, c, dc, lo, hi, cap, tol, width_old):
    """Safeguarded Newton step aimed at the window ``[0, tol]``."""
    xn = np.nan
    if dc > 0.0:
        xn = x - (c - 0.5 * tol) / dc
    if hi == np.inf:
        if not (xn > lo):
            xn = 2.0 * x
        if xn >= cap:
            xn = 0.5 * (x + cap)
        return xn
    if not (lo < xn < hi) or (hi - lo) > 0.5 * width_old:
        xn = 0.5 * (lo + hi)
    return xn


@njit
def _relu_exact(g, half, deficit):
    """Exact ReLU projection once the first-order point is infeasible.

    The negative block lowers its positive entries by ``min(nu, g)``, the
    positive block raises its positive entries by ``nu`` and also switches on
    the ``k`` entries of ``g <= 0`` closest to zero. For each ``k`` the gain is
    piecewise linear in ``nu``; its root gives a candidate, valid when the
    ``k``-th switched entry really ends up positive. Returns ``(z, nu, k)``.
    """
    top = g[:half]
    a = np.sort(top[top > 0.0])
    m = a.size
    bottom = g[half:]
    pos = int(np.sum(bottom > 0.0))
    b = -np.sort(-bottom[bottom <= 0.0])
    A = np.zeros(m + 1)
    A2 = np.zeros(m + 1)
    for i in range(m):
        A[i + 1] = A[i] + a[i]
        A2[i + 1] = A2[i] + a[i] * a[i]
    best = np.inf
    best_nu = 0.0
    best_k = 0
    Gk = 0.0
    for k in range(b.size + 1):
        if k > 0:
            Gk += b[k - 1]
        slope = pos + k
        target = deficit - Gk
        # breakpoints a_i with gain A_i + a_i (m - i + slope) <= target
        lo = 0
        hi = m
        while lo < hi:
            mid = (lo + hi) // 2
            if A[mid] + a[mid] * (m - mid + slope) <= target:
                lo = mid + 1
            else:
                hi = mid
        j = lo
        den = m - j + slope
        if den == 0:
            nu = a[m - 1]
        else:
            nu = (target - A[j]) / den
        if k > 0 and b[k - 1] + nu <= 0.0:
            break
        z = A2[j] + nu * nu * den
        if z < best:
            best = z
            best_nu = nu
            best_k = k
    return best, best_nu, best_k


@njit
def _z1_one(code, g, polish, dg):
    d = g.size
    half = d // 2
    s = 0.0
    D = 0.0
    for j in range(d):
        wj = -1.0 if j < half else 1.0
        s += wj * _act(code, g[j])
        fp = _dact(code, g[j])
        dg[j] = fp
        D += fp * fp
    if s >= 0.0:
        return 0.0, 0, 0
    if D == 0.0:
        return 0.0, 1, 0
    nu = -s / D
    z_fo = nu * nu * D
    # first-order candidate feasibility
    c_fo = 0.0
    for j in range(d):
        wj = -1.0 if j < half else 1.0
        c_fo += wj * _act(code, g[j] + nu * wj * dg[j])
    # same slack as the polish target, so rounding of an exact zero counts as feasible
    feasible = c_fo >= -1e-12 * (1.0 - s)
    rescaled = 0 if feasible else 1
    if not polish:
        return z_fo, 0, rescaled
    if code == 0:
        z_ex, _, _ = _relu_exact(g, half, -s)
        return min(z_ex, z_fo) if feasible else z_ex, 0, rescaled
    # smallest multiplier whose exact coordinate-wise minimizer is feasible
    cap = 0.5 if code == 1 else np.inf
    tol = 1e-12 * (1.0 - s)
    lo = 0.0
    hi = np.inf
    z_hi = np.inf
    x = nu if nu < cap else 0.5 * cap
    w1 = np.inf
    w2 = np.inf
    for _ in range(200):
        c, dc, dist = _eval_nu(code, g, dg, x, half)
        if c >= 0.0:
            hi = x
            z_hi = dist
            if c <= tol:
                break
        else:
            lo = x
        if hi < np.inf and hi - lo <= 4e-16 * hi:
            break
        xn = _next_nu(x, c, dc, lo, hi, cap, tol, w2)
        w2 = w1
        w1 = hi - lo
        x = xn
    if z_hi == np.inf:
        return z_fo, 1, rescaled
    if feasible and z_fo < z_hi:
        return z_fo, 0, rescaled
    return z_hi, 0, rescaled


@njit
def _z1_batch_nb(code, G, polish, out, flags):
    dg = np.empty(G.shape[1])
    for i in range(G.shape[0]):
        z, fb, rs = _z1_one(code, G[i], polish, dg)
        out[i] = z
        flags[i, 0] = fb
        flags[i, 1] = rs


# numpy flavour of the projection, vectorized over a block of draws


def _argmin_numpy(act, g, nu_w):
    """Row-wise ``_coord_argmin``: returns ``q``, ``f(q)`` and slope shares."""
    code = act.code
    if code == 0:
        moved = np.where(nu_w <= 0.0, g > 0.0, (g >= 0.0) | (nu_w + 2.0 * g > 0.0))
        q = np.where(moved, g + nu_w, g)
        q = np.where(moved & (nu_w <= 0.0), np.maximum(q, 0.0), q)
        pos = q > 0.0
        return q, np.where(pos, q, 0.0), pos.astype(float)
    if code == 1:
        den = 1.0 - 2.0 * nu_w
        q = g / den
        return q, q * q, 4.0 * q * q / den
    f1 = act.derivative
    f2 = _second_derivative(act)
    q = g + nu_w * f1(g)
    if code in (2, 3):
        wide = np.abs(nu_w) * _CURV[code] >= 0.8
        if np.any(wide):
            q = np.where(wide, _global_argmin_numpy(act, g, nu_w, f1, f2), q)
    else:
        wide = np.zeros(np.shape(q), dtype=bool)
    for _ in range(60):
        d1 = f1(q)
        den = 1.0 - nu_w * f2(q)
        qn = np.where(den <= 0.1, g + nu_w * d1, q - (q - g - nu_w * d1) / np.where(den <= 0.1, 1.0, den))
        qn = np.where(wide, q, qn)
        done = np.all(np.abs(qn - q) <= 1e-6 * (1.0 + np.abs(qn)))
        q = qn
        if done:
            break
    d1 = f1(q)
    den = 1.0 - nu_w * f2(q)
    return q, act.value(q), np.where(den > 0.0, d1 * d1 / np.where(den > 0.0, den, 1.0), 0.0)


def _global_argmin_numpy(act, g, nu_w, f1, f2):
    """Vectorized ``_global_argmin``: grid scan plus bracketed Newton."""
    g, nu_w = np.broadcast_arrays(g, nu_w)
    a = np.minimum(g, g + nu_w * _SLOPE[act.code])
    b = np.maximum(g, g + nu_w * _SLOPE[act.code])
    h = (b - a) / _SCAN
    k = np.arange(_SCAN + 1)
    x = a[..., None] + k * h[..., None]
    v = (g[..., None] - x) ** 2 - 2.0 * nu_w[..., None] * act.value(x)
    best = np.argmin(v, axis=-1)
    lo = a + np.maximum(best - 1, 0) * h
    hi = a + np.minimum(best + 1, _SCAN) * h
    q = a + best * h
    live = np.ones(q.shape, dtype=bool)
    for _ in range(100):
        r = q - g - nu_w * f1(q)
        hi = np.where(live & (r > 0.0), q, hi)
        lo = np.where(live & (r <= 0.0), q, lo)
        den = 1.0 - nu_w * f2(q)
        qn = np.where(den > 0.0, q - r / np.where(den > 0.0, den, 1.0), 0.5 * (lo + hi))
        qn = np.where((qn >= lo) & (qn <= hi), qn, 0.5 * (lo + hi))
        step = np.abs(qn - q)
        q = np.where(live, qn, q)
        live &= step > 1e-15 * (1.0 + np.abs(q))
        if not live.any():
            break
    return q


def relu_exact_numpy(g, half, deficit):
    """Row version of ``_relu_exact``, vectorized over the count ``k``."""
    top = g[:half]
    a = np.sort(top[top > 0.0])
    m = a.size
    bottom = g[half:]
    pos = int(np.sum(bottom > 0.0))
    b = -np.sort(-bottom[bottom <= 0.0])
    A = np.concatenate([[0.0], np.cumsum(a)])
    A2 = np.concatenate([[0.0], np.cumsum(a * a)])
    k = np.arange(b.size + 1)
    Gk = np.concatenate([[0.0], np.cumsum(b)])
    slope = pos + k
    target = deficit - Gk
    lo = np.zeros(k.size, dtype=np.int64)
    hi = np.full(k.size, m, dtype=np.int64)
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        act = lo < hi
        midc = np.minimum(mid, max(m - 1, 0))
        ok = act & (A[midc] + (a[midc] if m else 0.0) * (m - midc + slope) <= target)
        lo = np.where(ok, mid + 1, lo)
        hi = np.where(act & ~ok, mid, hi)
    j = lo
    den = m - j + slope
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(den == 0, a[-1] if m else 0.0, (target - A[j]) / np.where(den == 0, 1, den))
    valid = np.ones(k.size, dtype=bool)
    valid[1:] = b + nu[1:] > 0.0
    # once a count fails, every larger count fails too
    valid = np.logical_and.accumulate(valid)
    z = np.where(valid, A2[j] + nu * nu * den, np.inf)
    i = int(np.argmin(z))
    return float(z[i]), float(nu[i]), i


def relu_exact_point(g, half, nu, k):
    """The projected point behind ``relu_exact_numpy``."""
    q = np.array(g, dtype=float)
    top = q[:half]
    top[top > 0.0] -= np.minimum(nu, top[top > 0.0])
    bottom = q[half:]
    on = bottom > 0.0
    order = np.argsort(-np.where(on, -np.inf, bottom), kind="stable")
    on[order[:k]] = True
    bottom[on] += nu
    return q


def _second_derivative(act):
    if act.code == 2:
        return lambda x: -2.0 * x * (2.0 / math.sqrt(math.pi)) * np.exp(-x * x)
    if act.code == 3:
        def tanh_dd(x):
            t = np.tanh(x)
            return -2.0 * t * (1.0 - t * t)

        return tanh_dd
    h = 1e-5
    return lambda x: (act.derivative(x + h) - act.derivative(x - h)) / (2.0 * h)


def _eval_nu_numpy(act, G, nu, w):
    q, fq, sl = _argmin_numpy(act, G, nu[:, None] * w)
    return fq @ w, sl.sum(axis=1), np.sum((G - q) ** 2, axis=1)


def z1_batch_numpy(act, G, polish, return_nu=False):
    """Vectorized ``_z1_batch_nb``; also handles activations without a code.

    With ``return_nu`` the multiplier behind each value is returned as well
    (``nan`` where the first-order point was kept).
    """
    n, d = G.shape
    half = d // 2
    w = np.concatenate([-np.ones(half), np.ones(d - half)])
    fv = act.value(G)
    fp = act.derivative(G)
    z_fo, nu, degenerate = z1_first_order_numpy(fv, fp, G)
    s = fv @ w
    q_fo = G + nu[:, None] * w * fp
    feasible = act.value(q_fo) @ w >= -1e-12 * (1.0 - s)
    need = (s < 0.0) & ~degenerate
    rescaled = need & ~feasible
    fallback = degenerate.copy()
    out = z_fo.copy()
    nu_used = np.full(n, np.nan)
    if not polish or not need.any():
        return (out, fallback, rescaled, nu_used) if return_nu else (out, fallback, rescaled)
    idx = np.flatnonzero(need)
    if act.code == 0:
        for i in idx:
            z_ex, nu_ex, _ = relu_exact_numpy(G[i], half, -s[i])
            keep_fo = feasible[i] and z_fo[i] < z_ex
            out[i] = z_fo[i] if keep_fo else z_ex
            nu_used[i] = np.nan if keep_fo else nu_ex
        return (out, fallback, rescaled, nu_used) if return_nu else (out, fallback, rescaled)
    Gs = G[idx]
    m = idx.size
    cap = 0.5 if act.code == 1 else np.inf
    tol = 1e-12 * (1.0 - s[idx])
    lo = np.zeros(m)
    hi = np.full(m, np.inf)
    z_hi = np.full(m, np.inf)
    x = np.where(nu[idx] < cap, nu[idx], 0.5 * cap)
    w1 = np.full(m, np.inf)
    w2 = np.full(m, np.inf)
    live = np.ones(m, dtype=bool)
    for _ in range(200):
        a = np.flatnonzero(live)
        if a.size == 0:
            break
        c, dc, dist = _eval_nu_numpy(act, Gs[a], x[a], w)
        ok = c >= 0.0
        hi[a] = np.where(ok, x[a], hi[a])
        z_hi[a] = np.where(ok, dist, z_hi[a])
        lo[a] = np.where(ok, lo[a], x[a])
        stop = (ok & (c <= tol[a])) | (np.isfinite(hi[a]) & (hi[a] - lo[a] <= 4e-16 * hi[a]))
        with np.errstate(divide="ignore", invalid="ignore"):
            xn = np.where(dc > 0.0, x[a] - (c - 0.5 * tol[a]) / dc, np.nan)
        open_ = hi[a] == np.inf
        grow = np.where(xn > lo[a], xn, 2.0 * x[a])
        grow = np.where(grow >= cap, 0.5 * (x[a] + cap), grow)
        bad = ~((lo[a] < xn) & (xn < hi[a])) | (hi[a] - lo[a] > 0.5 * w2[a])
        inner = np.where(bad, 0.5 * (lo[a] + hi[a]), xn)
        w2[a] = w1[a]
        w1[a] = hi[a] - lo[a]
        x[a] = np.where(open_, grow, inner)
        live[a[stop]] = False
    lost = ~np.isfinite(z_hi)
    fallback[idx[lost]] = True
    keep_fo = lost | (feasible[idx] & (z_fo[idx] < z_hi))
    out[idx] = np.where(keep_fo, z_fo[idx], z_hi)
    nu_used[idx] = np.where(keep_fo, np.nan, hi)
    return (out, fallback, rescaled, nu_used) if return_nu else (out, fallback, rescaled)


def z1_first_order_numpy(fvals, fprime, G):
    """First-order values for a block of draws, any activation."""
    half = G.shape[1] // 2
    s = fvals[:, half:].sum(axis=1) - fvals[:, :half].sum(axis=1)
    D = np.sum(fprime * fprime, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where((s < 0.0) & (D > 0.0), -s / D, 0.0)
    z = nu * nu * D
    degenerate = (s < 0.0) & (D == 0.0)
    return z, nu, degenerate


# ---------------------------------------------------------------- dispatch


def nested_log_mean(b, B, kappa, xo, wo, n_inner):
    b = np.ascontiguousarray(b, dtype=float)
    kappa = np.ascontiguousarray(kappa, dtype=float)
    if numba_enabled():
        lx, lw = _legendre(int(n_inner))
        return float(_nested_log_mean_nb(b, float(B), kappa, xo, wo, lx, lw, HALF_WIDTH))
    return nested_log_mean_numpy(b, B, kappa, xo, wo, n_inner)


def z1_batch(act, G, polish=True):
    """Projection values for the rows of ``G``.

    Returns ``(z, fallback, rescaled)``: ``fallback`` marks rows where the
    refinement gave up and the first-order value was kept, ``rescaled`` marks
    rows whose first-order point violated the constraint.
    """
    G = np.ascontiguousarray(G, dtype=float)
    if numba_enabled() and act.code >= 0:
        out = np.empty(G.shape[0])
        flags = np.zeros((G.shape[0], 2), dtype=np.int8)
        _z1_batch_nb(act.code, G, bool(polish), out, flags)
        return out, flags[:, 0].astype(bool), flags[:, 1].astype(bool)
    return z1_batch_numpy(act, G, polish)
