import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcmcap import activations as acts
from tcmcap import oracle
from tcmcap.errors import DomainError


def brute_force_d2(name, g, h=1e-4, box=6.0):
    """Scan q1 on a fine lattice and take the best q2 exactly.

    With w = (-1, +1) the constraint is f(q2) >= f(q1). For the quadratic that
    means |q2| >= |q1|; for the monotone activations it means q2 >= q1, except
    that ReLU leaves q2 free once q1 <= 0.
    """
    q1 = np.arange(-box, box + h / 2, h)
    if name == "quadratic":
        a = np.abs(q1)
        q2 = np.where(abs(g[1]) >= a, g[1], np.copysign(a, g[1]))
    else:
        q2 = np.maximum(g[1], q1)
        if name == "relu":
            q2 = np.where(q1 <= 0.0, g[1], q2)
    return float(np.min((g[0] - q1) ** 2 + (g[1] - q2) ** 2))


def test_feasible_draw_is_zero():
    g = np.array([-1.0, 2.0])  # f(q)^T w = f(2) - f(-1) > 0
    for name in acts.BUILTIN:
        assert oracle.sample_z1(name, g) == 0.0


def test_d2_relu_example():
    g = [1.0, 0.0]
    # the right derivative at 0 makes |f'(g)|^2 = 2, so nu = 1/2
    assert oracle.sample_z1("relu", g, polish=False) == 0.5
    q, z = oracle.project("relu", g)
    assert np.allclose(q, [0.5, 0.5]) and z == 0.5
    assert abs(brute_force_d2("relu", np.array(g)) - 0.5) < 5e-3


@pytest.mark.parametrize("name", ["relu", "quadratic"])
def test_d2_brute_force(name):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        g = rng.standard_normal(2)
        worst = max(worst, abs(oracle.sample_z1(name, g) - brute_force_d2(name, g)))
    assert worst < 5e-3


@pytest.mark.parametrize("name", ["erf", "tanh"])
def test_d2_smooth_is_upper_bound(name):
    # saturation makes the coordinate-wise Lagrangian non-convex at small d,
    # so the value is the distance to a feasible point, never below the optimum
    rng = np.random.default_rng(5)
    w = oracle.output_weights(2)
    act = acts.get(name)
    for _ in range(100):
        g = rng.standard_normal(2)
        q, z = oracle.project(name, g)
        assert z >= brute_force_d2(name, g) - 1e-6
        assert act.value(q) @ w >= -1e-9


def test_quadratic_first_order_formula():
    rng = np.random.default_rng(8)
    g = rng.standard_normal(64)
    w = oracle.output_weights(64)
    for t in (0.5, 1.0, 3.0):
        x = t * g
        s = float((x * x) @ w)
        fo = oracle.sample_z1("quadratic", x, polish=False)
        expect = max(-s, 0.0) ** 2 / float(np.sum((2 * x) ** 2))
        assert abs(fo - expect) < 1e-12 * max(1.0, expect)
        if s < 0:
            # the first-order value scales as t^2
            assert abs(fo / oracle.sample_z1("quadratic", g, polish=False) - t * t) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(acts.BUILTIN), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_nonnegative_and_feasible(name, half, seed):
    g = np.random.default_rng(seed).standard_normal(2 * half)
    q, z = oracle.project(name, g)
    assert z >= 0.0
    assert abs(z - oracle.sample_z1(name, g)) <= 1e-5 * max(1.0, z)
    f = acts.get(name).value(q)
    w = oracle.output_weights(g.size)
    if float(acts.get(name).value(g) @ w) >= 0:
        assert z == 0.0
    else:
        assert float(f @ w) >= -1e-9 * np.linalg.norm(f)


def test_polish_correction_vanishes_with_d():
    """The first-order point is infeasible in about half of the draws at every
    d (its constraint value is O(nu^2) < 0 for the quadratic), but the change
    needed to restore feasibility shrinks relative to z as d grows."""
    rel = {}
    for d in (64, 4096):
        rng = np.random.default_rng(d)
        G = rng.standard_normal((300, d))
        out = []
        for g in G:
            z_fo = oracle.sample_z1("tanh", g, polish=False)
            if z_fo > 0:
                out.append(abs(oracle.sample_z1("tanh", g) - z_fo) / z_fo)
        rel[d] = float(np.mean(out))
    assert rel[4096] < 0.25 * rel[64]


def test_config_validation():
    with pytest.raises(DomainError):
        oracle.McConfig(63, 10)
    with pytest.raises(DomainError):
        oracle.McConfig(0, 10)
    with pytest.raises(DomainError):
        oracle.McConfig(4, 0)
    with pytest.raises(DomainError):
        oracle.sample_z1("relu", [1.0, 2.0, 3.0])


def test_seeded_determinism():
    cfg = oracle.McConfig(64, 1500, seed=1)
    a = oracle.mc_estimate("quadratic", cfg)
    b = oracle.mc_estimate("quadratic", cfg)
    assert a == b


def test_stderr_definition():
    cfg = oracle.McConfig(16, 700, seed=3, chunk=128)
    est = oracle.mc_estimate("erf", cfg)
    z = np.concatenate([oracle.z1_batch(acts.ERF_SPEC, G, True)[0] for G in oracle._chunks(cfg)])
    assert abs(est.mean - z.mean()) < 1e-15
    assert abs(est.stderr - z.std(ddof=1) / math.sqrt(z.size)) < 1e-15


def test_seed_consistency():
    a = oracle.mc_estimate("relu", oracle.McConfig(256, 3000, seed=1))
    b = oracle.mc_estimate("relu", oracle.McConfig(256, 3000, seed=2))
    assert abs(a.mean - b.mean) < 4 * math.hypot(a.stderr, b.stderr)


def test_study_order():
    with pytest.raises(DomainError):
        oracle.convergence_study("relu", [256, 64], 10)
    st_ = oracle.convergence_study("relu", [8, 32], 200, seed=4)
    assert [e.d for e in st_] == [8, 32]
