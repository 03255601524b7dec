import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcmcap import activations as acts
from tcmcap.errors import DomainError, QuadratureError
from tcmcap.quadrature import gauss_hermite

ALL = [acts.get(n) for n in acts.BUILTIN]


def test_eval_examples():
    assert acts.eval(acts.RELU_SPEC, -1.0) == 0.0
    assert acts.eval(acts.QUADRATIC_SPEC, 2.0) == 4.0
    assert acts.eval(acts.ERF_SPEC, 0.0) == 0.0


def test_deriv_examples():
    assert acts.deriv(acts.RELU_SPEC, 1.5) == 1.0
    assert acts.deriv(acts.RELU_SPEC, 0.0) == 1.0  # right derivative
    assert acts.deriv(acts.QUADRATIC_SPEC, 3.0) == 6.0
    assert acts.deriv(acts.TANH_SPEC, 0.0) == 1.0


def test_lookup():
    assert acts.get("ReLU") is acts.RELU_SPEC
    with pytest.raises(DomainError):
        acts.get("sigmoid")


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(ALL), st.floats(-4, 4).filter(lambda x: abs(x) > 1e-3))
def test_derivative_matches_value(act, x):
    h = 1e-6
    fd = (acts.eval(act, x + h) - acts.eval(act, x - h)) / (2 * h)
    assert abs(fd - acts.deriv(act, x)) < 1e-6


def test_closed_moments():
    m = acts.moments(acts.RELU_SPEC)
    assert (m.m1, m.m2, m.dm2) == (0.5 * math.sqrt(2 / math.pi), 0.5, 0.5)
    m = acts.moments(acts.QUADRATIC_SPEC)
    assert (m.m1, m.m2, m.dm2) == (1.0, 3.0, 4.0)
    m = acts.moments(acts.ERF_SPEC)
    assert abs(m.m2 - 0.4646) < 5e-5 and abs(m.dm2 - 0.5694) < 5e-5
    m = acts.moments(acts.TANH_SPEC)
    assert abs(m.m2 - 0.3943) < 5e-4 and abs(m.dm2 - 0.4644) < 5e-4


@pytest.mark.parametrize("act", ALL, ids=lambda a: a.name)
@pytest.mark.parametrize("order", [40, 80, 120, 240])
def test_closed_vs_quadrature(act, order):
    ref = act.closed_form_moments
    q = acts.quadrature_moments(act, order)
    for a, b in ((q.m1, ref.m1), (q.m2, ref.m2), (q.dm2, ref.dm2)):
        assert abs(a - b) < 1e-8


@pytest.mark.parametrize("act", ALL, ids=lambda a: a.name)
def test_variance_positive(act):
    assert acts.moments(act).variance > 0


@pytest.mark.parametrize("name", ["erf", "tanh"])
def test_odd_activations_center(name):
    assert abs(acts.quadrature_moments(acts.get(name)).m1) < 1e-14


def test_moment_set_validation():
    with pytest.raises(DomainError):
        acts.MomentSet(0.0, 1.0, 0.0)
    with pytest.raises(DomainError):
        acts.MomentSet(2.0, 1.0, 1.0)


def test_custom_activation_uses_quadrature():
    softplus = acts.custom("softplus_t", lambda x: np.logaddexp(0.0, x), lambda x: 0.5 * (1 + np.tanh(0.5 * np.asarray(x))))
    m = acts.moments(softplus)
    g = gauss_hermite(240)
    assert abs(m.m1 - np.sum(g.weights * np.logaddexp(0.0, g.nodes))) < 1e-10


def test_custom_registration_strips_closed_forms():
    spec = acts.ActivationSpec("relu_copy_t", acts.RELU_SPEC.value, acts.RELU_SPEC.derivative, acts.RELU_SPEC.closed_form_moments, (0.0,), acts.RELU)
    reg = acts.register(spec)
    assert reg.closed_form_moments is None and reg.code == acts.CUSTOM
    assert abs(acts.moments(reg).m1 - acts.RELU_SPEC.closed_form_moments.m1) < 1e-12
    with pytest.raises(DomainError):
        acts.register(acts.custom("relu_copy_t", np.abs, np.sign))


def test_unconverged_custom_moments():
    rough = acts.custom("rough_t", lambda x: np.abs(np.sin(7 * np.asarray(x))), lambda x: 7 * np.cos(7 * np.asarray(x)) * np.sign(np.sin(7 * np.asarray(x))))
    with pytest.raises(QuadratureError):
        acts.moments(rough, gauss_hermite(20))
