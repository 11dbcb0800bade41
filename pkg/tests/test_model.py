import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rankfield.model import (
    ConfigurationError, InitialLaw, ModelSpec, affine, cauchy, check_stability_condition, constant,
    entropy_observable, exp_fn, extra_assumptions, gaussian, geometric_observable, gradient_mismatch,
    lp_observable, mixture, observable_from_dict, poly_fn, polynomial, power, uniform,
    validate_assumptions, xexp_fn,
)


def spec(**kw):
    base = dict(n=10, T=1.0, dt=0.01, b=constant(0.0), sigma=constant(1.0), lam=gaussian())
    base.update(kw)
    return ModelSpec(**base)


def test_spec_json_roundtrip():
    s = spec(b=polynomial([0, 1, -1]), lam=mixture([0.3, 0.7], [-1, 2], [0.5, 1.0]), seed=42)
    assert ModelSpec.from_json(s.to_json()) == s


@pytest.mark.parametrize("kw", [dict(n=0), dict(T=0.0), dict(dt=0.0), dict(dt=2.0), dict(seed=-1)])
def test_spec_rejects_bad_values(kw):
    with pytest.raises(ConfigurationError):
        spec(**kw)


def test_missing_key_is_configuration_error():
    d = spec().to_dict()
    del d["lambda"]
    with pytest.raises(ConfigurationError):
        ModelSpec.from_dict(d)


def test_validation_clauses():
    assert validate_assumptions(spec()).passed
    rep = validate_assumptions(spec(lam=cauchy()))
    assert not rep.clauses["a"][0] and rep.clauses["b"][0]
    assert not validate_assumptions(spec(b=power(1.0, 0.5))).clauses["b"][0]
    assert not validate_assumptions(spec(sigma=affine(0.0, 1.0))).clauses["b"][0]


def test_stability_condition():
    assert check_stability_condition(affine(1.0, -2.0), 10)
    assert not check_stability_condition(affine(-1.0, 2.0), 10)
    assert not check_stability_condition(constant(0.3), 5)
    with pytest.raises(ValueError):
        check_stability_condition(constant(0.0), 1)
    assert extra_assumptions(spec(b=affine(1, -2))) == {"stability": True, "sigma_is_one": True}


@pytest.mark.parametrize("f", [constant(0.7), affine(0.5, -1.2), polynomial([0.1, 1.0, -1.0, 0.5]), power(2.0, 1.5)])
def test_coefficient_antiderivatives_by_quadrature(f):
    for r in (0.0, 0.3, 1.0):
        B = integrate.quad(lambda u: float(f(u)), 0, r)[0]
        S = integrate.quad(lambda u: 0.5 * float(f(u)) ** 2, 0, r)[0]
        assert f.antiderivative(r) == pytest.approx(B, abs=1e-9)
        assert f.half_square_antiderivative(r) == pytest.approx(S, abs=1e-9)
    h = 1e-6
    assert f.derivative(0.4) == pytest.approx((f(0.4 + h) - f(0.4 - h)) / (2 * h), rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("lam", [gaussian(0.5, 2.0), uniform(-1, 3), mixture([0.4, 0.6], [-1, 1], [0.3, 0.8])])
def test_initial_law_cdf_integral_by_quadrature(lam):
    for x in (-2.0, 0.0, 1.7):
        ref = integrate.quad(lambda y: float(lam.cdf(y)), 0, x, limit=200)[0]
        assert lam.cdf_integral(x) == pytest.approx(ref, abs=1e-9)


def test_initial_law_sampling_matches_cdf():
    rng = np.random.default_rng(0)
    lam = mixture([0.4, 0.6], [-1, 1], [0.3, 0.8])
    x = lam.sample(rng, 20000)
    assert stats.kstest(x, lambda z: lam.cdf(z)).pvalue > 1e-3


def test_initial_law_roundtrip():
    for lam in (gaussian(1, 2), uniform(0, 1), cauchy(0, 2)):
        assert InitialLaw.from_dict(lam.to_dict()) == lam


@given(st.floats(-3, 3), st.integers(0, 3))
def test_test_function_derivatives(x, k):
    for f in (exp_fn(0.5), xexp_fn(1.0), poly_fn([1, -2, 0.5, 0.25])):
        h = 1e-5
        fd = (f.d(x + h, k) - f.d(x - h, k)) / (2 * h)
        assert f.d(x, k + 1) == pytest.approx(fd, rel=1e-5, abs=1e-6)


def test_entropy_observable_hand_value():
    # J = log<e^x> - <x e^x>/<e^x> is 0 on X = (0, 0)
    obs = entropy_observable()
    assert obs.J(obs.moments(np.zeros(2))) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("obs", [entropy_observable(), lp_observable(0.3), geometric_observable()])
def test_observable_gradients_and_hessians(obs):
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0.5, 2.0, 8), rng.uniform(0.5, 2.0, 8)])
    assert gradient_mismatch(obs, pts) < 1e-6
    h = 1e-6
    for m in pts:
        H = obs.hess(m)
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd = (obs.grad(m + e) - obs.grad(m - e)) / (2 * h)
            assert np.allclose(H[:, j], fd, rtol=1e-5, atol=1e-6)


def test_observable_registry():
    assert observable_from_dict({"name": "lp", "params": {"p": 0.5}}).params["p"] == 0.5
    with pytest.raises(ConfigurationError):
        observable_from_dict({"name": "max_weight"})
    with pytest.raises(ValueError):
        lp_observable(1.0)
