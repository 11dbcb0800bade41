import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankfield.model import (
    ModelSpec, affine, constant, entropy_observable, exp_fn, gaussian, linear_observable, lp_observable,
)
from rankfield.observables import entropy, lp_diversity, market_weights
from rankfield.portfolios import (
    ConstructionError, DegeneratePortfolioError, additive_weights, best_concentration_constant,
    concentration_constant, concentration_experiment, concentration_prefactor, dp_generator, entropy_generator,
    estimate_long_run_rates, excess_growth, fixed_time_performance_bound, generating_from_observable,
    geometric_generator, hitting_performance_bound, linear_generator, multiplicative_weights,
    quadratic_covariation_rates, relative_value, self_financing_relative_value, simulate_market,
)
from rankfield.stats import normal_tail

caps = arrays(np.float64, 5, elements=st.floats(-3, 3))
P5 = np.eye(5) - 0.2


def test_weights_closed_forms():
    mu = np.array([0.5, 0.3, 0.2])
    w = multiplicative_weights(mu, dp_generator(3, 0.5))
    assert np.allclose(w, mu ** 0.5 / np.sum(mu ** 0.5), atol=1e-12, rtol=0)
    assert np.allclose(multiplicative_weights(mu, entropy_generator(3)), -mu * np.log(mu) / entropy(mu), atol=1e-12)
    assert np.allclose(multiplicative_weights(mu, linear_generator([1, 1, 1])), mu)
    assert np.allclose(additive_weights(mu, linear_generator([2, 2, 2]), 0.0), mu)


def test_rates_two_assets():
    q = quadratic_covariation_rates(np.array([0.5, 0.5]), 1.0)
    assert np.allclose(q, [[0.125, -0.125], [-0.125, 0.125]])


@settings(max_examples=50)
@given(caps, arrays(np.float64, 5, elements=st.floats(0.1, 3)))
def test_rates_rows_and_psd(x, s):
    q = quadratic_covariation_rates(market_weights(x), s)
    assert np.allclose(q.sum(axis=1), 0, atol=1e-12)
    assert np.linalg.eigvalsh(q).min() >= -1e-12


def test_frozen_entropy_excess_growth_rate():
    # Psi_ii = -1/mu_i = -2, off-diagonal 0: 1/2 * (2 * 0.125 + 2 * 0.125) = 0.25
    mu = np.tile([0.5, 0.5], (11, 1))
    times = np.linspace(0, 1, 11)
    g = excess_growth(times, mu, np.ones(2), entropy_generator(2), "additive")
    assert np.allclose(np.diff(g) / 0.1, 0.25)
    assert np.all(excess_growth(times, mu, np.ones(2), linear_generator([1, 3]), "additive") == 0)


@settings(max_examples=40)
@given(caps)
def test_observable_generators_match_closed_forms(x):
    mu = market_weights(x)
    pairs = [(generating_from_observable(entropy_observable(), 5), entropy_generator(5)),
             (generating_from_observable(lp_observable(0.5), 5), dp_generator(5, 0.5))]
    for A, B in pairs:
        assert A(mu) == pytest.approx(B(mu), rel=1e-10)
        assert np.allclose(multiplicative_weights(mu, A), multiplicative_weights(mu, B), atol=1e-10)
        # tangent Hessians agree even though the ambient extensions differ
        assert np.allclose(P5 @ A.hess(mu) @ P5, P5 @ B.hess(mu) @ P5, atol=1e-8 * (1 + np.abs(B.hess(mu)).max()))
    assert entropy_generator(5)(mu) == pytest.approx(entropy(mu))
    assert dp_generator(5, 0.5)(mu) == pytest.approx(lp_diversity(mu, 0.5))


@settings(max_examples=40)
@given(caps, st.permutations(range(5)))
def test_generator_symmetry(x, perm):
    mu = market_weights(x)
    for G in (entropy_generator(5), dp_generator(5, 0.3), geometric_generator(5)):
        assert G(mu[list(perm)]) == pytest.approx(G(mu), rel=1e-12)


@pytest.mark.parametrize("G", [entropy_generator(6), dp_generator(6, 0.5), geometric_generator(6)])
def test_generators_positive_and_concave(G):
    assert G.is_positive() and G.is_concave()


def test_hessian_by_finite_differences():
    G = dp_generator(4, 0.5)
    mu = np.array([0.1, 0.2, 0.3, 0.4])
    h = 1e-6
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        assert np.allclose(G.hess(mu)[:, j], (G.grad(mu + e) - G.grad(mu - e)) / (2 * h), rtol=1e-5, atol=1e-6)


def test_construction_error_for_non_shift_invariant():
    with pytest.raises(ConstructionError):
        generating_from_observable(linear_observable([exp_fn(1.0)], [1.0]), 4)


def test_linear_generator_value_is_exact_buy_and_hold():
    # holding c_i mu_i / sum c mu telescopes, so the discrete wealth equals the formula exactly
    s = ModelSpec(n=4, T=0.3, dt=0.01, b=affine(1.0, -2.0), sigma=constant(1.0), lam=gaussian(), seed=5)
    _, mu, sig = simulate_market(s)
    G = linear_generator([1.0, 2.0, 3.0, 4.0])
    L = relative_value(s.times(), mu[0], sig[0], G, "multiplicative")
    assert L.V[0] == 1.0 and np.all(L.gamma == 0)
    assert np.allclose(self_financing_relative_value(mu[0], L.pi), L.V, rtol=1e-12)


def test_master_formula_small(tmp_path):
    s = ModelSpec(n=5, T=0.2, dt=0.001, b=affine(1.0, -2.0), sigma=constant(1.0), lam=gaussian(), seed=8)
    _, mu, sig = simulate_market(s)
    for mode in ("multiplicative", "additive"):
        L = relative_value(s.times(), mu[0], sig[0], entropy_generator(5), mode)
        W = self_financing_relative_value(mu[0], L.pi)
        assert abs(W[-1] / L.V[-1] - 1) < 0.01
        assert np.diff(L.gamma).min() >= -1e-8
    L.to_csv(tmp_path / "v.csv")
    assert (tmp_path / "v.csv").read_text().startswith("t,V,Gamma,Psi_value")


def test_multiplicative_needs_positive_value():
    with pytest.raises(DegeneratePortfolioError):
        multiplicative_weights(np.array([0.5, 0.5]), linear_generator([1.0, -3.0]))


def test_long_run_rates_linear_and_entropy():
    s = ModelSpec(n=4, T=1.0, dt=0.01, b=affine(1.0, -2.0), sigma=constant(1.0), lam=gaussian(), seed=1)
    assert estimate_long_run_rates(s, linear_generator([1, 1, 1, 1]), 5.0).r_mult == 0.0
    lr = estimate_long_run_rates(s, entropy_generator(4), 50.0, burn_in=5.0)
    assert lr.stable and lr.r_mult > 0


def test_concentration_prefactor_examples():
    two = lambda r: np.where(np.asarray(r) < 0.75, 1.0, -1.0)  # noqa: E731
    assert concentration_prefactor(two, 2) == 0.5
    assert concentration_prefactor(lambda r: np.full_like(np.asarray(r, float), 0.3), 7) == 0.0
    assert concentration_prefactor(affine(1.0, -2.0), 10) > 0


def test_concentration_constant_examples():
    assert concentration_constant(0.5, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0) == 0.5
    assert concentration_constant(0.5, 1e-9, 1.0, 1.0, 1.0, 1.0, 0.0) < 1e-12
    vals = [concentration_constant(0.5, r, 0.3, 0.2, 0.15, -0.05, 0.01) for r in np.linspace(0.01, 2, 50)]
    assert np.all(np.diff(vals) >= 0)
    c, eps = best_concentration_constant(0.5, 1.0, 1.0, 1.0, 1.0, 0.0)
    assert c >= 0.5
    with pytest.raises(ValueError):
        concentration_constant(0.5, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0)


def test_performance_bounds():
    # tau - s / sqrt(n) = 2
    b = hitting_performance_bound(0, 2.0 + 1.6449, 1.6449, 1, 1.0, 1.0, 0.5)
    assert b.value == pytest.approx(2 * normal_tail(1.6449) + math.exp(-1.0))
    assert b.value == pytest.approx(0.4679, abs=1e-4)
    assert hitting_performance_bound(0, 2.0, 1.0, 100, 1.0, 1.0, 0.0).value == pytest.approx(2 * normal_tail(1.0) + 1)
    f, thr = fixed_time_performance_bound(3.0, 0.0, 100, 1.0, 1.0, 0.2)
    assert f.value == pytest.approx(0.5 + math.exp(-0.6)) and thr is None
    h = hitting_performance_bound(0, 3.0 + 1.0 / 10, 1.0, 100, 1.0, 1.0, 0.2)
    f, _ = fixed_time_performance_bound(3.0, 1.0, 100, 1.0, 1.0, 0.2)
    assert h.value - f.value == pytest.approx(normal_tail(1.0))
    _, thr = fixed_time_performance_bound(1.0, 0.0, 100, 1.0, 1.0, 0.2, J_limit=2.0, psi0=2.0, r_long=0.1, r=0.1)
    assert thr == pytest.approx(1.0)


def test_concentration_experiment_smoke():
    s = ModelSpec(n=4, T=1.0, dt=0.01, b=affine(1.0, -2.0), sigma=constant(1.0), lam=gaussian(), seed=4)
    reps = concentration_experiment(s, entropy_generator(4), [0.05], [2.0], 40, burn_in=2.0, T_long=20.0)
    assert len(reps) == 1 and 0 <= reps[0].empirical <= 1 and reps[0].C == reps[0].C_up - reps[0].C_down
    with pytest.raises(ValueError):
        concentration_experiment(s.replace(b=affine(-1.0, 2.0)), entropy_generator(4), [0.05], [2.0], 4)
