import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rankfield.hydro import GridSlice, solve_porous_medium
from rankfield.model import (
    affine, constant, entropy_observable, gaussian, geometric_observable, lp_observable, polynomial,
)
from rankfield.observables import (
    DomainError, TailBudgetWarning, chebyshev_gap, entropy, general_observable, geometric_mean,
    limit_value, limiting_drift, limiting_observables, lp_diversity, market_weights, normalized_finite,
    write_trace,
)

caps = arrays(np.float64, st.integers(2, 12), elements=st.floats(-5, 5))


@pytest.fixture(scope="module")
def heat():
    # b = 0, sigma = 1, N(0, 1) start: rho(t) = N(0, 1 + t)
    return solve_porous_medium(constant(0.0), constant(1.0), gaussian(), 1.0, dx=0.01, margin=4.0)


def test_hand_values():
    assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.5 * math.log(2), abs=1e-12)
    assert entropy([1.0, 0.0]) == 0.0
    assert lp_diversity([0.5, 0.5], 0.5) == pytest.approx(2.0, abs=1e-12)
    g = geometric_mean([0.25, 0.75])
    assert g.value == pytest.approx(math.sqrt(3) / 4, abs=1e-12) and not g.zero_weight
    assert geometric_mean([1.0, 0.0]) == type(g)(0.0, True)
    # p -> 1 recovers the total weight
    assert lp_diversity([0.2, 0.3, 0.5], 0.999) == pytest.approx(1.0, abs=5e-3)
    with pytest.raises(ValueError):
        entropy([0.6, 0.6])


@settings(max_examples=60)
@given(caps, st.floats(-20, 20))
def test_finite_observables_agree_with_weights(X, c):
    mu = market_weights(X)
    assert np.allclose(market_weights(X + c), mu, atol=1e-12)
    assert normalized_finite(X, entropy_observable()) == pytest.approx(entropy(mu), abs=1e-9)
    assert normalized_finite(X, lp_observable(0.5)) == pytest.approx(lp_diversity(mu, 0.5), rel=1e-9)
    s = normalized_finite(X, geometric_observable())
    assert s == pytest.approx(geometric_mean(mu).value, rel=1e-9)
    # AM-GM and the usual ranges
    assert s <= 1 / X.size + 1e-12
    assert -1e-12 <= entropy(mu) <= math.log(X.size) + 1e-12
    assert 1 - 1e-9 <= lp_diversity(mu, 0.5) <= X.size + 1e-9


@pytest.mark.parametrize("t", [0.0, 0.5, 1.0])
def test_gaussian_limits(heat, t):
    v = 1 + t
    lo = limiting_observables(heat, t, [0.5, 0.25])
    assert lo.H == pytest.approx(-v / 2, abs=1e-3)
    assert lo.S == pytest.approx(math.exp(-v / 2), abs=1e-3)
    for p in (0.5, 0.25):
        assert lo.D[p] == pytest.approx(math.exp(-(1 - p) * v / 2), abs=1e-3)


def test_gaussian_drifts(heat):
    assert limiting_drift(heat, constant(0.0), constant(1.0), 0.5, "H") == pytest.approx(-0.5, abs=1e-3)
    assert limiting_drift(heat, constant(0.0), constant(1.0), 0.5, "S", log=True) == pytest.approx(-0.5, abs=1e-3)
    d = limiting_drift(heat, constant(0.0), constant(1.0), 0.5, "D", p=0.5, log=True)
    assert d == pytest.approx(-0.25, abs=1e-3)


def test_drifts_match_time_differences():
    b = polynomial([0.0, 1.0, -1.0])
    g = solve_porous_medium(b, constant(1.0), gaussian(), 1.0, dx=0.01, margin=2.0)
    h = 0.01
    for which, p in (("H", None), ("S", None), ("D", 0.5)):
        fd = (limit_value(g, 0.51, which, p) - limit_value(g, 0.49, which, p)) / (2 * h)
        assert limiting_drift(g, b, constant(1.0), 0.5, which, p) == pytest.approx(fd, abs=1e-3)


def test_grid_slice_matches_particle_formula():
    # a narrow Gaussian slice behaves like its centre
    x = np.linspace(-3, 3, 6001)
    sl = GridSlice(x, np.exp(-x ** 2 / (2 * 1e-4)) / math.sqrt(2 * math.pi * 1e-4))
    assert general_observable(sl, entropy_observable()) == pytest.approx(0.0, abs=1e-3)


def test_domain_error():
    x = np.linspace(-1, 1, 11)
    with pytest.raises(DomainError):
        general_observable(GridSlice(x, np.zeros_like(x)), entropy_observable())


def test_tail_budget_warning():
    g = solve_porous_medium(constant(0.0), constant(1.0), gaussian(), 0.1, domain=(-3.0, 3.0))
    with pytest.warns(TailBudgetWarning):
        limiting_observables(g, 0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        limiting_observables(g, 0.1, tail_budget=1.0)


def test_chebyshev_gap():
    ident = lambda z: np.asarray(z, float)  # noqa: E731
    assert chebyshev_gap(np.array([0.0, 1.0]), ident, ident) == pytest.approx(0.25)
    assert chebyshev_gap((np.array([0.0, 1.0]), np.array([3.0, 1.0])), ident, ident) == pytest.approx(3 / 16)
    assert chebyshev_gap(np.array([0.0, 1.0]), ident, lambda z: -np.asarray(z)) == pytest.approx(-0.25)


@settings(max_examples=60)
@given(arrays(np.float64, 8, elements=st.floats(-3, 3)))
def test_chebyshev_sign_for_comonotone(a):
    # f, g both increasing: the covariance is nonnegative
    assert chebyshev_gap(a, np.exp, np.arctan) >= -1e-12
    assert chebyshev_gap(a, np.exp, lambda z: -np.arctan(z)) <= 1e-12


def test_entropy_decay_bound_for_monotone_speed():
    # b + sigma^2 / 2 nondecreasing: dH*/dt <= -min sigma^2 / 2
    b, s = affine(-0.5, 1.0), constant(1.0)
    g = solve_porous_medium(b, s, gaussian(), 0.5, margin=2.0)
    assert max(limiting_drift(g, b, s, t, "H") for t in g.t[::5]) <= -0.5 + 1e-6


def test_write_trace(tmp_path):
    write_trace(tmp_path / "tr.csv", [(0.0, "H", 1.0, 1.5, -0.5)])
    assert (tmp_path / "tr.csv").read_text().splitlines()[0] == "t,name,finite_n_value,limit_value,drift"
