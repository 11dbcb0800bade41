import math

import numpy as np
import pytest

from rankfield.fluctuations import (
    Propagator, _bridge_at, clt_experiment, exact_functional_covariance, field_rng, limit_covariance,
    safe_substep, sample_functionals, simulate_fluctuation_field, fluctuation_functional, transition_kernel,
)
from rankfield.hydro import solve_porous_medium
from rankfield.model import (
    ConfigurationError, ModelSpec, affine, constant, entropy_observable, exp_fn, gaussian, poly_fn, xexp_fn,
)

ZERO, ONE = constant(0.0), constant(1.0)
ident = poly_fn([0.0, 1.0])


@pytest.fixture(scope="module")
def heat():
    return solve_porous_medium(ZERO, ONE, gaussian(), 1.0, margin=4.0)


@pytest.fixture(scope="module")
def coarse():
    return solve_porous_medium(ZERO, ONE, gaussian(), 0.5, dx=0.05, margin=3.0)


def iid_entropy_variance(v):
    # X ~ N(0, v) i.i.d.: exact covariance of (e^X, X e^X) and the delta method for log m1 - m2 / m1
    m1, m2 = math.exp(v / 2), v * math.exp(v / 2)
    e11 = math.exp(2 * v)
    e12 = 2 * v * math.exp(2 * v)
    e22 = (v + 4 * v * v) * math.exp(2 * v)
    C = np.array([[e11 - m1 * m1, e12 - m1 * m2], [e12 - m1 * m2, e22 - m2 * m2]])
    g = np.array([1 / m1 + m2 / m1 ** 2, -1 / m1])
    return float(g @ C @ g)


def test_heat_kernel_peak_and_mass(heat):
    src = int(np.argmin(np.abs(heat.x)))
    K = transition_kernel(heat, ZERO, ONE, 0.0, times=[0.0, 1.0], sources=[src])
    assert K.p[0, 1].max() == pytest.approx(1 / math.sqrt(2 * math.pi), rel=2e-3)
    assert np.allclose(K.mass(), 1.0, atol=1e-12)
    # at t = s the kernel is the discrete delta
    assert K.p[0, 0, src] == pytest.approx(1 / heat.dx) and np.count_nonzero(K.p[0, 0]) == 1


def test_kernel_rejects_unstable_step(heat):
    with pytest.raises(ConfigurationError):
        Propagator(heat, ZERO, ONE, dt=2 * safe_substep(ZERO, ONE, heat.dx))


def test_kernel_nonnegative_with_drift():
    b = affine(1.0, -2.0)
    g = solve_porous_medium(b, ONE, gaussian(), 0.5, margin=2.0)
    K = transition_kernel(g, b, ONE, 0.0, sources=[100, 400])
    assert K.p.min() >= 0 and np.allclose(K.mass(), 1.0, atol=1e-12)


def test_bridge_variance():
    rng = field_rng(0, 0)
    u = np.array([0.1, 0.3, 0.8])
    B = np.array([_bridge_at(u, rng) for _ in range(20000)])
    assert np.allclose(B.var(axis=0), u * (1 - u), atol=0.01)
    assert np.cov(B[:, 0], B[:, 2])[0, 1] == pytest.approx(0.1 * 0.2, abs=0.01)


def test_identity_functional_variance(heat):
    # <x, rho^n - rho> for i.i.d. N(0, 1 + t): variance 1 + t
    for t in (0.0, 0.5, 1.0):
        cov = exact_functional_covariance(heat, gaussian(), ZERO, ONE, [ident], t)
        assert cov[0, 0] == pytest.approx(1 + t, rel=1e-3)


def test_linearity_constants_and_psd(heat):
    two = poly_fn([0.0, 2.0])
    cov = exact_functional_covariance(heat, gaussian(), ZERO, ONE, [ident, two, poly_fn([3.0]), exp_fn(0.5)], 0.5)
    assert cov[1, 1] == pytest.approx(4 * cov[0, 0]) and cov[0, 1] == pytest.approx(2 * cov[0, 0])
    assert np.all(cov[2] == 0)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10


def test_entropy_variance_matches_iid_oracle(heat):
    lc = limit_covariance(heat, gaussian(), ZERO, ONE, entropy_observable(), 0.5)
    assert lc.variance == pytest.approx(iid_entropy_variance(1.5), rel=5e-3)


def test_domain_and_resolution_stability():
    vals = []
    for dx, margin in ((0.02, 4.0), (0.02, 6.0), (0.04, 4.0)):
        g = solve_porous_medium(ZERO, ONE, gaussian(), 0.5, dx=dx, margin=margin)
        vals.append(limit_covariance(g, gaussian(), ZERO, ONE, entropy_observable(), 0.5).variance)
    assert vals[1] == pytest.approx(vals[0], rel=1e-4)
    assert vals[2] == pytest.approx(vals[0], rel=1e-2)


def test_monte_carlo_agrees_with_exact(coarse):
    fs = [exp_fn(1.0), xexp_fn(1.0)]
    tot, ini, noi = sample_functionals(coarse, gaussian(), ZERO, ONE, fs, 0.5, 600, seed=3)
    ex = exact_functional_covariance(coarse, gaussian(), ZERO, ONE, fs, 0.5)
    assert np.allclose(np.cov(tot, rowvar=False), ex, rtol=0.15)
    # mean zero, and the bridge part is independent of the noise part
    assert np.all(np.abs(tot.mean(axis=0)) < 4 * np.sqrt(np.diag(ex) / 600))
    assert abs(np.corrcoef(ini[:, 0], noi[:, 0])[0, 1]) < 0.15


def test_field_replicas_are_reproducible(coarse):
    a = simulate_fluctuation_field(coarse, gaussian(), ZERO, ONE, [0.0, 0.5], seed=4, replica=2)
    b = simulate_fluctuation_field(coarse, gaussian(), ZERO, ONE, [0.0, 0.5], seed=4, replica=2)
    assert np.array_equal(a.G, b.G)
    assert np.all(a.noise[0] == 0)
    assert fluctuation_functional(a, poly_fn([1.0]), 0.5) == 0.0


def test_clt_experiment_smoke(tmp_path):
    s = ModelSpec(n=50, T=0.2, dt=0.01, b=ZERO, sigma=ONE, lam=gaussian(), seed=1)
    g = solve_porous_medium(ZERO, ONE, gaussian(), 0.2, dx=0.05, margin=3.0)
    rep = clt_experiment(s, entropy_observable(), 0.2, 40, grid=g)
    assert rep.samples.size == 40 and rep.dropped_replicas == 0
    assert rep.predicted_variance == pytest.approx(iid_entropy_variance(1.2), rel=1e-2)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 41
