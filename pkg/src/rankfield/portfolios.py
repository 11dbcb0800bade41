"""Functionally generated portfolios on the rank-based market.

Generating functions act on market weights mu in the open simplex; value,
gradient and Hessian are vectorized over leading axes. Derivatives are taken
in the ambient coordinates; any two C^2 extensions off the simplex give the
same weights and excess growth, because the quadratic covariation matrix has
zero row sums and the weight formulas are invariant to adding c * (1, ..., 1)
to the gradient.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from functools import partial
from typing import Callable

import numpy as np

from .model import CoefficientFunction, ModelSpec, ObservableSpec, check_stability_condition
from .observables import market_weights
from .particles import rank_levels, run_replicas
from .stats import normal_tail, wilson_interval


class ConstructionError(ValueError):
    pass


class DegeneratePortfolioError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratingFunction:
    name: str
    n: int
    value: Callable = field(compare=False)
    grad: Callable = field(compare=False)
    hess: Callable = field(compare=False)

    def __call__(self, mu):
        return self.value(mu)

    def is_positive(self, probes: int = 200, seed: int = 0) -> bool:
        return bool(np.all(self.value(_probe_weights(self.n, probes, seed)) > 0))

    def is_concave(self, probes: int = 200, seed: int = 0, tol: float = 1e-9) -> bool:
        """Hessian restricted to the simplex tangent space is negative semidefinite at probes."""
        mu = _probe_weights(self.n, probes, seed)
        P = np.eye(self.n) - 1.0 / self.n
        Hs = P @ self.hess(mu) @ P
        return bool(np.all(np.linalg.eigvalsh(Hs) <= tol * (1 + np.abs(Hs).max())))


def _probe_weights(n, probes, seed):
    rng = np.random.default_rng(seed)
    return market_weights(rng.normal(scale=1.5, size=(probes, n)))


# -- generating functions assembled from an observable ----------------------

def _obs_parts(obs, n, mu):
    mu = np.asarray(mu, float)
    x = np.log(mu)
    m = np.stack([np.mean(f(x), axis=-1) for f in obs.fs], axis=-1)
    d1 = np.stack([f.d(x, 1) for f in obs.fs], axis=-1) / n   # (..., n, k)
    d2 = np.stack([f.d(x, 2) for f in obs.fs], axis=-1) / n
    return mu, m, d1, d2


def _obs_value(obs, n, mu):
    scale, shift = obs.normalization(n)
    x = np.log(np.asarray(mu, float))
    m = np.stack([np.mean(f(x), axis=-1) for f in obs.fs], axis=-1)
    return scale * obs.J(m) + shift


def _obs_grad(obs, n, mu):
    scale, _ = obs.normalization(n)
    mu, m, d1, _ = _obs_parts(obs, n, mu)
    gJ = obs.grad(m)
    return scale * np.einsum("...ik,...k->...i", d1, gJ) / mu


def _obs_hess(obs, n, mu):
    scale, _ = obs.normalization(n)
    mu, m, d1, d2 = _obs_parts(obs, n, mu)
    gJ, hJ = obs.grad(m), obs.hess(m)
    dm = d1 / mu[..., None]                                   # d m_k / d mu_i
    H = np.einsum("...ik,...kl,...jl->...ij", dm, hJ, dm)
    diag = np.einsum("...ik,...k->...i", d2 - d1, gJ) / mu ** 2
    return scale * (H + diag[..., None] * np.eye(mu.shape[-1]))


def generating_from_observable(obs: ObservableSpec, n: int, probes: int = 64, seed: int = 0,
                               tol: float = 1e-10) -> GeneratingFunction:
    """Psi(x) = scale * J((1/n) sum f(x_i)) + shift read as a function of mu = softmax(x).

    The (scale, shift) normalization makes the entropy observable generate H
    and the l^p observable generate D_p exactly.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=1.5, size=(probes, n))
    r = rng.normal(scale=2.0, size=(probes, 1))
    scale, shift = obs.normalization(n)

    def Psi(z):
        m = obs.moments(z)
        return scale * obs.J(m) + shift

    a, b = Psi(x), Psi(x + r)
    if not np.allclose(a, b, rtol=tol, atol=tol):
        raise ConstructionError(f"{obs.name}: J((1/n) sum f(x_i)) is not shift invariant; "
                                "it does not define a function of the market weights")
    return GeneratingFunction(obs.name, n, partial(_obs_value, obs, n), partial(_obs_grad, obs, n),
                              partial(_obs_hess, obs, n))


# -- closed-form generators ---------------------------------------------------

def _ent_value(mu):
    mu = np.asarray(mu, float)
    return -np.sum(mu * np.log(mu), axis=-1)


def _ent_grad(mu):
    return -np.log(np.asarray(mu, float)) - 1.0


def _ent_hess(mu):
    mu = np.asarray(mu, float)
    return -(1.0 / mu)[..., None] * np.eye(mu.shape[-1])


def _dp_value(mu, p):
    return np.sum(np.asarray(mu, float) ** p, axis=-1) ** (1.0 / p)


def _dp_grad(mu, p):
    mu = np.asarray(mu, float)
    s = np.sum(mu ** p, axis=-1, keepdims=True)
    return s ** (1.0 / p - 1.0) * mu ** (p - 1.0)


def _dp_hess(mu, p):
    mu = np.asarray(mu, float)
    s = np.sum(mu ** p, axis=-1)[..., None, None]
    u = mu ** (p - 1.0)
    outer = u[..., :, None] * u[..., None, :]
    diag = (p - 1.0) * mu ** (p - 2.0)
    return (1.0 - p) * s ** (1.0 / p - 2.0) * outer + s ** (1.0 / p - 1.0) * diag[..., None] * np.eye(mu.shape[-1])


def _geo_value(mu):
    return np.exp(np.mean(np.log(np.asarray(mu, float)), axis=-1))


def _geo_grad(mu):
    mu = np.asarray(mu, float)
    return _geo_value(mu)[..., None] / (mu.shape[-1] * mu)


def _geo_hess(mu):
    mu = np.asarray(mu, float)
    n = mu.shape[-1]
    S = _geo_value(mu)[..., None, None]
    inv = 1.0 / mu
    return S * (inv[..., :, None] * inv[..., None, :] / n ** 2 - np.eye(n) * (inv ** 2)[..., None] / n)


def _lin_value(mu, c):
    return np.asarray(mu, float) @ c


def _lin_grad(mu, c):
    return np.broadcast_to(c, np.shape(mu)).copy()


def _lin_hess(mu, c):
    s = np.shape(mu)
    return np.zeros(s + (s[-1],))


def entropy_generator(n: int) -> GeneratingFunction:
    return GeneratingFunction("entropy", n, _ent_value, _ent_grad, _ent_hess)


def dp_generator(n: int, p: float) -> GeneratingFunction:
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    return GeneratingFunction(f"lp({p:g})", n, partial(_dp_value, p=p), partial(_dp_grad, p=p),
                              partial(_dp_hess, p=p))


def geometric_generator(n: int) -> GeneratingFunction:
    return GeneratingFunction("geometric", n, _geo_value, _geo_grad, _geo_hess)


def linear_generator(coeffs) -> GeneratingFunction:
    c = np.asarray(coeffs, float)
    return GeneratingFunction("linear", c.size, partial(_lin_value, c=c), partial(_lin_grad, c=c),
                              partial(_lin_hess, c=c))


# -- weights and value processes ----------------------------------------------

def multiplicative_weights(mu, G: GeneratingFunction) -> np.ndarray:
    mu = np.asarray(mu, float)
    v = G.value(mu)
    if np.any(v <= 0):
        raise DegeneratePortfolioError("multiplicative generation needs Psi > 0")
    g = G.grad(mu) / np.asarray(v)[..., None]
    return (g + 1.0 - np.sum(mu * g, axis=-1, keepdims=True)) * mu


def additive_weights(mu, G: GeneratingFunction, gamma_add, offset: float = 0.0) -> np.ndarray:
    """((Psi_i - sum_j mu_j Psi_j) / (offset + Psi + Gamma+) + 1) mu_i.

    With ``offset = 0`` this is the textbook display, whose wealth starts at
    Psi(mu(0)). ``offset = 1 - Psi(mu(0))`` rescales it to start at 1, which is
    the normalization of the additive master formula.
    """
    mu = np.asarray(mu, float)
    g = G.grad(mu)
    den = offset + np.asarray(G.value(mu)) + np.asarray(gamma_add)
    if np.any(den <= 0):
        raise DegeneratePortfolioError("additive weights: nonpositive denominator")
    return ((g - np.sum(mu * g, axis=-1, keepdims=True)) / den[..., None] + 1.0) * mu


def quadratic_covariation_rates(mu, sigma_at_ranks) -> np.ndarray:
    """d[mu_i, mu_j]/dt = sum_k nu_ik nu_jk with nu_ik = mu_i (sigma_i delta_ik - mu_k sigma_k)."""
    mu = np.asarray(mu, float)
    s = np.asarray(sigma_at_ranks, float) * np.ones_like(mu)
    n = mu.shape[-1]
    nu = mu[..., :, None] * (s[..., :, None] * np.eye(n) - (mu * s)[..., None, :])
    return nu @ np.swapaxes(nu, -1, -2)


def instantaneous_rate(mu, sigma_at_ranks, G: GeneratingFunction, mode: str) -> np.ndarray:
    """sum_ij Psi_ij rate_ij, divided by Psi in multiplicative mode."""
    H = G.hess(mu)
    q = np.sum(H * quadratic_covariation_rates(mu, sigma_at_ranks), axis=(-2, -1))
    if mode == "multiplicative":
        v = np.asarray(G.value(mu))
        if np.any(v <= 0):
            raise DegeneratePortfolioError("multiplicative mode needs Psi > 0 along the path")
        return q / v
    if mode == "additive":
        return q
    raise ValueError(f"unknown mode {mode!r}")


def excess_growth(times, mu, sigma_at_ranks, G: GeneratingFunction, mode: str) -> np.ndarray:
    """Gamma(t_k) = -1/2 sum_{l<k} rate(t_l) (t_{l+1} - t_l), left-point rule."""
    q = instantaneous_rate(mu, sigma_at_ranks, G, mode)
    dt = np.diff(np.asarray(times, float))
    return np.concatenate([[0.0], np.cumsum(-0.5 * q[:-1] * dt)])


@dataclass
class PortfolioLedger:
    times: np.ndarray
    mu: np.ndarray
    pi: np.ndarray
    gamma: np.ndarray
    V: np.ndarray
    psi: np.ndarray
    mode: str

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "V", "Gamma", "Psi_value"])
            for row in zip(self.times, self.V, self.gamma, self.psi):
                w.writerow([f"{v:.17g}" for v in row])


def relative_value(times, mu, sigma_at_ranks, G: GeneratingFunction, mode: str) -> PortfolioLedger:
    """Master-formula value relative to the market, with the matching weights."""
    mu = np.asarray(mu, float)
    gamma = excess_growth(times, mu, sigma_at_ranks, G, mode)
    psi = np.asarray(G.value(mu), float)
    if mode == "multiplicative":
        V = psi / psi[0] * np.exp(gamma)
        pi = multiplicative_weights(mu, G)
    else:
        V = 1.0 + psi - psi[0] + gamma
        pi = additive_weights(mu, G, gamma, offset=1.0 - psi[0])
    return PortfolioLedger(np.asarray(times, float), mu, pi, gamma, V, psi, mode)


def self_financing_relative_value(mu, pi) -> np.ndarray:
    """Wealth relative to the market from holding pi(t_k) over [t_k, t_{k+1}]."""
    mu, pi = np.asarray(mu, float), np.asarray(pi, float)
    growth = np.sum(pi[:-1] * mu[1:] / mu[:-1], axis=-1)
    return np.concatenate([[1.0], np.cumprod(growth)])


def _x_record(k, t, X, Xbar):
    return X


def simulate_market(spec: ModelSpec, replicas=(0,), workers: int = 1):
    """Positions (replicas, steps + 1, n), market weights and sigma at ranks."""
    X = run_replicas(spec, list(replicas), _x_record, workers=workers)
    return X, market_weights(X), spec.sigma(rank_levels(X))


# -- long-run behaviour and concentration ------------------------------------

@dataclass
class LongRunRates:
    r_mult: float
    r_add: float
    tail_mult: float
    tail_add: float
    stable: bool
    rate_mult: np.ndarray = field(repr=False, default=None)
    rate_add: np.ndarray = field(repr=False, default=None)


def estimate_long_run_rates(spec: ModelSpec, G: GeneratingFunction, T_long: float, replica: int = 0,
                            burn_in: float = 0.0) -> LongRunRates:
    """Time averages Gamma(T)/T over one long path, plus the [T/2, T] window estimate."""
    stable = check_stability_condition(spec.b, spec.n)
    if not stable:
        warnings.warn("stability condition fails; long-run rates may not exist", RuntimeWarning)
    total = burn_in + T_long
    sim = spec.replace(T=total)
    _, mu, s = simulate_market(sim, [replica])
    mu, s = mu[0], s[0]
    start = int(round(burn_in / spec.dt))
    mu, s = mu[start:], s[start:]
    qm = instantaneous_rate(mu, s, G, "multiplicative")
    qa = instantaneous_rate(mu, s, G, "additive")
    half = qm.size // 2
    return LongRunRates(float(-0.5 * qm[:-1].mean()), float(-0.5 * qa[:-1].mean()),
                        float(-0.5 * qm[half:-1].mean()), float(-0.5 * qa[half:-1].mean()),
                        stable, qm, qa)


def concentration_prefactor(b, n: int) -> float:
    """min_j (sum_{i<=j} b(i/n) - (j/n) sum_i b(i/n))^2 / (2 - 2 cos(pi/n))."""
    if n < 2:
        raise ValueError("n must be at least 2")
    v = np.asarray(b(np.arange(1, n + 1) / n), float) * np.ones(n)
    j = np.arange(1, n)
    gaps = np.cumsum(v)[:-1] - j / n * v.sum()
    c = 0.0 if n == 2 else math.cos(math.pi / n)   # cos(pi/2) is 6e-17 in floating point
    return float(np.min(gaps ** 2) / (2.0 - 2.0 * c))


def concentration_constant(prefactor: float, r: float, eps: float, C: float, C_up: float, C_down: float,
                           v: float) -> float:
    if r <= 0 or eps <= 0:
        raise ValueError("r and eps must be positive")
    M = max(abs(C_up), abs(C_down))
    if C == 0 or M == 0:
        raise ValueError("range constants must be nonzero")
    if v < 0:
        raise ValueError("variance must be nonnegative")
    a = eps * (eps + v)
    second = 4 * a * (math.sqrt(1 + r * r / (2 * eps * (eps + v) ** 2 * M * M)) - 1)
    return prefactor * max(r * r / (C * C), second)


EPS_GRID = np.logspace(-3, 1, 41)


def best_concentration_constant(prefactor, r, C, C_up, C_down, v, eps_grid=EPS_GRID) -> tuple[float, float]:
    """Largest c over the eps grid; returns (c, eps)."""
    vals = [concentration_constant(prefactor, r, e, C, C_up, C_down, v) for e in eps_grid]
    i = int(np.argmax(vals))
    return float(vals[i]), float(eps_grid[i])


@dataclass
class BoundValue:
    value: float
    gaussian_term: float
    exponential_term: float
    asymptotic: bool = True   # the o_n(1) factor is taken as 0


def hitting_performance_bound(a, tau, s, n, chi, norm_ratio, c_value) -> BoundValue:
    if chi <= 0:
        raise ValueError("chi must be positive")
    g = 2.0 * normal_tail(s / chi)
    e = norm_ratio * math.exp(-c_value * (tau - s / math.sqrt(n)))
    return BoundValue(g + e, g, e)


def fixed_time_performance_bound(t, s, n, chi_t, norm_ratio, c_value, mode: str = "multiplicative",
                                 J_limit: float | None = None, psi0: float | None = None,
                                 r_long: float | None = None, r: float | None = None):
    """Bound value and, when the inputs are given, the wealth threshold it refers to."""
    if t <= 0:
        raise ValueError("t must be positive")
    if chi_t <= 0:
        raise ValueError("chi_t must be positive")
    g = normal_tail(s / chi_t)
    e = norm_ratio * math.exp(-c_value * t)
    threshold = None
    if None not in (J_limit, psi0, r_long, r):
        shifted = J_limit - s / math.sqrt(n)
        if mode == "multiplicative":
            threshold = shifted / psi0 * math.exp((r_long - r) * t)
        else:
            threshold = 1.0 + shifted - psi0 + (r_long - r) * t
    return BoundValue(g + e, g, e), threshold


@dataclass
class ConcentrationReport:
    t: float
    r: float
    mode: str
    r_long: float
    prefactor: float
    C: float
    C_up: float
    C_down: float
    v: float
    c_value: float
    eps: float
    norm_ratio: float
    bound: float
    empirical: float
    ci_low: float
    ci_high: float
    ci_half: float
    replicas: int
    vacuous: bool
    holds: bool | None
    caveat: str = "constants C, C_up, C_down, v are long-run empirical stand-ins"

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def concentration_experiment(spec: ModelSpec, G: GeneratingFunction, r_values, t_values, replicas: int,
                             norm_ratio: float = 1.0, mode: str = "multiplicative", burn_in: float = 10.0,
                             T_long: float = 200.0, constants: dict | None = None,
                             workers: int = 1) -> list[ConcentrationReport]:
    """Empirical P(Gamma(t)/t <= r_long - r) against norm_ratio * exp(-c t).

    Every replica first runs ``burn_in`` time units so that its gap process
    starts close to stationarity (norm_ratio = 1). The constants C, C_up,
    C_down, v and the long-run rate come from one separate long path unless
    ``constants`` supplies them.
    """
    if not check_stability_condition(spec.b, spec.n):
        raise ValueError("stability condition fails; the concentration estimate does not apply")
    long = estimate_long_run_rates(spec, G, T_long, replica=10 ** 6, burn_in=burn_in)
    q = long.rate_mult if mode == "multiplicative" else long.rate_add
    r_long = long.r_mult if mode == "multiplicative" else long.r_add
    k = dict(C_up=float(q.max()), C_down=float(q.min()), v=float(q.var()), r_long=r_long)
    k["C"] = k["C_up"] - k["C_down"]
    if constants:
        k.update(constants)
    pref = concentration_prefactor(spec.b, spec.n)

    t_max = max(t_values)
    sim = spec.replace(T=burn_in + t_max)
    _, mu, s = simulate_market(sim, range(replicas), workers)
    start = int(round(burn_in / spec.dt))
    times = sim.times()[start:] - burn_in
    qs = instantaneous_rate(mu[:, start:], s[:, start:], G, mode)
    reports = []
    for t in t_values:
        kt = int(round(t / spec.dt))
        gamma_t = -0.5 * np.sum(qs[:, :kt] * np.diff(times[:kt + 1]), axis=1)
        for r in r_values:
            c, eps = best_concentration_constant(pref, r, k["C"], k["C_up"], k["C_down"], k["v"])
            bound = norm_ratio * math.exp(-c * t)
            hits = int(np.sum(gamma_t / t <= k["r_long"] - r))
            lo, hi, half = wilson_interval(hits, replicas)
            emp = hits / replicas
            vac = bound >= 1.0
            reports.append(ConcentrationReport(float(t), float(r), mode, k["r_long"], pref, k["C"], k["C_up"],
                                               k["C_down"], k["v"], c, eps, norm_ratio, bound, emp, lo, hi,
                                               half, replicas, vac, None if vac else bool(emp <= bound + half)))
    return reports
