"""Market weights, diversity measures and their hydrodynamic limits.

Finite-n quantities act on log-capitalizations X (or on the weights they
induce); limits act on a ``GridSlice`` of the solved density rho(t).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .hydro import DensityGrid, GridSlice
from .model import CoefficientFunction, ObservableSpec
from .particles import EmpiricalMeasure


class DomainError(ValueError):
    """Moment vector outside the domain of J."""


class TailBudgetWarning(RuntimeWarning):
    pass


def market_weights(X) -> np.ndarray:
    """Softmax along the last axis, shifted by the row maximum."""
    X = np.asarray(X, dtype=float)
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_weights(mu):
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0) or not np.allclose(mu.sum(axis=-1), 1.0, atol=1e-10):
        raise ValueError("weights must be nonnegative and sum to 1")
    return mu


def entropy(mu) -> np.ndarray | float:
    mu = _check_weights(mu)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(mu > 0, mu * np.log(np.where(mu > 0, mu, 1.0)), 0.0)
    out = -terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def lp_diversity(mu, p: float):
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    mu = _check_weights(mu)
    out = np.sum(mu ** p, axis=-1) ** (1.0 / p)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class GeometricMean:
    value: float
    zero_weight: bool = False

    def __float__(self):
        return self.value


def geometric_mean(mu) -> GeometricMean:
    """(prod mu_i)^(1/n) in log space; a zero weight gives 0 with the flag set."""
    mu = _check_weights(mu)
    if np.any(mu == 0):
        return GeometricMean(0.0, True)
    return GeometricMean(float(np.exp(np.mean(np.log(mu)))))


def _moments(measure, obs: ObservableSpec) -> np.ndarray:
    if isinstance(measure, GridSlice):
        return np.array([measure.integrate(f(measure.x)) for f in obs.fs])
    if isinstance(measure, EmpiricalMeasure):
        measure = measure.values
    return obs.moments(np.asarray(measure, dtype=float))


def general_observable(measure, obs: ObservableSpec):
    """J(<f_1, alpha>, ..., <f_k, alpha>) for a sample (rows allowed) or a grid slice."""
    m = _moments(measure, obs)
    ok = obs.domain(m)
    if not np.all(ok):
        raise DomainError(f"{obs.name}: moments {m} outside the domain of J")
    out = obs.J(m)
    return float(out) if np.ndim(out) == 0 else out


def normalized_finite(X, obs: ObservableSpec, n: int | None = None):
    """scale * J + shift, i.e. H, D_p or S of the weights generated by X."""
    X = np.asarray(X, dtype=float)
    scale, shift = obs.normalization(n or X.shape[-1])
    return scale * general_observable(X, obs) + shift


# -- limits ---------------------------------------------------------------

def _tilt_weights(sl: GridSlice, p: float) -> tuple[np.ndarray, float]:
    logw = p * sl.x
    c = logw.max()
    w = np.exp(logw - c) * sl.Rx
    Z = np.trapezoid(w, sl.x)
    return w / Z, math.log(Z) + c


def _tail_share(sl: GridSlice, p: float) -> float:
    w, _ = _tilt_weights(sl, p)
    cut = max(2, sl.x.size // 100)
    return float((np.trapezoid(w[:cut], sl.x[:cut]) + np.trapezoid(w[-cut:], sl.x[-cut:])))


@dataclass
class LimitObservables:
    t: float
    H: float
    S: float
    D: dict = field(default_factory=dict)  # p -> D_p*
    tilted: dict = field(default_factory=dict, repr=False)  # p -> normalized rho_p on the nodes
    tail_share: float = 0.0


def limiting_observables(grid: DensityGrid, t: float, p_list=(), tail_budget: float = 1e-6) -> LimitObservables:
    """H*, D_p* and S* against rho(t) = R_x(t, .) dx.

    All exponential moments are taken relative to the tilt by e^x; the share
    of tilted mass in the outer 1% of the grid on each side is reported and a
    ``TailBudgetWarning`` is raised when it exceeds ``tail_budget``.
    """
    sl = grid.slice(t)
    rho1, log_m1 = _tilt_weights(sl, 1.0)
    mean_x = np.trapezoid(sl.x * sl.Rx, sl.x)
    H = log_m1 - np.trapezoid(sl.x * rho1, sl.x)
    S = math.exp(mean_x - log_m1)
    D, tilted = {}, {1.0: rho1}
    tail = _tail_share(sl, 1.0)
    for p in p_list:
        rp, log_mp = _tilt_weights(sl, p)
        D[float(p)] = math.exp(log_mp / p - log_m1)
        tilted[float(p)] = rp
        tail = max(tail, _tail_share(sl, p))
    if tail > tail_budget:
        warnings.warn(f"tilted mass near grid edges {tail:.2e} exceeds budget {tail_budget:.0e}",
                      TailBudgetWarning)
    return LimitObservables(float(sl.t), float(H), float(S), D, tilted, tail)


def limit_value(grid: DensityGrid, t: float, which: str, p: float | None = None) -> float:
    lo = limiting_observables(grid, t, [] if p is None else [p], tail_budget=math.inf)
    if which == "H":
        return lo.H
    if which == "S":
        return lo.S
    if which in ("D", "Dp"):
        return lo.D[float(p)]
    raise ValueError(f"unknown observable {which!r}")


def limit_path(grid: DensityGrid, which: str, p: float | None = None) -> np.ndarray:
    return np.array([limit_value(grid, t, which, p) for t in grid.t])


def limiting_drift(grid: DensityGrid, b: CoefficientFunction, sigma: CoefficientFunction, t: float,
                   which: str, p: float | None = None, log: bool = False) -> float:
    """Time derivative of H*, D_p* or S* from the tilted-measure identities.

    ``log=True`` returns d log Z / dt for D_p* and S* (the bracketed factor).
    """
    sl = grid.slice(t)
    R = grid.R[grid.index_of(t)]
    bR, s2 = b(R), sigma(R) ** 2
    rho1, _ = _tilt_weights(sl, 1.0)

    def avg(v, w):
        return float(np.trapezoid(v * w, sl.x))

    g = bR + 0.5 * s2
    if which == "H":
        cov = avg(sl.x * g, rho1) - avg(sl.x, rho1) * avg(g, rho1)
        return -0.5 * avg(s2, rho1) - cov
    if which in ("D", "Dp"):
        if p is None:
            raise ValueError("D_p drift needs p")
        rp, _ = _tilt_weights(sl, p)
        rate = avg(bR + 0.5 * p * s2, rp) - avg(g, rho1)
        return rate if log else rate * limit_value(grid, t, "D", p)
    if which == "S":
        rate = avg(bR, sl.Rx) - avg(g, rho1)
        return rate if log else rate * limit_value(grid, t, "S")
    raise ValueError(f"unknown observable {which!r}")


def chebyshev_gap(nu, f, g) -> float:
    """<fg, nu> - <f, nu><g, nu>; nu is a sample, (atoms, weights) or a GridSlice."""
    if isinstance(nu, GridSlice):
        fx, gx = f(nu.x), g(nu.x)
        return nu.integrate(fx * gx) - nu.integrate(fx) * nu.integrate(gx)
    if isinstance(nu, tuple):
        atoms, w = (np.asarray(a, float) for a in nu)
        w = w / w.sum()
    else:
        atoms = np.asarray(nu, float)
        w = np.full(atoms.size, 1.0 / atoms.size)
    fx, gx = np.asarray(f(atoms), float), np.asarray(g(atoms), float)
    return float(np.sum(w * fx * gx) - np.sum(w * fx) * np.sum(w * gx))


def write_trace(path, rows) -> None:
    """rows of (t, name, finite_n_value, limit_value, drift)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "name", "finite_n_value", "limit_value", "drift"])
        for t, name, fin, lim, dr in rows:
            w.writerow([f"{t:.17g}", name, f"{fin:.17g}", f"{lim:.17g}", f"{dr:.17g}"])
