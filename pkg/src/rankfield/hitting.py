"""Hitting times of diversity observables, finite-n and in the limit."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import partial

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .fluctuations import limit_covariance
from .hydro import DensityGrid, solve_porous_medium
from .model import CoefficientFunction, ModelSpec, ObservableSpec
from .observables import general_observable, limiting_drift
from .particles import run_replicas
from .stats import gaussian_ks


class NotHitError(ValueError):
    pass


class DegenerateSlopeError(ValueError):
    pass


@dataclass
class LimitHit:
    tau: float
    slope: float


def limit_hitting_time(times, Z, a: float, slope_fn=None, min_slope: float = 1e-6) -> LimitHit:
    """First time the limit path Z reaches a, refined by monotone cubic interpolation.

    ``slope_fn(tau)`` supplies Z'(tau) (normally from the drift identities);
    without it the interpolant's derivative is used.
    """
    times, Z = np.asarray(times, float), np.asarray(Z, float)
    d = Z - a
    pchip = PchipInterpolator(times, Z)
    if d[0] == 0:
        tau = 0.0
    else:
        hit = np.flatnonzero((np.sign(d[1:]) != np.sign(d[0])) | (d[1:] == 0))
        if hit.size == 0:
            raise NotHitError(f"level {a:g} not reached on [0, {times[-1]:g}]")
        k = hit[0] + 1
        tau = float(times[k]) if d[k] == 0 else brentq(lambda s: pchip(s) - a, times[k - 1], times[k],
                                                       xtol=1e-14)
    slope = float(slope_fn(tau)) if slope_fn is not None else float(pchip.derivative()(tau))
    if abs(slope) < min_slope:
        raise DegenerateSlopeError(
            f"|Z'(tau)| = {abs(slope):.2e} at tau={tau:g}; the hitting-time CLT does not apply")
    return LimitHit(float(tau), slope)


def _which(obs: ObservableSpec):
    if obs.name == "entropy":
        return "H", None
    if obs.name == "lp":
        return "D", obs.params["p"]
    if obs.name == "geometric":
        return "S", None
    return None, None


def admissible_level_check(b: CoefficientFunction, sigma: CoefficientFunction, which: str, a: float,
                           initial_value: float) -> tuple[bool, str]:
    """Sufficient condition: b + sigma^2/2 nondecreasing and a at or below the start."""
    r = np.linspace(0.0, 1.0, 1000)
    g = b(r) + 0.5 * sigma(r) ** 2
    if np.any(np.diff(g) < -1e-12):
        return False, "monotonicity: b + sigma^2/2 decreases somewhere on [0, 1]"
    if which in ("D", "Dp", "S") and a <= 0:
        return False, "level: must be positive for D_p and S"
    if a > initial_value:
        return False, f"level: a={a:g} exceeds the initial value {initial_value:g}"
    return True, "ok"


def empirical_hitting_time(times, path, a: float):
    """First time the linearly interpolated path equals a; +inf if it never does.

    ``path`` may carry replicas on its leading axis.
    """
    times = np.asarray(times, float)
    P = np.atleast_2d(np.asarray(path, float))
    d = P - a
    s0 = np.sign(d[:, :1])
    cross = (np.sign(d[:, 1:]) != s0) | (d[:, 1:] == 0)
    any_cross = cross.any(axis=1)
    k = np.argmax(cross, axis=1) + 1
    rows = np.arange(P.shape[0])
    d0, d1 = d[rows, k - 1], d[rows, k]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(d1 == d0, 1.0, d0 / (d0 - d1))
    tau = times[k - 1] + frac * (times[k] - times[k - 1])
    tau = np.where(any_cross, tau, np.inf)
    tau = np.where(d[:, 0] == 0, 0.0, tau)
    return float(tau[0]) if np.ndim(path) == 1 else tau


def limit_path(grid: DensityGrid, obs: ObservableSpec) -> np.ndarray:
    return np.array([general_observable(grid.slice(t), obs) for t in grid.t])


def _slope_fn(grid, b, sigma, obs):
    which, p = _which(obs)
    if which is None:
        return None
    drift = np.array([limiting_drift(grid, b, sigma, t, which, p) for t in grid.t])
    return lambda s: float(np.interp(s, grid.t, drift))


def _numerator_variance(grid, lam, b, sigma, obs, tau):
    k = int(np.searchsorted(grid.t, tau))
    if k < grid.t.size and abs(grid.t[k] - tau) < 1e-9:
        return limit_covariance(grid, lam, b, sigma, obs, float(grid.t[k])).variance
    k = min(max(k, 1), grid.t.size - 1)
    t0, t1 = grid.t[k - 1], grid.t[k]
    v0 = limit_covariance(grid, lam, b, sigma, obs, float(t0)).variance
    v1 = limit_covariance(grid, lam, b, sigma, obs, float(t1)).variance
    return v0 + (tau - t0) / (t1 - t0) * (v1 - v0)


@dataclass
class HittingReport:
    a: float
    tau: float
    slope: float
    numerator_std: float
    chi: float
    n: int
    replicas: int
    never_hit: int
    admissible: bool
    admissibility_reason: str
    empirical_mean: float
    empirical_std: float
    ks_distance: float
    degenerate_start: bool
    samples: np.ndarray = field(repr=False)

    @property
    def never_hit_fraction(self) -> float:
        return self.never_hit / self.replicas

    @property
    def mean_standard_error(self) -> float:
        return self.empirical_std / math.sqrt(max(1, self.samples.size))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d

    def write(self, json_path, csv_path=None):
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["index", "scaled_hitting_error"])
                for i, v in enumerate(self.samples):
                    w.writerow([i, f"{v:.17g}"])


def _J_record(obs, k, t, X, Xbar):
    m = obs.moments(X)
    ok = np.asarray(obs.domain(m), bool)
    out = np.full(m.shape[0], np.nan)
    out[ok] = obs.J(m[ok])
    return out


def hitting_clt_experiment(spec: ModelSpec, obs: ObservableSpec, a: float, replicas: int,
                           grid: DensityGrid | None = None, workers: int = 1, override: bool = False,
                           margin: float = 4.0) -> HittingReport:
    """sqrt(n)(tau^n - tau) against N(0, chi^2), horizon tau + 1."""
    if grid is None:
        grid = solve_porous_medium(spec.b, spec.sigma, spec.lam, spec.T, margin=margin)
    Z = limit_path(grid, obs)
    hit = limit_hitting_time(grid.t, Z, a, _slope_fn(grid, spec.b, spec.sigma, obs))
    horizon = hit.tau + 1.0
    if grid.T < horizon - 1e-12:
        grid = solve_porous_medium(spec.b, spec.sigma, spec.lam, math.ceil(horizon * 100) / 100, margin=margin)
        Z = limit_path(grid, obs)
        hit = limit_hitting_time(grid.t, Z, a, _slope_fn(grid, spec.b, spec.sigma, obs))
    which, _ = _which(obs)
    ok, reason = admissible_level_check(spec.b, spec.sigma, which or "H", a, float(Z[0]))
    if which is None:
        ok, reason = False, "unknown admissibility for this observable"
    if not ok and not override:
        raise ValueError(f"level not admissible ({reason}); pass override=True to run anyway")
    num_sd = math.sqrt(max(_numerator_variance(grid, spec.lam, spec.b, spec.sigma, obs, hit.tau), 0.0))
    chi = num_sd / abs(hit.slope)

    steps = int(math.ceil(horizon / spec.dt - 1e-9))
    sim = spec.replace(T=steps * spec.dt)
    paths = run_replicas(sim, range(replicas), partial(_J_record, obs), workers=workers)
    taus = empirical_hitting_time(sim.times(), np.nan_to_num(paths, nan=-np.inf), a)
    taus = np.atleast_1d(taus)
    late = ~np.isfinite(taus) | (taus > horizon)
    vals = math.sqrt(spec.n) * (taus[~late] - hit.tau)
    degenerate = hit.tau == 0.0
    sd = float(np.std(vals, ddof=1)) if vals.size > 1 else float("nan")
    ks = float("nan") if degenerate or chi <= 0 or vals.size == 0 else gaussian_ks(vals, 0.0, chi ** 2)
    return HittingReport(float(a), hit.tau, hit.slope, num_sd, chi, spec.n, replicas, int(late.sum()),
                         ok, reason, float(vals.mean()) if vals.size else float("nan"), sd, ks,
                         degenerate, vals)
