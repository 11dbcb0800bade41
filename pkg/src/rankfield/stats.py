"""Distances, distribution checks and the Gaussian tail used across experiments."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special


def _sorted(u) -> np.ndarray:
    a = np.sort(np.asarray(u, dtype=float).ravel())
    if not np.all(np.isfinite(a)):
        raise ValueError("samples must be finite")
    return a


def wasserstein_p(u, v, p: float = 1.0) -> float:
    """W_p between two equal-size samples via monotone (sorted) matching."""
    if p < 1:
        raise ValueError("Wasserstein order must be >= 1")
    a, b = _sorted(u), _sorted(v)
    if a.size != b.size:
        raise ValueError("wasserstein_p needs equal sample sizes")
    return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))


def _l1_sample_vs_grid_cdf(sample: np.ndarray, x: np.ndarray, F: np.ndarray) -> float:
    # exact int |F_n - F| with F piecewise linear on the grid and 0 / 1 outside it
    n = sample.size
    pts = np.union1d(sample, x)
    u, v = pts[:-1], pts[1:]
    c = np.searchsorted(sample, u, side="right") / n
    alpha = np.interp(u, x, F, left=0.0, right=1.0)
    beta = np.interp(v, x, F, left=0.0, right=1.0)
    beta = np.where(v == x[0], 0.0, beta)  # left limit at the saturation jump
    alpha = np.where(u == x[-1], 1.0, alpha)  # right limit at the other end
    da, db = alpha - c, beta - c
    h = v - u
    same = da * db >= 0
    denom = np.where(same, 1.0, np.abs(db - da))
    area = np.where(same, h * np.abs(da + db) / 2.0, h * (da * da + db * db) / (2.0 * denom))
    return float(area.sum())


def wasserstein1(u, v) -> float:
    """W_1 on the line.

    ``u`` and ``v`` are samples, or ``v`` may be a grid CDF given as a pair
    ``(x, F)`` of node locations and CDF values. Equal-size samples use sorted
    matching; unequal samples and sample-vs-CDF use the L1 distance of CDFs.
    """
    a = _sorted(u)
    if isinstance(v, tuple):
        x, F = (np.asarray(z, dtype=float) for z in v)
        return _l1_sample_vs_grid_cdf(a, x, F)
    b = _sorted(v)
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    pts = np.union1d(a, b)
    Fa = np.searchsorted(a, pts[:-1], side="right") / a.size
    Fb = np.searchsorted(b, pts[:-1], side="right") / b.size
    return float(np.sum(np.abs(Fa - Fb) * np.diff(pts)))


def normal_tail(x):
    """Standard normal survival function, 1 - Phi(x)."""
    r = 0.5 * special.erfc(np.asarray(x, dtype=float) / math.sqrt(2.0))
    return float(r) if np.ndim(r) == 0 else r


def normal_cdf(x):
    return normal_tail(-np.asarray(x, dtype=float))


def ks_distance(sample, cdf) -> float:
    """sup |F_n - F| over the sample points, including both one-sided jumps."""
    s = _sorted(sample)
    n = s.size
    F = np.asarray(cdf(s), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def gaussian_ks(sample, mean: float, var: float) -> float:
    sd = math.sqrt(var)
    return ks_distance(sample, lambda z: normal_cdf((z - mean) / sd))


def wilson_interval(successes: int, trials: int, z: float = 1.959963984540054):
    """Wilson score interval; returns (low, high, half_width)."""
    if trials <= 0:
        raise ValueError("need at least one trial")
    ph = successes / trials
    den = 1 + z * z / trials
    centre = (ph + z * z / (2 * trials)) / den
    half = z * math.sqrt(ph * (1 - ph) / trials + z * z / (4 * trials * trials)) / den
    return centre - half, centre + half, half


def loglog_slope(ns, values) -> float:
    """Least-squares slope of log(values) against log(ns)."""
    ln, lv = np.log(np.asarray(ns, float)), np.log(np.asarray(values, float))
    return float(np.polyfit(ln, lv, 1)[0])


def running_max_tail(start, drift: float, vol: float, T: float, level: float):
    """P(sup_{[0,T]} start + drift t + vol W_t >= level), vectorized over start."""
    start = np.asarray(start, dtype=float)
    d = level - start
    out = np.ones_like(d)
    live = d > 0
    d = d[live]
    st = vol * math.sqrt(T)
    first = special.log_ndtr(-(d - drift * T) / st)
    second = 2.0 * drift * d / vol ** 2 + special.log_ndtr(-(d + drift * T) / st)
    out[live] = np.exp(np.logaddexp(first, second)).clip(max=1.0)
    return out


@dataclass
class EnvelopeReport:
    levels: np.ndarray
    estimate: np.ndarray
    std_error: np.ndarray
    envelope: np.ndarray
    holds: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(self.holds))


def envelope_probability(spec, T: float, M: float) -> float:
    """2 P(sup Y_up >= M) + 2 P(sup -Y_down >= M) for the drifted Brownian envelopes."""
    if math.isinf(M):
        return 0.0
    bmin, bmax = spec.b.bounds()
    smax = float(np.max(np.abs(spec.sigma(np.linspace(0, 1, 1001)))))
    loc, scale = spec.lam.location_scale()
    y = np.linspace(loc - 14 * scale, loc + 14 * scale, 8001)
    if spec.lam.family == "uniform":
        lo, hi = spec.lam.params["low"], spec.lam.params["high"]
        y = np.linspace(lo, hi, 8001)
    dens = spec.lam.pdf(y)
    up = np.trapezoid(dens * running_max_tail(y, bmax, smax, T, M), y)
    down = np.trapezoid(dens * running_max_tail(-y, -bmin, smax, T, M), y)
    return float(min(2 * up + 2 * down, 4.0))


def comparison_envelope_check(spec, T: float, M_grid, replicas: int, workers: int = 1) -> EnvelopeReport:
    """Monte Carlo P(sup_t |X_i| >= M) against the Brownian comparison envelope.

    The estimate pools all particles of a replica (exchangeable) and uses the
    replica-level spread for its standard error; the envelope is evaluated in
    closed form, so it carries no sampling error.
    """
    from .particles import run_replicas

    spec = spec.replace(T=T) if spec.T != T else spec
    sups = run_replicas(spec, range(replicas), _abs_positions, workers=workers)
    sup_abs = sups.max(axis=1)  # (replicas, n)
    M = np.asarray(M_grid, dtype=float)
    est, se, env = [], [], []
    for level in M:
        frac = (sup_abs >= level).mean(axis=1)
        est.append(frac.mean())
        se.append(frac.std(ddof=1) / math.sqrt(replicas) if replicas > 1 else 0.0)
        env.append(envelope_probability(spec, T, level))
    est, se, env = map(np.asarray, (est, se, env))
    return EnvelopeReport(M, est, se, env, est <= env + 3 * se)


def _abs_positions(k, t, X, Xbar):
    return np.abs(X)
