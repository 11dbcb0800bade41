"""Hydrodynamic limit: the porous medium Cauchy problem for the limiting CDF R(t, x).

The scheme is explicit and conservative. The advective flux B(R) is centred
wherever diffusion dominates at the cell scale and upwinded by the sign of the
local wave speed otherwise; under the CFL bounds this keeps every update a
convex combination, so R stays monotone in x.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import CoefficientFunction, ConfigurationError, InitialLaw


class NumericalFailure(RuntimeError):
    pass


class ExtrapolationError(ValueError):
    pass


@dataclass(frozen=True)
class GridSlice:
    """rho(t) on the nodes: density values ``Rx`` at locations ``x``."""
    x: np.ndarray
    Rx: np.ndarray
    t: float = 0.0

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def integrate(self, values) -> float:
        return float(np.trapezoid(np.asarray(values, dtype=float) * self.Rx, self.x))


@dataclass
class DensityGrid:
    t: np.ndarray   # stored times, shape (nt,)
    x: np.ndarray   # uniform nodes, shape (N,)
    R: np.ndarray   # CDF values, shape (nt, N)
    Rx: np.ndarray  # density, centred differences floored at 0
    meta: dict = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def T(self) -> float:
        return float(self.t[-1])

    def index_of(self, t: float, tol: float = 1e-9) -> int:
        k = int(np.argmin(np.abs(self.t - t)))
        if abs(self.t[k] - t) > tol * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not a stored grid time")
        return k

    def R_at(self, t: float) -> np.ndarray:
        """R(t, .) on the nodes, linear in time between stored slices."""
        if t < self.t[0] - 1e-12 or t > self.t[-1] + 1e-12:
            raise ExtrapolationError(f"time {t} outside [0, {self.T}]")
        k = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.t.size - 2))
        w = (t - self.t[k]) / (self.t[k + 1] - self.t[k])
        w = min(max(w, 0.0), 1.0)
        return (1 - w) * self.R[k] + w * self.R[k + 1]

    def Rx_at(self, t: float) -> np.ndarray:
        k = int(np.clip(np.searchsorted(self.t, t, side="right") - 1, 0, self.t.size - 2))
        w = min(max((t - self.t[k]) / (self.t[k + 1] - self.t[k]), 0.0), 1.0)
        return (1 - w) * self.Rx[k] + w * self.Rx[k + 1]

    def slice(self, t: float) -> GridSlice:
        k = self.index_of(t)
        return GridSlice(self.x, self.Rx[k], float(self.t[k]))

    def interp(self, t: float, xq) -> np.ndarray:
        """Bilinear R(t, x) for arbitrary x inside the spatial domain."""
        xq = np.asarray(xq, dtype=float)
        if xq.size and (xq.min() < self.x[0] or xq.max() > self.x[-1]):
            raise ExtrapolationError(
                f"positions in [{xq.min():.3g}, {xq.max():.3g}] leave the grid "
                f"[{self.x[0]:.3g}, {self.x[-1]:.3g}]")
        return np.interp(xq, self.x, self.R_at(t))

    def check(self, mono_tol: float = 1e-8, edge_tol: float = 1e-6, mass_tol: float = 1e-4) -> dict:
        inc = np.diff(self.R, axis=1).min()
        edge = max(np.abs(self.R[:, 0]).max(), np.abs(1 - self.R[:, -1]).max())
        mass = np.abs(self.Rx.sum(axis=1) * self.dx - 1).max()
        return {"min_increment": float(inc), "edge_error": float(edge), "mass_error": float(mass),
                "ok": bool(inc >= -mono_tol and edge <= edge_tol and mass <= mass_tol)}

    def to_csv(self, path, header_path=None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "x", "R", "Rx"])
            for k, tk in enumerate(self.t):
                for i, xi in enumerate(self.x):
                    w.writerow([f"{tk:.17g}", f"{xi:.17g}", f"{self.R[k, i]:.17g}",
                                f"{self.Rx[k, i]:.17g}"])
        if header_path is not None:
            head = {"nt": int(self.t.size), "nx": int(self.x.size), "dx": self.dx,
                    "x_min": float(self.x[0]), "x_max": float(self.x[-1]), "T": self.T, **self.meta}
            with open(header_path, "w") as fh:
                json.dump(head, fh, indent=2, sort_keys=True)


def density_from_cdf(R: np.ndarray, dx: float) -> np.ndarray:
    return np.maximum(np.gradient(R, dx, axis=-1), 0.0)


def default_domain(b: CoefficientFunction, sigma: CoefficientFunction, lam: InitialLaw,
                   T: float, margin: float = 0.0) -> tuple[float, float]:
    """Centre +- (6 spreads + drift reach + 6 sigma sqrt(T)), plus ``margin``."""
    m, s = lam.location_scale()
    if lam.family == "uniform":
        s = max(s, 1.0)
    bmax = float(np.max(np.abs(b(np.linspace(0, 1, 1001)))))
    smax = float(np.max(np.abs(sigma(np.linspace(0, 1, 1001)))))
    if lam.family == "mixture":
        w = np.asarray(lam.params["means"], float)
        sd = np.sqrt(np.asarray(lam.params["vars"], float))
        lo = float(np.min(w - 6 * sd)) - bmax * T - 6 * smax * math.sqrt(T) - margin
        hi = float(np.max(w + 6 * sd)) + bmax * T + 6 * smax * math.sqrt(T) + margin
        return lo, hi
    reach = 6 * s + bmax * T + 6 * smax * math.sqrt(T) + margin
    return m - reach, m + reach


def stability_bounds(b: CoefficientFunction, sigma: CoefficientFunction, dx: float) -> tuple[float, float]:
    """(dx^2 / (2 max Sigma'), dx / max |B'|); inf when the relevant rate is 0."""
    r = np.linspace(0, 1, 1001)
    dmax = float(np.max(0.5 * sigma(r) ** 2))
    bmax = float(np.max(np.abs(b(r))))
    diff = dx * dx / (2 * dmax) if dmax > 0 else math.inf
    adv = dx / bmax if bmax > 0 else math.inf
    return diff, adv


def _time_grid(T: float, dt: float, save_dt: float | None):
    if save_dt is None:
        steps = int(math.ceil(T / dt - 1e-9))
        return T / steps, steps, 1
    save_dt = T / max(1, int(round(T / save_dt)))
    per = int(math.ceil(save_dt / dt - 1e-9))
    return save_dt / per, int(round(T / save_dt)) * per, per


def _fluxes(R, b, sigma, dx):
    Bv = b.antiderivative(R)
    Sv = sigma.half_square_antiderivative(R)
    dR = R[1:] - R[:-1]
    mid = 0.5 * (R[1:] + R[:-1])
    small = np.abs(dR) < 1e-12
    safe = np.where(small, 1.0, dR)
    a = np.where(small, b(mid), (Bv[1:] - Bv[:-1]) / safe)
    D = np.where(small, 0.5 * sigma(mid) ** 2, (Sv[1:] - Sv[:-1]) / safe)
    absa = np.abs(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(absa > 0, np.clip(1 - 2 * D / (absa * dx), 0.0, 1.0), 0.0)
    return 0.5 * (Bv[1:] + Bv[:-1]) - 0.5 * q * absa * dR - (Sv[1:] - Sv[:-1]) / dx


def solve_porous_medium(b: CoefficientFunction, sigma: CoefficientFunction, lam: InitialLaw,
                        T: float, dx: float = 0.02, dt: float | None = None,
                        domain: tuple[float, float] | None = None, save_dt: float | None = 0.01,
                        margin: float = 0.0, mono_tol: float = 1e-8) -> DensityGrid:
    """Solve R_t = -B(R)_x + Sigma(R)_xx, R(0, .) = F_lambda on a truncated line.

    Dirichlet values 0 and 1 at the ends. ``dt`` defaults to half the tighter
    CFL bound and is shrunk so that the stored times are exact multiples of
    ``save_dt`` (every step is stored when ``save_dt`` is None).
    """
    lo, hi = domain if domain is not None else default_domain(b, sigma, lam, T, margin)
    N = int(round((hi - lo) / dx)) + 1
    x = lo + dx * np.arange(N)
    diff_bound, adv_bound = stability_bounds(b, sigma, dx)
    if dt is None:
        dt = 0.5 * min(diff_bound, adv_bound)
    elif dt > diff_bound * (1 + 1e-12) or dt > adv_bound * (1 + 1e-12):
        raise ConfigurationError(
            f"CFL violated: dt={dt:g} exceeds min(dx^2/(2 max Sigma')={diff_bound:g}, "
            f"dx/max|B'|={adv_bound:g})")
    dt, steps, per = _time_grid(T, dt, save_dt)

    R = lam.cdf(x).astype(float)
    saved_t, saved_R = [0.0], [R.copy()]
    lam_dx = dt / dx
    worst = 0.0
    for k in range(1, steps + 1):
        F = _fluxes(R, b, sigma, dx)
        Rn = R.copy()
        Rn[1:-1] = R[1:-1] - lam_dx * (F[1:] - F[:-1])
        Rn[0], Rn[-1] = 0.0, 1.0
        R = Rn
        if k % per == 0:
            worst = min(worst, float(np.diff(R).min()))
            saved_t.append(k * dt)
            saved_R.append(R.copy())
    if worst < -mono_tol:
        raise NumericalFailure(f"monotonicity lost: min increment {worst:.3e}")
    Rs = np.array(saved_R)
    grid = DensityGrid(np.array(saved_t), x, Rs, density_from_cdf(Rs, dx),
                       {"dt_pde": dt, "scheme": "explicit-conservative-hybrid-upwind",
                        "b": b.to_dict(), "sigma": sigma.to_dict(), "lambda": lam.to_dict()})
    return grid


def cole_hopf_solution(C1: float, C2: float, sigma0: float, lam: InitialLaw, x, times,
                       quad_points: int = 4001) -> DensityGrid:
    """Closed-form R for drift b(r) = 2 C1 r + C2 and constant volatility sigma0.

    R = -(sigma0^2 / (2 C1)) (log phi)_x where phi solves
    phi_t = -C2 phi_x + (sigma0^2 / 2) phi_xx with
    phi(0, x) = exp(-(2 C1 / sigma0^2) int_0^x F_lambda). The heat-kernel
    convolution is done in log space and differentiated analytically, so
    R(t, x) is a tilted average of (x - C2 t - y) / (2 C1 t).
    """
    if C1 == 0:
        raise ValueError("Cole-Hopf needs C1 != 0")
    if sigma0 <= 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    times = np.asarray(times, dtype=float)
    s2 = sigma0 ** 2
    out = np.empty((times.size, x.size))
    for k, t in enumerate(times):
        if t == 0:
            out[k] = lam.cdf(x)
            continue
        reach = 10 * sigma0 * math.sqrt(t) + 2 * abs(C1) * t + 1.0
        y = np.linspace(x[0] - C2 * t - reach, x[-1] - C2 * t + reach, quad_points)
        log_phi0 = -(2 * C1 / s2) * lam.cdf_integral(y)
        z = (x[:, None] - C2 * t) - y[None, :]
        logw = log_phi0[None, :] - z * z / (2 * s2 * t)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        tiny = w.sum(axis=1)
        if np.any(tiny <= 0):
            warnings.warn("Cole-Hopf quadrature underflow; clamping", RuntimeWarning)
        out[k] = np.clip((w * z).sum(axis=1) / tiny / (2 * C1 * t), 0.0, 1.0)
    dx = float(x[1] - x[0])
    return DensityGrid(times.copy(), x.copy(), out, density_from_cdf(out, dx),
                       {"method": "cole-hopf", "C1": C1, "C2": C2, "sigma": sigma0})


def discrete_antiderivative(g, n: int):
    """Step function r -> (1/n) sum_i g(i/n) 1{r >= i/n} on [0, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    nodes = np.arange(1, n + 1) / n
    cum = np.concatenate([[0.0], np.cumsum(np.asarray(g(nodes), dtype=float)) / n])

    def step(r):
        return cum[np.searchsorted(nodes, np.asarray(r, dtype=float), side="right")]

    return step
