"""Model specification: rank coefficients, initial laws, test functions, observables.

Everything here is an immutable value object built from a small registry of
closed-form families, so a whole model round-trips through JSON and pickles
cleanly into worker processes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Any, Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import special


class ConfigurationError(ValueError):
    """Raised for invalid model or experiment configuration."""


# ---------------------------------------------------------------------------
# Coefficient functions b, sigma on [0, 1]
# ---------------------------------------------------------------------------

_COEFF_FAMILIES = ("constant", "affine", "polynomial", "power")
_COEFF_KEYS = {"constant": {"value"}, "affine": {"intercept", "slope"}, "polynomial": {"coeffs"},
               "power": {"scale", "exponent"}}


@dataclass(frozen=True)
class CoefficientFunction:
    """A closed-form function of the rank variable r in [0, 1].

    ``family`` is one of constant(value), affine(intercept, slope),
    polynomial(coeffs, ascending powers) or power(scale, exponent).
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _COEFF_FAMILIES:
            raise ConfigurationError(f"unknown coefficient family {self.family!r}")
        missing = _COEFF_KEYS[self.family] - set(self.params)
        if missing:
            raise ConfigurationError(f"{self.family} coefficient is missing {sorted(missing)}")
        if self.family == "power" and self.params.get("exponent", 1.0) < 0:
            raise ConfigurationError("power exponent must be >= 0")

    def __hash__(self):
        return hash((self.family, json.dumps(self.params, sort_keys=True)))

    # polynomial view (None for the power family)
    def _coeffs(self) -> np.ndarray | None:
        p = self.params
        if self.family == "constant":
            return np.array([float(p["value"])])
        if self.family == "affine":
            return np.array([float(p["intercept"]), float(p["slope"])])
        if self.family == "polynomial":
            return np.asarray(p["coeffs"], dtype=float)
        return None

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        c = self._coeffs()
        if c is not None:
            return P.polyval(r, c)
        s, a = float(self.params["scale"]), float(self.params["exponent"])
        return s * np.power(np.clip(r, 0.0, None), a)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        c = self._coeffs()
        if c is not None:
            return P.polyval(r, P.polyder(c)) if len(c) > 1 else np.zeros_like(r)
        s, a = float(self.params["scale"]), float(self.params["exponent"])
        if a == 0:
            return np.zeros_like(r)
        with np.errstate(divide="ignore"):
            return s * a * np.power(np.clip(r, 0.0, None), a - 1.0)

    def antiderivative(self, r):
        """B(r) = int_0^r b."""
        r = np.asarray(r, dtype=float)
        c = self._coeffs()
        if c is not None:
            return P.polyval(r, P.polyint(c))
        s, a = float(self.params["scale"]), float(self.params["exponent"])
        return s * np.power(np.clip(r, 0.0, None), a + 1.0) / (a + 1.0)

    def half_square_antiderivative(self, r):
        """Sigma(r) = int_0^r sigma^2 / 2."""
        r = np.asarray(r, dtype=float)
        c = self._coeffs()
        if c is not None:
            return 0.5 * P.polyval(r, P.polyint(P.polymul(c, c)))
        s, a = float(self.params["scale"]), float(self.params["exponent"])
        return 0.5 * s * s * np.power(np.clip(r, 0.0, None), 2 * a + 1.0) / (2 * a + 1.0)

    def is_constant(self) -> bool:
        c = self._coeffs()
        if c is not None:
            return bool(np.all(c[1:] == 0))
        return float(self.params["exponent"]) == 0 or float(self.params["scale"]) == 0

    def bounds(self, grid_size: int = 1001) -> tuple[float, float]:
        """(min, max) over [0, 1] on a probe grid."""
        v = self(np.linspace(0.0, 1.0, grid_size))
        return float(v.min()), float(v.max())

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "CoefficientFunction":
        return cls(d["family"], dict(d.get("params", {})))


def constant(value: float) -> CoefficientFunction:
    return CoefficientFunction("constant", {"value": float(value)})


def affine(intercept: float, slope: float) -> CoefficientFunction:
    return CoefficientFunction("affine", {"intercept": float(intercept), "slope": float(slope)})


def polynomial(coeffs: Sequence[float]) -> CoefficientFunction:
    return CoefficientFunction("polynomial", {"coeffs": [float(c) for c in coeffs]})


def power(scale: float, exponent: float) -> CoefficientFunction:
    return CoefficientFunction("power", {"scale": float(scale), "exponent": float(exponent)})


# ---------------------------------------------------------------------------
# Initial laws
# ---------------------------------------------------------------------------

_LAW_FAMILIES = ("gaussian", "uniform", "mixture", "cauchy")


def _gauss_cdf_integral(x, m, sd):
    # int_0^x Phi((s - m)/sd) ds
    def G(s):
        u = (s - m) / sd
        return sd * (u * special.ndtr(u) + np.exp(-0.5 * u * u) / math.sqrt(2 * math.pi))

    return G(np.asarray(x, dtype=float)) - G(0.0)


@dataclass(frozen=True)
class InitialLaw:
    """Law of the i.i.d. initial log-capitalizations.

    Families: gaussian(mean, var), uniform(low, high),
    mixture(weights, means, vars) and cauchy(loc, scale). The Cauchy family is
    only there so validation has a law without exponential moments to reject.
    """

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _LAW_FAMILIES:
            raise ConfigurationError(f"unknown initial law family {self.family!r}")
        p = self.params
        if self.family == "gaussian" and not p["var"] > 0:
            raise ConfigurationError("gaussian variance must be positive")
        if self.family == "uniform" and not p["high"] > p["low"]:
            raise ConfigurationError("uniform law needs low < high")
        if self.family == "mixture":
            w = np.asarray(p["weights"], dtype=float)
            if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-12):
                raise ConfigurationError("mixture weights must be nonnegative and sum to 1")
            if np.any(np.asarray(p["vars"], dtype=float) <= 0):
                raise ConfigurationError("mixture variances must be positive")
        if self.family == "cauchy" and not p["scale"] > 0:
            raise ConfigurationError("cauchy scale must be positive")

    def __hash__(self):
        return hash((self.family, json.dumps(self.params, sort_keys=True)))

    def _mix(self):
        p = self.params
        return (np.asarray(p["weights"], float), np.asarray(p["means"], float),
                np.sqrt(np.asarray(p["vars"], float)))

    @property
    def has_exponential_moments(self) -> bool:
        return self.family != "cauchy"

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.family == "gaussian":
            sd = math.sqrt(p["var"])
            return np.exp(-0.5 * ((x - p["mean"]) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        if self.family == "uniform":
            lo, hi = p["low"], p["high"]
            return np.where((x >= lo) & (x <= hi), 1.0 / (hi - lo), 0.0)
        if self.family == "mixture":
            w, m, sd = self._mix()
            z = (x[..., None] - m) / sd
            return np.sum(w * np.exp(-0.5 * z * z) / (sd * math.sqrt(2 * math.pi)), axis=-1)
        loc, g = p["loc"], p["scale"]
        return 1.0 / (math.pi * g * (1.0 + ((x - loc) / g) ** 2))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.family == "gaussian":
            return special.ndtr((x - p["mean"]) / math.sqrt(p["var"]))
        if self.family == "uniform":
            return np.clip((x - p["low"]) / (p["high"] - p["low"]), 0.0, 1.0)
        if self.family == "mixture":
            w, m, sd = self._mix()
            return np.sum(w * special.ndtr((x[..., None] - m) / sd), axis=-1)
        return 0.5 + np.arctan((x - p["loc"]) / p["scale"]) / math.pi

    def cdf_integral(self, x):
        """int_0^x F_lambda(y) dy (negative for x < 0)."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.family == "gaussian":
            return _gauss_cdf_integral(x, p["mean"], math.sqrt(p["var"]))
        if self.family == "uniform":
            lo, hi = p["low"], p["high"]

            def G(s):
                s = np.asarray(s, dtype=float)
                return np.where(s < lo, 0.0,
                                np.where(s <= hi, (s - lo) ** 2 / (2 * (hi - lo)),
                                         (hi - lo) / 2 + (s - hi)))

            return G(x) - G(0.0)
        if self.family == "mixture":
            w, m, sd = self._mix()
            return sum(wi * _gauss_cdf_integral(x, mi, si) for wi, mi, si in zip(w, m, sd))
        loc, g = p["loc"], p["scale"]

        def G(s):
            u = (np.asarray(s, dtype=float) - loc) / g
            return 0.5 * g * u + g * (u * np.arctan(u) - 0.5 * np.log1p(u * u)) / math.pi

        return G(x) - G(0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        p = self.params
        if self.family == "gaussian":
            return p["mean"] + math.sqrt(p["var"]) * rng.standard_normal(size)
        if self.family == "uniform":
            return rng.uniform(p["low"], p["high"], size)
        if self.family == "mixture":
            w, m, sd = self._mix()
            comp = rng.choice(len(w), size=size, p=w)
            return m[comp] + sd[comp] * rng.standard_normal(size)
        return p["loc"] + p["scale"] * rng.standard_cauchy(size)

    def location_scale(self) -> tuple[float, float]:
        """Centre and spread used to size the spatial domain."""
        p = self.params
        if self.family == "gaussian":
            return float(p["mean"]), math.sqrt(p["var"])
        if self.family == "uniform":
            return 0.5 * (p["low"] + p["high"]), (p["high"] - p["low"]) / math.sqrt(12)
        if self.family == "mixture":
            w, m, sd = self._mix()
            mean = float(np.sum(w * m))
            return mean, math.sqrt(float(np.sum(w * (sd ** 2 + (m - mean) ** 2))))
        return float(p["loc"]), float(p["scale"])

    def to_dict(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialLaw":
        return cls(d["family"], dict(d.get("params", {})))


def gaussian(mean: float = 0.0, var: float = 1.0) -> InitialLaw:
    return InitialLaw("gaussian", {"mean": float(mean), "var": float(var)})


def uniform(low: float, high: float) -> InitialLaw:
    return InitialLaw("uniform", {"low": float(low), "high": float(high)})


def mixture(weights, means, variances) -> InitialLaw:
    return InitialLaw("mixture", {"weights": [float(w) for w in weights],
                                  "means": [float(m) for m in means],
                                  "vars": [float(v) for v in variances]})


def cauchy(loc: float = 0.0, scale: float = 1.0) -> InitialLaw:
    return InitialLaw("cauchy", {"loc": float(loc), "scale": float(scale)})


# ---------------------------------------------------------------------------
# Model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    n: int
    T: float
    dt: float
    b: CoefficientFunction
    sigma: CoefficientFunction
    lam: InitialLaw
    seed: int = 0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ConfigurationError("n must be a positive integer")
        if not self.T > 0:
            raise ConfigurationError("horizon T must be positive")
        if not (0 < self.dt <= self.T):
            raise ConfigurationError("need 0 < dt <= T")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ConfigurationError("seed must be a 64-bit unsigned integer")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def replace(self, **changes) -> "ModelSpec":
        d = {f: getattr(self, f) for f in ("n", "T", "dt", "b", "sigma", "lam", "seed")}
        d.update(changes)
        return ModelSpec(**d)

    def to_dict(self) -> dict:
        return {"n": self.n, "T": self.T, "dt": self.dt, "seed": self.seed,
                "b": self.b.to_dict(), "sigma": self.sigma.to_dict(),
                "lambda": self.lam.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            return cls(n=int(d["n"]), T=float(d["T"]), dt=float(d["dt"]),
                       b=CoefficientFunction.from_dict(d["b"]),
                       sigma=CoefficientFunction.from_dict(d["sigma"]),
                       lam=InitialLaw.from_dict(d["lambda"]),
                       seed=int(d.get("seed", 0)))
        except KeyError as exc:
            raise ConfigurationError(f"model spec is missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Assumption checks
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    clauses: dict[str, tuple[bool, str]]

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.clauses.values())

    def __bool__(self):
        return self.passed


def _derivative_is_holder(f: CoefficientFunction, name: str) -> tuple[bool, str]:
    if f.family == "power" and not f.is_constant():
        a = float(f.params["exponent"])
        if a < 1.0:
            return False, f"{name}: r^{a:g} is not differentiable at r=0"
    # probe-grid modulus of continuity of the derivative; a heuristic only
    r = np.linspace(0.0, 1.0, 2001)
    d = f.derivative(r)
    if not np.all(np.isfinite(d)):
        return False, f"{name}: derivative not finite on [0,1]"
    jumps = np.abs(np.diff(d))
    if jumps.max(initial=0.0) > 1e3 * (r[1] - r[0]) * (1.0 + np.abs(d).max()):
        return False, f"{name}: derivative varies too fast on the probe grid"
    return True, f"{name}: {f.family} family, smooth derivative"


def validate_assumptions(spec: ModelSpec) -> ValidationReport:
    """Check the standing assumptions on the initial law and coefficients.

    Clause (a): bounded density and all exponential moments (decided by
    family membership). Clause (b): b and sigma differentiable with locally
    Hoelder derivatives, and sigma > 0.
    """
    lam = spec.lam
    if lam.has_exponential_moments:
        a = (True, f"{lam.family}: bounded density, all exponential moments finite")
    else:
        a = (False, f"{lam.family}: no finite exponential moments")

    ok_b, msg_b = _derivative_is_holder(spec.b, "b")
    ok_s, msg_s = _derivative_is_holder(spec.sigma, "sigma")
    smin, _ = spec.sigma.bounds()
    pos = smin > 0
    msgs = [msg_b, msg_s] + ([] if pos else [f"sigma: min {smin:g} is not positive"])
    return ValidationReport({"a": a, "b": (ok_b and ok_s and pos, "; ".join(msgs))})


def check_stability_condition(b: CoefficientFunction, n: int) -> bool:
    """Strict inequality of lower-rank and upper-rank average drifts for all splits."""
    if n < 2:
        raise ValueError("stability condition needs n >= 2")
    v = b(np.arange(1, n + 1) / n)
    cs = np.cumsum(v)
    i = np.arange(1, n)
    lower = cs[:-1] / i
    upper = (cs[-1] - cs[:-1]) / (n - i)
    return bool(np.all(lower > upper))


def extra_assumptions(spec: ModelSpec) -> dict:
    """Stability of the gap process plus the unit-volatility requirement."""
    stable = check_stability_condition(spec.b, spec.n) if spec.n >= 2 else False
    unit = spec.sigma.is_constant() and math.isclose(float(spec.sigma(0.5)), 1.0)
    return {"stability": stable, "sigma_is_one": unit}


# ---------------------------------------------------------------------------
# Test functions and observables
# ---------------------------------------------------------------------------

_TF_FAMILIES = ("exp", "xexp", "poly")


@dataclass(frozen=True)
class TestFunction:
    """f in the exponential-growth class, with closed-form derivatives up to order 3.

    exp(rate): e^{rate x}; xexp(rate): x e^{rate x}; poly(coeffs): ascending.
    """

    __test__ = False  # keep pytest from collecting this class

    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in _TF_FAMILIES:
            raise ConfigurationError(f"unknown test function family {self.family!r}")

    def __hash__(self):
        return hash((self.family, json.dumps(self.params, sort_keys=True)))

    def d(self, x, k: int = 0):
        """k-th derivative at x."""
        x = np.asarray(x, dtype=float)
        if self.family == "exp":
            a = float(self.params["rate"])
            return a ** k * np.exp(a * x)
        if self.family == "xexp":
            a = float(self.params["rate"])
            lead = a ** (k - 1) * k if k > 0 else 0.0
            return (a ** k * x + lead) * np.exp(a * x)
        c = np.asarray(self.params["coeffs"], dtype=float)
        for _ in range(k):
            c = P.polyder(c) if len(c) > 1 else np.zeros(1)
        return P.polyval(x, c) + np.zeros_like(x)

    def __call__(self, x):
        return self.d(x, 0)

    def growth_constant(self) -> float:
        """A C with |f^(l)(x)| <= C e^{C|x|} for l <= 3."""
        if self.family in ("exp", "xexp"):
            a = abs(float(self.params["rate"]))
            return max(1.0, a) ** 3 * 4.0 + 1.0
        c = np.abs(np.asarray(self.params["coeffs"], dtype=float))
        return float(max(1.0, c.sum() * math.factorial(max(len(c) - 1, 0))))

    def to_dict(self):
        return {"family": self.family, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["family"], dict(d.get("params", {})))


def exp_fn(rate: float = 1.0) -> TestFunction:
    return TestFunction("exp", {"rate": float(rate)})


def xexp_fn(rate: float = 1.0) -> TestFunction:
    return TestFunction("xexp", {"rate": float(rate)})


def poly_fn(coeffs: Sequence[float]) -> TestFunction:
    return TestFunction("poly", {"coeffs": [float(c) for c in coeffs]})


# J, grad J and Hessian of J for the registered observables; all act on the last axis.

def _entropy_J(m):
    m = np.asarray(m, float)
    return np.log(m[..., 0]) - m[..., 1] / m[..., 0]


def _entropy_grad(m):
    m = np.asarray(m, float)
    x1, x2 = m[..., 0], m[..., 1]
    return np.stack([1.0 / x1 + x2 / x1 ** 2, -1.0 / x1], axis=-1)


def _entropy_hess(m):
    m = np.asarray(m, float)
    x1, x2 = m[..., 0], m[..., 1]
    h11 = -1.0 / x1 ** 2 - 2.0 * x2 / x1 ** 3
    h12 = 1.0 / x1 ** 2
    return np.stack([np.stack([h11, h12], -1), np.stack([h12, np.zeros_like(x1)], -1)], -2)


def _entropy_domain(m):
    return np.asarray(m, float)[..., 0] > 0


def _lp_J(m, p):
    m = np.asarray(m, float)
    return m[..., 0] ** (1.0 / p) / m[..., 1]


def _lp_grad(m, p):
    m = np.asarray(m, float)
    x1, x2 = m[..., 0], m[..., 1]
    return np.stack([x1 ** (1.0 / p - 1.0) / (p * x2), -x1 ** (1.0 / p) / x2 ** 2], axis=-1)


def _lp_hess(m, p):
    m = np.asarray(m, float)
    x1, x2 = m[..., 0], m[..., 1]
    h11 = (1.0 / p) * (1.0 / p - 1.0) * x1 ** (1.0 / p - 2.0) / x2
    h12 = -x1 ** (1.0 / p - 1.0) / (p * x2 ** 2)
    h22 = 2.0 * x1 ** (1.0 / p) / x2 ** 3
    return np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)


def _lp_domain(m):
    m = np.asarray(m, float)
    return (m[..., 0] > 0) & (m[..., 1] > 0)


def _geo_J(m):
    m = np.asarray(m, float)
    return np.exp(m[..., 0]) / m[..., 1]


def _geo_grad(m):
    m = np.asarray(m, float)
    e = np.exp(m[..., 0])
    return np.stack([e / m[..., 1], -e / m[..., 1] ** 2], axis=-1)


def _geo_hess(m):
    m = np.asarray(m, float)
    e, x2 = np.exp(m[..., 0]), m[..., 1]
    h11, h12, h22 = e / x2, -e / x2 ** 2, 2 * e / x2 ** 3
    return np.stack([np.stack([h11, h12], -1), np.stack([h12, h22], -1)], -2)


def _geo_domain(m):
    return np.asarray(m, float)[..., 1] > 0


def _linear_J(m, c):
    return np.asarray(m, float) @ np.asarray(c, float)


def _linear_grad(m, c):
    m = np.asarray(m, float)
    return np.broadcast_to(np.asarray(c, float), m.shape).copy()


def _linear_hess(m, c):
    m = np.asarray(m, float)
    k = len(c)
    return np.zeros(m.shape[:-1] + (k, k))


def _all_real(m):
    return np.all(np.isfinite(np.asarray(m, float)), axis=-1)


def _entropy_norm(n):
    return 1.0, math.log(n)


def _lp_norm(n, p):
    return n ** ((1.0 - p) / p), 0.0


def _geo_norm(n):
    return 1.0 / n, 0.0


def _identity_norm(n):
    return 1.0, 0.0


@dataclass(frozen=True)
class ObservableSpec:
    """A macroscopic observable J(<f_1, alpha>, ..., <f_k, alpha>).

    ``normalization(n)`` returns (scale, shift) such that scale * J + shift is
    the classical finite-n quantity (H, D_p or S) when J is evaluated on the
    empirical measure of n log-capitalizations.
    """

    name: str
    fs: tuple
    J: Callable = field(compare=False)
    grad: Callable = field(compare=False)
    hess: Callable = field(compare=False)
    domain: Callable = field(compare=False)
    normalization: Callable = field(compare=False, default=_identity_norm)
    params: dict = field(default_factory=dict, compare=False)

    def __hash__(self):
        return hash((self.name, self.fs))

    @property
    def k(self) -> int:
        return len(self.fs)

    def moments(self, X, axis=-1) -> np.ndarray:
        """Sample means of each f_j along ``axis``, stacked on a new last axis."""
        X = np.asarray(X, dtype=float)
        return np.stack([np.mean(f(X), axis=axis) for f in self.fs], axis=-1)

    def to_dict(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


def entropy_observable() -> ObservableSpec:
    return ObservableSpec("entropy", (exp_fn(1.0), xexp_fn(1.0)), _entropy_J, _entropy_grad,
                          _entropy_hess, _entropy_domain, _entropy_norm)


def lp_observable(p: float) -> ObservableSpec:
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    return ObservableSpec("lp", (exp_fn(p), exp_fn(1.0)), partial(_lp_J, p=p),
                          partial(_lp_grad, p=p), partial(_lp_hess, p=p), _lp_domain,
                          partial(_lp_norm, p=p), {"p": float(p)})


def geometric_observable() -> ObservableSpec:
    return ObservableSpec("geometric", (poly_fn([0.0, 1.0]), exp_fn(1.0)), _geo_J, _geo_grad,
                          _geo_hess, _geo_domain, _geo_norm)


def linear_observable(fs: Sequence[TestFunction], coeffs: Sequence[float]) -> ObservableSpec:
    c = tuple(float(x) for x in coeffs)
    if len(c) != len(fs):
        raise ValueError("need one coefficient per test function")
    return ObservableSpec("linear", tuple(fs), partial(_linear_J, c=c), partial(_linear_grad, c=c),
                          partial(_linear_hess, c=c), _all_real, _identity_norm,
                          {"coeffs": list(c), "fs": [f.to_dict() for f in fs]})


def observable_from_dict(d: dict) -> ObservableSpec:
    name = d["name"]
    params = d.get("params", {}) or {}
    if name == "entropy":
        return entropy_observable()
    if name in ("lp", "dp"):
        return lp_observable(float(params["p"]))
    if name == "geometric":
        return geometric_observable()
    if name == "linear":
        return linear_observable([TestFunction.from_dict(f) for f in params["fs"]], params["coeffs"])
    raise ConfigurationError(f"unknown observable {name!r}")


def gradient_mismatch(obs: ObservableSpec, points: np.ndarray, h: float = 1e-6) -> float:
    """Largest relative gap between grad J and central differences of J at ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    worst = 0.0
    for m in points:
        g = obs.grad(m)
        fd = np.empty_like(g)
        for j in range(len(m)):
            e = np.zeros_like(m)
            e[j] = h * max(1.0, abs(m[j]))
            fd[j] = (obs.J(m + e) - obs.J(m - e)) / (2 * e[j])
        worst = max(worst, float(np.max(np.abs(g - fd) / np.maximum(1.0, np.abs(g)))))
    return worst
