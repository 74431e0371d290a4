"""Special functions for the critical 2d disorder regime.

The central objects are the density ``f_s(t)`` of the Dickman subordinator
(the pure-jump process with Levy measure ``x^{-1} 1_{(0,1)} dx``), the
exponentially tilted renewal density

    G_theta(t) = int_0^inf  e^{(theta-gamma) s} * s * t^(s-1) / Gamma(s+1)  ds,

its Laplace transform (analytically ``1/(log lam - theta + gamma)`` for
``lam > e^(theta-gamma)``), its small-t expansion

    G_theta(t) ~ 1/(t log^2(1/t)) * (1 + 2 theta / log(1/t)),

and the 2d heat kernel ``g_t(x) = exp(-|x|^2/(2t))/(2 pi t)``.

Time arguments are plain positive floats.  All evaluations are pure
functions; the only cached state is the read-only interpolation table built
by :class:`RenewalInterpolant`.

Numerical strategy for ``G_theta``: for ``t < 1/2`` the substitution
``u = s*log(1/t)`` turns the s-integral into a well-scaled exponential
integral; for moderate ``t`` the integrand ``exp((theta-gamma)s + log s +
(s-1)log t - lgamma(s+1))`` is integrated directly with a scanned
truncation point (the ``1/Gamma`` factor decays superexponentially).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.special import gammaln

from .errors import ConfigurationError, DomainError, NumericalError

# Euler-Mascheroni constant, hard-coded reference (16 significant digits).
EULER_GAMMA = 0.5772156649015329

# Where the small-t branch hands over to the asymptotic expansion
# (x = log(1/t); beyond this the two agree to better than 1e-9 absolute
# contribution in every integral handled here).
_X_ASYMPTOTIC = 400.0


@dataclass(frozen=True)
class DickmanParameter:
    """Disorder strength ``theta`` plus the Euler constant."""

    theta: float
    euler_gamma: float = EULER_GAMMA

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise ConfigurationError("theta must be finite")
        if abs(self.euler_gamma - EULER_GAMMA) > 5e-13:
            raise ConfigurationError(
                "euler_gamma does not match the reference value to 12 digits"
            )


@dataclass(frozen=True)
class QuadratureConfig:
    """Tolerances shared by the adaptive quadratures.

    ``singularity_substitution`` controls whether the ``u = s log(1/t)``
    change of variables is applied on the small-t branch of the renewal
    density; disabling it is useful only for cross-checks.
    """

    rel_tol: float = 1e-9
    abs_tol: float = 0.0
    max_subdivisions: int = 200
    singularity_substitution: bool = True

    def __post_init__(self):
        if self.rel_tol <= 0:
            raise ConfigurationError("rel_tol must be > 0")
        if self.abs_tol < 0:
            raise ConfigurationError("abs_tol must be >= 0")
        if self.max_subdivisions < 1:
            raise ConfigurationError("max_subdivisions must be >= 1")


DEFAULT_QUADRATURE = QuadratureConfig()
#: Looser preset for quadratures nested inside other quadratures.
NESTED_QUADRATURE = QuadratureConfig(rel_tol=1e-7)


def gamma_fn(s: float) -> float:
    """Gamma function on the positive half line."""
    if s <= 0:
        raise DomainError(f"gamma_fn requires s > 0, got {s}")
    return math.gamma(s)


def heat_kernel(t: float, x) -> float:
    """2d heat kernel g_t(x) = exp(-|x|^2/(2t)) / (2 pi t)."""
    if t <= 0:
        raise DomainError(f"heat_kernel requires t > 0, got {t}")
    x = np.asarray(x, dtype=float)
    r2 = float(x[0]) ** 2 + float(x[1]) ** 2
    return math.exp(-r2 / (2.0 * t)) / (2.0 * math.pi * t)


def dickman_density(s: float, t: float, params: DickmanParameter,
                    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """Density f_s(t) of the Dickman subordinator at time s.

    For ``t <= 1`` this is the closed form ``s t^(s-1) e^(-gamma s) /
    Gamma(s+1)``.  For ``t >= 1`` the delay term ``s t^(s-1) *
    int_0^(t-1) f_s(a) / (1+a)^s da`` is subtracted; the integral is
    evaluated recursively (one extra level of quadrature per unit of t),
    which keeps the two branches continuous at ``t = 1``.
    """
    if s <= 0:
        raise DomainError(f"dickman_density requires s > 0, got {s}")
    if t <= 0:
        raise DomainError(f"dickman_density requires t > 0, got {t}")
    g = params.euler_gamma
    lead = s * t ** (s - 1.0) * math.exp(-g * s - gammaln(s + 1.0))
    if t <= 1.0:
        return lead
    def integrand(a):
        return dickman_density(s, a, params, quad_cfg) / (1.0 + a) ** s
    val, err = quad(integrand, 0.0, t - 1.0,
                    epsabs=quad_cfg.abs_tol, epsrel=max(quad_cfg.rel_tol, 1e-10),
                    limit=quad_cfg.max_subdivisions)
    if not math.isfinite(val):
        raise NumericalError("delay-term quadrature failed", achieved_error=err)
    return lead - s * t ** (s - 1.0) * val


def _renewal_integral_small_t(t: float, theta: float, g: float,
                              quad_cfg: QuadratureConfig) -> tuple[float, float]:
    """G_theta(t) for t < 1/2 via the u = s log(1/t) substitution."""
    L = math.log(1.0 / t)
    c = 1.0 - (theta - g) / L

    def integrand(u):
        return u * math.exp(-c * u - gammaln(u / L + 1.0))

    upper = 60.0 / max(c, 0.05)
    while integrand(upper) > 1e-300 and upper < 1e7:
        upper *= 2.0
    val, err = quad(integrand, 0.0, upper,
                    epsabs=quad_cfg.abs_tol, epsrel=quad_cfg.rel_tol,
                    limit=quad_cfg.max_subdivisions)
    scale = t * L * L
    return val / scale, err / scale


def _renewal_integral_direct(t: float, theta: float, g: float,
                             quad_cfg: QuadratureConfig) -> tuple[float, float]:
    """G_theta(t) by direct s-integration (used for t >= 1/2, any t)."""
    lt = math.log(t)

    def log_integrand(s):
        return (theta - g) * s + math.log(s) + (s - 1.0) * lt - gammaln(s + 1.0)

    s_peak = max(1.0, t * math.exp(theta - g))
    peak = log_integrand(s_peak)
    s_max = 2.0 * s_peak + 8.0
    while log_integrand(s_max) - peak > -80.0:
        s_max *= 1.5
        if s_max > 1e9:
            raise NumericalError("renewal integrand truncation scan failed")

    def integrand(s):
        return math.exp(log_integrand(s))

    pts = [s_peak] if 0.0 < s_peak < s_max else None
    val, err = quad(integrand, 0.0, s_max,
                    epsabs=quad_cfg.abs_tol, epsrel=quad_cfg.rel_tol,
                    limit=quad_cfg.max_subdivisions, points=pts)
    return val, err


def _renewal_density_any_t(t: float, params: DickmanParameter,
                           quad_cfg: QuadratureConfig) -> float:
    """Renewal density without the working-range cap (internal use)."""
    g = params.euler_gamma
    if t < 0.5 and quad_cfg.singularity_substitution:
        val, _ = _renewal_integral_small_t(t, params.theta, g, quad_cfg)
    else:
        val, _ = _renewal_integral_direct(t, params.theta, g, quad_cfg)
    return val


def renewal_density(t: float, params: DickmanParameter,
                    quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """Tilted renewal density G_theta(t) on the working range 0 < t <= 2.

    All collision-diagram integrals evaluate G on ``[0, 1 + 2 eps^2]``,
    so arguments beyond 2 are rejected rather than supported.
    """
    if t <= 0:
        raise DomainError(f"renewal_density requires t > 0, got {t}")
    if t > 2.0:
        raise DomainError(f"renewal_density working range is t <= 2, got {t}")
    val = _renewal_density_any_t(t, params, quad_cfg)
    if not math.isfinite(val) or val <= 0.0:
        raise NumericalError(f"renewal density quadrature failed at t={t}")
    return val


def renewal_asymptotic(t: float, params: DickmanParameter) -> float:
    """Two-term small-t expansion (1/(t log^2(1/t))) (1 + 2 theta/log(1/t))."""
    if t <= 0 or t >= 1:
        raise DomainError(f"renewal_asymptotic requires 0 < t < 1, got {t}")
    L = math.log(1.0 / t)
    return (1.0 + 2.0 * params.theta / L) / (t * L * L)


class LaplaceCheck(NamedTuple):
    quadrature: float
    analytic: float
    quad_error: float


def laplace_transform_renewal(lam: float, params: DickmanParameter,
                              quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE
                              ) -> LaplaceCheck:
    """Laplace transform int_0^inf e^(-lam t) G_theta(t) dt by quadrature.

    Returns the numerical value together with the analytic expression
    ``1/(log lam - theta + gamma)`` so callers can compare the two routes.
    The transform converges only for ``lam > e^(theta - gamma)`` (the
    renewal density grows like ``e^(t e^(theta-gamma))`` at infinity).

    The t-integral is split at 1: below, the substitution ``t = e^(-x)``
    regularises the ``1/(t log^2 t)`` endpoint (with the two-term expansion
    taking over beyond ``x = 400``); above, the integrand decays like
    ``e^(-(lam - e^(theta-gamma)) t)`` and is truncated accordingly.
    """
    g = params.euler_gamma
    theta = params.theta
    lam_star = math.exp(theta - g)
    if lam <= lam_star:
        raise DomainError(
            f"laplace transform diverges for lam <= e^(theta-gamma) = {lam_star:.6g}"
        )

    def small_t_integrand(x):
        if x > _X_ASYMPTOTIC:
            return (1.0 + 2.0 * theta / x) / (x * x)
        t = math.exp(-x)
        return math.exp(-lam * t) * _renewal_density_any_t(t, params, quad_cfg) * t

    v1, e1 = quad(small_t_integrand, 0.0, np.inf,
                  epsabs=max(quad_cfg.abs_tol, 1e-13), epsrel=quad_cfg.rel_tol,
                  limit=max(quad_cfg.max_subdivisions, 300))

    horizon = 1.0 + 45.0 / (lam - lam_star)

    def large_t_integrand(t):
        return math.exp(-lam * t) * _renewal_density_any_t(t, params, quad_cfg)

    v2, e2 = quad(large_t_integrand, 1.0, horizon,
                  epsabs=max(quad_cfg.abs_tol, 1e-13), epsrel=quad_cfg.rel_tol,
                  limit=max(quad_cfg.max_subdivisions, 300))

    total = v1 + v2
    analytic = 1.0 / (math.log(lam) - theta + g)
    if not math.isfinite(total):
        raise NumericalError("laplace quadrature failed", achieved_error=e1 + e2)
    return LaplaceCheck(total, analytic, e1 + e2)


class RenewalInterpolant:
    """Fast spline-backed evaluation of G_theta and of int_0^T G_theta.

    The table covers ``t`` in ``[e^-400, 2]``.  Below ``t = 1/2`` the
    smooth quantity ``V(x) = G(e^-x) e^-x x^2`` (which tends to
    ``1 + 2 theta/x``) is tabulated on a uniform x-grid; on ``[1/2, 2]``
    G itself is tabulated.  Below the table the two-term expansion is
    used.  Construction performs a few hundred adaptive quadratures;
    instances are immutable afterwards and safe to share across threads.
    """

    X_MAX = _X_ASYMPTOTIC
    T_SPLIT = 0.2
    X_MIN = math.log(1.0 / T_SPLIT)

    def __init__(self, params: DickmanParameter,
                 quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE,
                 n_small: int = 1200, n_mid: int = 361):
        self.params = params
        theta = params.theta

        # small-t branch: V(x) = G(e^-x) e^-x x^2 on a log-spaced x grid
        # (dense near X_MIN where V still has curvature)
        xs = np.exp(np.linspace(math.log(self.X_MIN), math.log(self.X_MAX), n_small))
        xs[0], xs[-1] = self.X_MIN, self.X_MAX
        vals = np.empty_like(xs)
        for i, x in enumerate(xs):
            t = math.exp(-x)
            vals[i] = _renewal_density_any_t(t, params, quad_cfg) * t * x * x
        self._v_spline = CubicSpline(xs, vals)

        # moderate-t branch: G on [T_SPLIT, 2]
        ts = np.linspace(self.T_SPLIT, 2.0, n_mid)
        gs = np.array([_renewal_density_any_t(t, params, quad_cfg) for t in ts])
        self._g_spline = CubicSpline(ts, gs)

        # cumulative integral int_0^T G:
        #   T = e^-x  ->  int_x^inf V(y)/y^2 dy  (tail beyond X_MAX analytic)
        w_spline = CubicSpline(xs, vals / (xs * xs))
        w_anti = w_spline.antiderivative()
        tail = 1.0 / self.X_MAX + theta / self.X_MAX ** 2
        # integral from xs[i] to X_MAX plus tail
        self._ig_small = CubicSpline(xs, (w_anti(self.X_MAX) - w_anti(xs)) + tail)
        self._ig_split = float(self._ig_small(self.X_MIN))  # int_0^T_SPLIT G
        self._g_anti = self._g_spline.antiderivative()
        self._theta = theta

    def __call__(self, t):
        """G_theta(t), vectorised, for t in (0, 2]."""
        t = np.asarray(t, dtype=float)
        if np.any(t <= 0.0) or np.any(t > 2.0):
            raise DomainError("RenewalInterpolant domain is 0 < t <= 2")
        out = np.empty_like(t)
        small = t < self.T_SPLIT
        if np.any(small):
            x = np.log(1.0 / t[small])
            v = np.where(
                x > self.X_MAX,
                1.0 + 2.0 * self._theta / x,
                self._v_spline(np.minimum(x, self.X_MAX)),
            )
            out[small] = v / (t[small] * x * x)
        if np.any(~small):
            out[~small] = self._g_spline(t[~small])
        return out if out.ndim else float(out)

    def rescaled(self, x):
        """V(x) = G(e^-x) e^-x x^2 on x >= -log 2 (i.e. t = e^-x <= 2),
        asymptotic beyond the table.  Stable where e^-x underflows."""
        x = np.asarray(x, dtype=float)
        scalar = x.ndim == 0
        xa = np.atleast_1d(x).astype(float)
        if np.any(xa < -math.log(2.0)):
            raise DomainError("rescaled profile needs e^-x <= 2")
        out = np.empty_like(xa)
        hi = xa > self.X_MAX
        mid = xa < self.X_MIN
        core = ~hi & ~mid
        out[hi] = 1.0 + 2.0 * self._theta / np.maximum(xa[hi], 1.0)
        out[core] = self._v_spline(xa[core])
        if np.any(mid):
            t = np.exp(-xa[mid])
            out[mid] = self._g_spline(t) * t * xa[mid] * xa[mid]
        return float(out[0]) if scalar else out

    def integral(self, T):
        """int_0^T G_theta(v) dv, vectorised, for T in [0, 2]."""
        T = np.asarray(T, dtype=float)
        if np.any(T < 0.0) or np.any(T > 2.0):
            raise DomainError("integral domain is 0 <= T <= 2")
        out = np.zeros_like(T)
        pos = T > 0.0
        small = pos & (T < self.T_SPLIT)
        if np.any(small):
            x = np.log(1.0 / T[small])
            out[small] = np.where(
                x > self.X_MAX,
                1.0 / x + self._theta / (x * x),
                self._ig_small(np.minimum(x, self.X_MAX)),
            )
        mid = pos & ~small
        if np.any(mid):
            out[mid] = (self._ig_split + self._g_anti(T[mid])
                        - self._g_anti(self.T_SPLIT))
        return out if out.ndim else float(out)


_INTERPOLANT_CACHE: dict[float, RenewalInterpolant] = {}


def renewal_interpolant(theta: float) -> RenewalInterpolant:
    """Shared per-theta interpolant (built once, then reused)."""
    key = float(theta)
    table = _INTERPOLANT_CACHE.get(key)
    if table is None:
        table = RenewalInterpolant(DickmanParameter(theta=key))
        _INTERPOLANT_CACHE[key] = table
    return table
