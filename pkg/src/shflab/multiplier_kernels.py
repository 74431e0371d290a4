"""Laplace-multiplier kernels.

Inserting the multiplier ``e^{-lam sum v_r}`` into a collision diagram and
integrating out the wiggle-line time variables replaces each renewal
factor by

    F_lam(w) = int_0^inf  e^{-s w} / (log(lam + s/2) - theta + gamma)  ds,

and the surviving time-simplex integrals are controlled through

    f_lam(w) = int_w^2 F_lam(v) dv
             = int_0^inf (e^{-s w} - e^{-2 s})
               / (s (log(lam + s/2) - theta + gamma))  ds,

a non-increasing function whose small-w growth is log log (1/w).  This
module evaluates both (each by two independent routes), provides the
envelope  f_lam(u) <= (1 + delta_eps) loglog(1/u)  with the constant in
``delta_eps = C / loglog(1/eps)`` calibrated once on a reference grid, and
builds the derived cutoff quantities used by the series bound: the split
point ``k = C0 loglog(1/eps)`` and the optimised multiplier schedule
``lam_eps = loglog(1/eps) / logloglog(1/eps)``.

F is evaluated as ``(1/w) int_0^inf e^{-v} / D(lam + v/(2w)) dv`` (substitute
v = s w), f on the log-sigma axis; both integrands are then smooth and
well-scaled for any w down to 1e-40.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicSpline

from .errors import ConfigurationError, DomainError
from .special_functions import DEFAULT_QUADRATURE, DickmanParameter, QuadratureConfig


@dataclass(frozen=True)
class MultiplierConfig:
    """Multiplier parameters: lam for the time variables, (mu, c0) for the
    tail split of the series bound."""

    lam: float
    params: DickmanParameter
    mu: float = 1.0
    c0: float | None = None

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0:
            raise ConfigurationError("lam and mu must be positive")
        if self.c0 is not None and self.c0 <= 0:
            raise ConfigurationError("c0 must be positive")

    @property
    def theta(self) -> float:
        return self.params.theta

    @property
    def gamma(self) -> float:
        return self.params.euler_gamma

    def laplace_floor(self) -> float:
        """Smallest lam for which the transform identity applies."""
        return math.exp(self.theta - self.gamma)

    def require_transform_domain(self):
        if self.lam <= self.laplace_floor():
            raise DomainError(
                f"lam = {self.lam:.6g} is not above e^(theta-gamma) "
                f"= {self.laplace_floor():.6g}")

    def satisfies_iterated_kernel_hypothesis(self) -> bool:
        return self.lam > max(math.exp(2.0 * (self.theta - self.gamma)), 1.0)

    def margin_above_one(self, h: int) -> float:
        """D = c0 mu - 2 e^mu h^2 for the tail split at particle number h."""
        if self.c0 is None:
            raise ConfigurationError("c0 is not set")
        return self.c0 * self.mu - 2.0 * math.exp(self.mu) * h * h


def default_c0(h: int, mu: float = 1.0) -> float:
    """Smallest two-decimal c0 with c0 mu - 2 e^mu h^2 > 1."""
    raw = (1.0 + 2.0 * math.exp(mu) * h * h) / mu
    return math.ceil(raw * 100.0 + 1) / 100.0


def big_F(w: float, cfg: MultiplierConfig,
          quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """F_lam(w) for w > 0."""
    if w <= 0:
        raise DomainError(f"big_F requires w > 0, got {w}")
    cfg.require_transform_domain()
    lam, theta, g = cfg.lam, cfg.theta, cfg.gamma

    def integrand(v):
        return math.exp(-v) / (math.log(lam + v / (2.0 * w)) - theta + g)

    # a tiny absolute floor keeps QUADPACK's roundoff heuristic quiet on
    # the flat slowly-varying stretches of this integrand
    val, _ = quad(integrand, 0.0, np.inf,
                  epsabs=max(quad_cfg.abs_tol, 1e-13),
                  epsrel=quad_cfg.rel_tol, limit=quad_cfg.max_subdivisions)
    return val / w


def small_f(w: float, cfg: MultiplierConfig,
            quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """f_lam(w) on (0, 2], via the single sigma-integral form."""
    if not 0.0 < w <= 2.0:
        raise DomainError(f"small_f requires 0 < w <= 2, got {w}")
    cfg.require_transform_domain()
    if w == 2.0:
        return 0.0
    lam, theta, g = cfg.lam, cfg.theta, cfg.gamma

    def integrand(y):
        s = math.exp(y)
        return (math.exp(-s * w) - math.exp(-2.0 * s)) / (
            math.log(lam + 0.5 * s) - theta + g)

    hi = math.log(1.0 / w) + 8.0
    val, _ = quad(integrand, -40.0, hi, epsabs=quad_cfg.abs_tol,
                  epsrel=quad_cfg.rel_tol,
                  limit=max(quad_cfg.max_subdivisions, 300))
    return val


def small_f_from_big_f(w: float, cfg: MultiplierConfig,
                       quad_cfg: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """f_lam(w) as int_w^2 F_lam(v) dv (independent route, for cross-checks)."""
    if not 0.0 < w <= 2.0:
        raise DomainError(f"small_f requires 0 < w <= 2, got {w}")
    if w == 2.0:
        return 0.0

    def integrand(z):
        v = math.exp(z)
        return big_F(v, cfg, quad_cfg) * v

    val, _ = quad(integrand, math.log(w), math.log(2.0),
                  epsabs=quad_cfg.abs_tol, epsrel=max(quad_cfg.rel_tol, 1e-9),
                  limit=quad_cfg.max_subdivisions)
    return val


# ---------------------------------------------------------------------------
# envelope calibration

# reference grid corners: the binding cases are lam near its floor
# e^(theta - gamma + 1/2), u at its ceiling eps^2, and eps small
_CAL_THETAS = (-1.0, 0.0, 1.0)
_CAL_EPSILONS = (0.05, 1e-3, 1e-6, 1e-10, 1e-14)
_CAL_U_FRACTIONS = (1.0, 1e-4, 1e-8)
_CAL_LAM_FACTORS = (1.02, 2.0, 10.0, 100.0)

_calibrated_constant: float | None = None


def envelope_floor(theta: float, gamma: float = DickmanParameter(0.0).euler_gamma) -> float:
    """Smallest admissible lam for the envelope bound."""
    return math.exp(theta - gamma + 0.5)


def _smallness_threshold(theta: float, gamma: float) -> float:
    return math.exp(2.0 * (math.log(2.0) + theta - gamma))


def calibrate_envelope_constant() -> float:
    """The implementation constant C in delta_eps = C / loglog(1/eps).

    Defined as the grid maximum of (f_lam(u)/loglog(1/u) - 1) * loglog(1/eps)
    over the reference corners; computed once per process and cached.
    """
    global _calibrated_constant
    if _calibrated_constant is not None:
        return _calibrated_constant
    worst = 0.0
    for theta in _CAL_THETAS:
        params = DickmanParameter(theta=theta)
        floor = envelope_floor(theta, params.euler_gamma)
        for eps in _CAL_EPSILONS:
            ll_eps = math.log(math.log(1.0 / eps))
            for frac in _CAL_U_FRACTIONS:
                u = eps * eps * frac
                if 1.0 / u <= _smallness_threshold(theta, params.euler_gamma):
                    continue
                ll_u = math.log(math.log(1.0 / u))
                for fac in _CAL_LAM_FACTORS:
                    cfg = MultiplierConfig(lam=floor * fac, params=params)
                    ratio = small_f(u, cfg) / ll_u
                    worst = max(worst, (ratio - 1.0) * ll_eps)
    _calibrated_constant = worst
    return worst


def loglog_envelope(u: float, epsilon: float, cfg: MultiplierConfig
                    ) -> tuple[float, bool]:
    """Envelope bound (1 + delta_eps) loglog(1/u) and whether f_lam(u)
    actually sits below it.

    Preconditions: lam above e^(theta-gamma+1/2), 0 < u <= eps^2, and u
    small enough that 1/u exceeds e^(2(log 2 + theta - gamma)).
    """
    theta, g = cfg.theta, cfg.gamma
    if cfg.lam <= envelope_floor(theta, g):
        raise DomainError("lam must exceed e^(theta - gamma + 1/2)")
    if not 0.0 < u <= epsilon * epsilon:
        raise DomainError(f"need 0 < u <= eps^2, got u = {u}, eps = {epsilon}")
    if 1.0 / u <= _smallness_threshold(theta, g):
        raise DomainError("u is not below the smallness threshold")
    delta = calibrate_envelope_constant() / math.log(math.log(1.0 / epsilon))
    bound = (1.0 + delta) * math.log(math.log(1.0 / u))
    return bound, small_f(u, cfg) <= bound


@dataclass(frozen=True)
class CutoffSchedule:
    """Derived cutoff quantities for the series bound at a given epsilon."""

    epsilon: float
    k: float
    lambda_eps: float
    delta_eps: float

    @classmethod
    def for_epsilon(cls, epsilon: float, c0: float) -> "CutoffSchedule":
        if not 0.0 < epsilon < 1.0:
            raise ConfigurationError("epsilon must lie in (0, 1)")
        L = math.log(1.0 / epsilon)
        if L <= math.e:
            raise ConfigurationError(
                f"epsilon = {epsilon:.4g} too large: logloglog(1/eps) <= 0")
        ll = math.log(L)
        lll = math.log(ll)
        sched = cls(epsilon=epsilon, k=c0 * ll, lambda_eps=ll / lll,
                    delta_eps=calibrate_envelope_constant() / ll)
        if not (sched.k > 0 and sched.lambda_eps > 0 and sched.delta_eps > 0):
            raise ConfigurationError("degenerate cutoff schedule")
        return sched


# ---------------------------------------------------------------------------
# cached kernel tables (used by the diagram integrals, which evaluate
# F_lam at many thousands of points)

class KernelTable:
    """Spline tables of w*F_lam(w) and f_lam(w) against log w.

    Covers w in [1e-40, 3] for F and (0, 2] for f; relative accuracy
    ~1e-7, immutable after construction.
    """

    W_MIN = 1e-40

    def __init__(self, cfg: MultiplierConfig, n_nodes: int = 700):
        cfg.require_transform_domain()
        self.cfg = cfg
        self._wf_anti = None
        xs = np.linspace(math.log(self.W_MIN), math.log(3.0), n_nodes)
        wf = np.array([big_F(math.exp(x), cfg) * math.exp(x) for x in xs])
        self._wf_spline = CubicSpline(xs, wf)
        # extra linear nodes near w = 2 where f vanishes and the log grid
        # would be sparse
        xs_f = np.unique(np.concatenate([
            np.linspace(math.log(self.W_MIN), math.log(1.4), n_nodes),
            np.log(np.linspace(1.4, 2.0, 200)),
        ]))
        fv = np.array([small_f(math.exp(x), cfg) for x in xs_f[:-1]] + [0.0])
        self._f_spline = CubicSpline(xs_f, fv)

    def F(self, w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0) or np.any(w > 3.0):
            raise DomainError("KernelTable F domain is (0, 3]")
        x = np.log(np.maximum(w, self.W_MIN))
        out = self._wf_spline(x) / np.maximum(w, self.W_MIN)
        return out if out.ndim else float(out)

    def f(self, w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0) or np.any(w > 2.0):
            raise DomainError("KernelTable f domain is (0, 2]")
        x = np.log(np.maximum(w, self.W_MIN))
        out = self._f_spline(x)
        return out if out.ndim else float(out)

    def int_F(self, a: float, b: float) -> float:
        """int_a^b F(v) dv for 0 <= a <= b <= 3, via the exact
        antiderivative of the tabulated w F(w) on the log axis."""
        if b <= a:
            return 0.0
        if b > 3.0 or a < 0.0:
            raise DomainError("int_F domain is [0, 3]")
        if self._wf_anti is None:
            self._wf_anti = self._wf_spline.antiderivative()
        a = max(a, self.W_MIN)
        return float(self._wf_anti(math.log(b)) - self._wf_anti(math.log(a)))


_KERNEL_CACHE: dict[tuple, KernelTable] = {}


def kernel_table(cfg: MultiplierConfig) -> KernelTable:
    key = (cfg.lam, cfg.theta)
    table = _KERNEL_CACHE.get(key)
    if table is None:
        table = KernelTable(cfg)
        _KERNEL_CACHE[key] = table
    return table
