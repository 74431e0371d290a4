"""Critical 2d directed-polymer simulator.

Simulates the point-to-plane partition functions

    Z_{0,N}(x, y) = E[ exp( sum_{n=1}^{N-1} (beta w(n, S_n) - lam(beta)) )
                       1{S_N = y} | S_0 = x ]

of a simple random walk on Z^2 in i.i.d. site disorder, at the critical
coupling sigma_N^2 = e^{lam(2 beta) - 2 lam(beta)} - 1 = (pi/log N)(1 +
theta/log N), and estimates moments of the rescaled mass assigned to balls
of macroscopic radius eps.

Two field flavours are produced by dynamic programming over time layers:

* the endpoint field ``Z_{0,N}(0, .)`` (forward pass from the origin), and
* the free-endpoint field ``T(a) = sum_y Z_{0,N}(a, y)`` for all starting
  points ``a`` at once (one backward pass), whose ball averages estimate
  the mass the rescaled field assigns to ``B(0, eps)`` integrated against
  the uniform density.  ``E[T(a)] = 1`` exactly, so the ball-mass estimator
  below has disorder-free mean 1/2, matching the first moment of the
  one-time marginal (density 1/2 per unit area).

Lattice layout: the walk alternates between the even and odd sublattices of
Z^2.  Each parity class is stored densely through the rotation
``(u, v) = ((x+y)/2, (x-y)/2)`` (even sites) and ``(x, y) = (u+v+1, u-v)``
(odd sites); one walk step is then the 2x2-window average between the two
charts.  Updates run inside an absorbing envelope of chart radius
``~ c sqrt(n)/2`` (c = ``envelope_const``, per-axis scale), far inside the
hard window; the absorbed beta=0 mass is computed exactly per configuration
and must stay below 1e-6.

Randomness is counter-based: disorder weights for time layer n of replica r
come from ``Philox(key=h(seed, r), counter=[0,0,n,0])``, so fields are
bit-reproducible for a fixed seed independently of scheduling.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numba as nb
import numpy as np
from scipy.special import gammaln

from .errors import ConfigurationError, DomainError

GAUSSIAN = "gaussian"
BERNOULLI = "bernoulli_pm1"
_LAWS = (GAUSSIAN, BERNOULLI)

_ENVELOPE_PAD = 4


def _log_mgf(beta: float, law: str) -> float:
    """lam(beta) = log E[e^{beta w}] for the supported disorder laws."""
    if law == GAUSSIAN:
        return 0.5 * beta * beta
    return math.log(math.cosh(beta))


def critical_beta(n_horizon: int, theta: float, law: str) -> tuple[float, float]:
    """Critical coupling: sigma2 = (pi/log N)(1 + theta/log N) and the
    disorder-law-specific beta solving e^{lam(2b)-2lam(b)} - 1 = sigma2.

    Gaussian disorder admits the closed form beta^2 = log(1 + sigma2);
    it is still verified against the defining equation.  The +/-1 law is
    solved by bisection to 1e-12 (a solution needs sigma2 < 1, since
    e^{lam(2b)-2lam(b)} - 1 = tanh(b)^2 there).
    """
    if law not in _LAWS:
        raise ConfigurationError(f"unknown disorder law {law!r}")
    if n_horizon < 16:
        raise DomainError("time horizon must be at least 16")
    logN = math.log(n_horizon)
    sigma2 = (math.pi / logN) * (1.0 + theta / logN)
    if sigma2 <= 0.0:
        raise ConfigurationError(f"non-positive sigma2 = {sigma2:.4g}")
    if law == GAUSSIAN:
        return sigma2, math.sqrt(math.log1p(sigma2))

    def residual(b):
        return math.exp(_log_mgf(2.0 * b, law) - 2.0 * _log_mgf(b, law)) - 1.0 - sigma2

    lo, hi = 0.0, 10.0
    if sigma2 >= 1.0 or residual(hi) < 0.0:
        raise ConfigurationError(
            f"no beta in (0, 10) solves the +/-1 coupling at sigma2 = {sigma2:.4g}"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if residual(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-14:
            break
    beta = 0.5 * (lo + hi)
    if abs(residual(beta)) > 1e-12:
        raise ConfigurationError("bisection failed to reach 1e-12 residual")
    return sigma2, beta


@dataclass(frozen=True)
class PolymerConfig:
    n_horizon: int
    theta: float
    disorder_law: str
    sigma2: float
    beta: float
    window_radius: int
    replicas: int
    seed: int
    envelope_const: float = 6.0
    dtype: str = "float64"

    def __post_init__(self):
        N = self.n_horizon
        if N < 16 or N % 2:
            raise ConfigurationError("n_horizon must be even and >= 16")
        if self.disorder_law not in _LAWS:
            raise ConfigurationError(f"unknown disorder law {self.disorder_law!r}")
        logN = math.log(N)
        expected = (math.pi / logN) * (1.0 + self.theta / logN)
        if abs(self.sigma2 - expected) > 1e-12 * abs(expected):
            raise ConfigurationError("sigma2 is not the critical value for (N, theta)")
        law_sigma2 = math.exp(
            _log_mgf(2.0 * self.beta, self.disorder_law)
            - 2.0 * _log_mgf(self.beta, self.disorder_law)
        ) - 1.0
        if abs(law_sigma2 - self.sigma2) > 1e-10:
            raise ConfigurationError("beta does not reproduce sigma2 for this law")
        min_window = math.ceil(3.0 * math.sqrt(N * logN))
        if self.window_radius < min_window:
            raise ConfigurationError(
                f"window_radius {self.window_radius} below mass-loss floor {min_window}"
            )
        if self.replicas < 1:
            raise ConfigurationError("replicas must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be float32 or float64")

    @classmethod
    def at_criticality(cls, n_horizon: int, theta: float = 0.0,
                       disorder_law: str = BERNOULLI, replicas: int = 1,
                       seed: int = 0, window_const: float = 3.0,
                       **kwargs) -> "PolymerConfig":
        sigma2, beta = critical_beta(n_horizon, theta, disorder_law)
        window = math.ceil(window_const * math.sqrt(n_horizon * math.log(n_horizon)))
        return cls(n_horizon=n_horizon, theta=theta, disorder_law=disorder_law,
                   sigma2=sigma2, beta=beta, window_radius=window,
                   replicas=replicas, seed=seed, **kwargs)

@dataclass(frozen=True)
class PartitionField:
    """One sampled field on the even sublattice, stored in chart coordinates.

    ``values[i, j]`` is the field at chart point ``(u, v) = (i - extent,
    j - extent)``, i.e. lattice point ``(u + v, u - v)``.  ``kind`` is
    ``"endpoint"`` for Z_{0,N}(0, .) and ``"start_total"`` for
    T(a) = sum_y Z_{0,N}(a, y).
    """

    values: np.ndarray
    extent: int
    n_horizon: int
    kind: str
    mass_loss: float

    def value_at(self, x: int, y: int) -> float:
        if (x + y) % 2:
            raise DomainError("field lives on the even sublattice")
        u, v = (x + y) // 2, (x - y) // 2
        e = self.extent
        if abs(u) > e or abs(v) > e:
            return 0.0
        return float(self.values[u + e, v + e])

    def total(self) -> float:
        return float(self.values.sum())

    def ball_values(self, radius: float) -> np.ndarray:
        """Field values at even sites with |(x, y)| < radius (euclidean)."""
        e = self.extent
        sq = np.arange(-e, e + 1) ** 2
        mask = (sq[:, None] + sq[None, :]) * 2 < radius * radius
        return self.values[mask]


def _chart_extent(n: int, r_chart: int, c_env: float, cap: int) -> int:
    """Envelope half-width (chart units) for layer n."""
    return min(cap, r_chart + int(math.ceil(0.5 * c_env * math.sqrt(n))) + _ENVELOPE_PAD)


@nb.njit(cache=True, fastmath=True)
def _step_plain(src, dst, m):
    """dst[i,j] = (src[i,j]+src[i+1,j]+src[i,j+1]+src[i+1,j+1])/4.

    One walk step between the parity charts; kept free of the weight
    logic so it vectorises.
    """
    quarter = dst.dtype.type(0.25)
    for i in range(m):
        for j in range(m):
            dst[i, j] = quarter * (src[i, j] + src[i + 1, j + 1]
                                   + src[i, j + 1] + src[i + 1, j])


@nb.njit(cache=True, fastmath=True)
def _apply_sign_weights(dst, raw, m, wp, wm):
    """Multiply dst elementwise by wp/wm according to the bits of raw."""
    for i in range(m):
        base = i * m
        for j in range(m):
            k = base + j
            word = raw[k >> 6]
            bit = (word >> np.uint64(k & 63)) & np.uint64(1)
            dst[i, j] *= wp if bit else wm


def _step_weights(src_view, dst_view, m, weights):
    """Vectorised step for array-valued weights (gaussian law)."""
    acc = src_view[:m, :m] + src_view[1:m + 1, 1:m + 1]
    acc += src_view[:m, 1:m + 1]
    acc += src_view[1:m + 1, :m]
    np.multiply(acc, 0.25, out=acc)
    if weights is not None:
        acc *= weights
    dst_view[:m, :m] = acc


class _LayerRng:
    """Counter-based per-(seed, replica, layer) randomness."""

    def __init__(self, seed: int, replica_id: int):
        self._key = np.random.SeedSequence((seed, replica_id)).generate_state(
            2, dtype=np.uint64)

    def raw_bits(self, layer: int, n_words: int) -> np.ndarray:
        bg = np.random.Philox(key=self._key, counter=[0, 0, layer, 0])
        return bg.random_raw(n_words)

    def normals(self, layer: int, shape, dtype) -> np.ndarray:
        bg = np.random.Philox(key=self._key, counter=[0, 0, layer, 0])
        return np.random.Generator(bg).standard_normal(shape, dtype=dtype)


def _run_layers(cfg: PolymerConfig, replica_id: int, layers: Sequence[int],
                a: np.ndarray, b: np.ndarray, center: int, r_chart: int,
                beta: float, final_extent: int,
                init_extents: tuple[int, int]) -> np.ndarray:
    """Shared DP loop over the given time layers (ascending for the forward
    field, descending for the free-endpoint field).  `a` holds the entry
    layer; returns the final disorder-free step onto the even chart,
    restricted to half-width ``final_extent``."""
    cap = (a.shape[0] - 3) // 2
    c_env = cfg.envelope_const
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    lam = _log_mgf(beta, cfg.disorder_law)
    bernoulli = cfg.disorder_law == BERNOULLI
    wp = dtype(math.exp(beta - lam))
    wm = dtype(math.exp(-beta - lam))
    rng = _LayerRng(cfg.seed, replica_id) if beta != 0.0 else None
    bufs = [a, b]
    ext = list(init_extents)  # last written extent per buffer
    cur = 0
    for n in layers:
        e = _chart_extent(n, r_chart, c_env, cap)
        m = 2 * e + 1
        lo = center - e
        # view offset by chart direction; both cases reduce to the same
        # 2x2 gather: writing odd reads [u..u+1], writing even [u-1..u]
        off = 0 if n % 2 == 1 else -1
        src = bufs[cur][lo + off: lo + off + m + 1, lo + off: lo + off + m + 1]
        dstv = bufs[1 - cur][lo:lo + m, lo:lo + m]
        if beta == 0.0:
            _step_plain(src, dstv, m)
        elif bernoulli:
            raw = rng.raw_bits(n, (m * m + 63) // 64)
            _step_plain(src, dstv, m)
            _apply_sign_weights(dstv, raw, m, wp, wm)
        else:
            w = np.exp(beta * rng.normals(n, (m, m), dtype) - dtype(lam))
            _step_weights(src, dstv, m, w)
        # clear any stale frame left from this buffer's previous, wider layer
        old = ext[1 - cur]
        if old > e:
            dst = bufs[1 - cur]
            olo, ohi = center - old, center + old + 1
            dst[olo:ohi, olo:lo] = 0.0
            dst[olo:ohi, lo + m:ohi] = 0.0
            dst[olo:lo, lo:lo + m] = 0.0
            dst[lo + m:ohi, lo:lo + m] = 0.0
        ext[1 - cur] = e
        cur = 1 - cur
    # final disorder-free step onto the even chart (time N forward, 0 backward)
    e = min(final_extent, cap)
    m = 2 * e + 1
    lo = center - e
    src = bufs[cur][lo - 1: lo + m, lo - 1: lo + m]
    out = np.zeros((m, m), dtype=dtype)
    _step_plain(src, out, m)
    return out


def _alloc(cfg: PolymerConfig, r_chart: int) -> tuple[np.ndarray, np.ndarray, int, int]:
    cap = min(
        int(cfg.window_radius / math.sqrt(2.0)) + 1,
        _chart_extent(cfg.n_horizon, r_chart, cfg.envelope_const, 1 << 30),
    )
    size = 2 * cap + 3
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    a = np.zeros((size, size), dtype=dtype)
    b = np.zeros((size, size), dtype=dtype)
    return a, b, size // 2, cap


_MASS_LOSS_CACHE: dict[tuple, float] = {}


def _zero_disorder_loss(cfg: PolymerConfig, mode: str, r_chart: int) -> float:
    """Exact beta = 0 mass defect of the absorbing envelope (cached)."""
    key = (cfg.n_horizon, cfg.window_radius, round(cfg.envelope_const, 6),
           mode, r_chart)
    loss = _MASS_LOSS_CACHE.get(key)
    if loss is None:
        base = replace(cfg, dtype="float64")
        if mode == "endpoint":
            f = _forward_field(base, 0, beta=0.0)
            loss = 1.0 - f.values.sum()
        else:
            f = _backward_field(base, 0, r_chart, beta=0.0)
            loss = float(np.max(1.0 - f.values))
        loss = max(loss, 0.0)
        _MASS_LOSS_CACHE[key] = loss
    return loss


def _forward_field(cfg: PolymerConfig, replica_id: int, beta=None) -> PartitionField:
    beta = cfg.beta if beta is None else beta
    a, b, center, cap = _alloc(cfg, 0)
    a[center, center] = 1.0
    final = _chart_extent(cfg.n_horizon, 0, cfg.envelope_const, cap)
    out = _run_layers(cfg, replica_id, range(1, cfg.n_horizon), a, b, center,
                      0, beta, final_extent=final, init_extents=(0, 0))
    e = (out.shape[0] - 1) // 2
    return PartitionField(values=out, extent=e, n_horizon=cfg.n_horizon,
                          kind="endpoint", mass_loss=float("nan"))


def _backward_field(cfg: PolymerConfig, replica_id: int, r_chart: int,
                    beta=None) -> PartitionField:
    beta = cfg.beta if beta is None else beta
    a, b, center, cap = _alloc(cfg, r_chart)
    eN = min(cap, _chart_extent(cfg.n_horizon, r_chart, cfg.envelope_const, cap) + 2)
    a[center - eN:center + eN + 1, center - eN:center + eN + 1] = 1.0
    out = _run_layers(cfg, replica_id, range(cfg.n_horizon - 1, 0, -1), a, b,
                      center, r_chart, beta, final_extent=r_chart,
                      init_extents=(eN, 0))
    e = (out.shape[0] - 1) // 2
    return PartitionField(values=out, extent=e, n_horizon=cfg.n_horizon,
                          kind="start_total", mass_loss=float("nan"))


def sample_partition_field(cfg: PolymerConfig, replica_id: int) -> PartitionField:
    """Endpoint field Z_{0,N}(0, .) for one disorder replica."""
    loss = _zero_disorder_loss(cfg, "endpoint", 0)
    if loss > 1e-6:
        raise ConfigurationError(
            f"window too small: beta=0 mass loss {loss:.3g} > 1e-6")
    f = _forward_field(cfg, replica_id)
    return replace(f, mass_loss=loss)


def sample_total_mass_field(cfg: PolymerConfig, replica_id: int,
                            max_ball_radius: float) -> PartitionField:
    """Free-endpoint field T(a) for |a| up to max_ball_radius (euclidean)."""
    r_chart = int(math.ceil(max_ball_radius / math.sqrt(2.0))) + 2
    loss = _zero_disorder_loss(cfg, "start_total", r_chart)
    if loss > 1e-6:
        raise ConfigurationError(
            f"window too small: beta=0 mass loss {loss:.3g} > 1e-6")
    f = _backward_field(cfg, replica_id, r_chart)
    return replace(f, mass_loss=loss)


def ball_mass(field_: PartitionField, cfg: PolymerConfig, epsilon: float) -> float:
    """Simulated mass of the centred eps-ball under the rescaled field,
    integrated against the uniform density (disorder-free mean 1/2).

    For the free-endpoint field this is half the average of T over the
    lattice sites in B(0, eps sqrt(N)); for the endpoint field, the ball
    sum of Z(0, .) normalised by twice the Gaussian ball probability
    1 - e^{-eps^2} of the rescaled walk.
    """
    radius = epsilon * math.sqrt(cfg.n_horizon)
    if radius < 2.0:
        raise DomainError(
            f"ball of radius eps*sqrt(N) = {radius:.2f} holds no lattice point")
    vals = field_.ball_values(radius)
    if vals.size == 0:
        raise DomainError("empty ball")
    if field_.kind == "start_total":
        return 0.5 * float(vals.mean())
    return float(vals.sum()) / (2.0 * -math.expm1(-epsilon * epsilon))


@dataclass(frozen=True)
class MomentEstimate:
    h: int
    epsilon: float
    estimate: float
    stderr_proxy: float
    replicas_used: int

    def __post_init__(self):
        if self.estimate < 0:
            raise ConfigurationError("moment estimate must be nonnegative")


def moment_estimate(masses: Sequence[float], h: int,
                    epsilon: float = float("nan"), n_blocks: int = 16) -> MomentEstimate:
    """Median-of-means estimate of E[M^h] from per-replica masses.

    Heavy tails at criticality make the plain mean of h-th powers fragile;
    the sample is split into >= 8 blocks, block means are computed and
    their median reported.  ``stderr_proxy`` is the normalised median
    absolute deviation of the block means divided by sqrt(#blocks).
    """
    x = np.asarray(masses, dtype=float)
    if x.size < 8 * h * h:
        raise DomainError(f"need at least {8 * h * h} samples for h = {h}")
    k = max(8, min(n_blocks, x.size // 2))
    powers = x ** h
    blocks = np.array_split(powers, k)
    means = np.array([b.mean() for b in blocks])
    med = float(np.median(means))
    mad = float(np.median(np.abs(means - med)))
    return MomentEstimate(h=h, epsilon=epsilon, estimate=med,
                          stderr_proxy=1.4826 * mad / math.sqrt(k),
                          replicas_used=int(x.size))


def growth_fit(points: Sequence[tuple[float, MomentEstimate]],
               against: str = "loglog") -> tuple[float, float]:
    """Least-squares growth fit of moment estimates along an epsilon ladder.

    ``against="loglog"`` fits log(estimate) ~ slope * loglog(1/eps) + c
    (slope targets h-choose-2); ``against="log"`` fits estimate ~
    slope * log(1/eps) + c, the second-moment route.  Returns (slope, r2).
    """
    if len(points) < 4:
        raise DomainError("need at least 4 ladder points")
    eps = np.array([p[0] for p in points], dtype=float)
    est = np.array([p[1].estimate for p in points], dtype=float)
    span = math.log10(eps.max() / eps.min())
    if span < 0.75:
        raise DomainError(f"epsilon ladder spans only {span:.2f} decades")
    if against == "loglog":
        x = np.log(np.log(1.0 / eps))
        y = np.log(est)
    elif against == "log":
        x = np.log(1.0 / eps)
        y = est
    else:
        raise DomainError(f"unknown fit mode {against!r}")
    A = np.vstack([x, np.ones_like(x)]).T
    sol, res, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < 2:
        raise DomainError("degenerate design matrix")
    slope = float(sol[0])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(res[0]) if res.size else float(np.sum((A @ sol - y) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return slope, r2


def _replica_masses(args) -> np.ndarray:
    cfg, replica_ids, epsilons = args
    r_max = max(epsilons) * math.sqrt(cfg.n_horizon)
    out = np.empty((len(replica_ids), len(epsilons)), dtype=float)
    for row, rid in enumerate(replica_ids):
        f = sample_total_mass_field(cfg, rid, r_max)
        for col, eps in enumerate(epsilons):
            out[row, col] = ball_mass(f, cfg, eps)
    return out


def simulate_ball_masses(cfg: PolymerConfig, epsilons: Sequence[float],
                         workers: int = 1) -> np.ndarray:
    """Per-replica ball masses, shape (replicas, len(epsilons)).

    Replicas are independent and reduced in fixed replica order, so the
    result is bit-identical for a given (seed, replicas) regardless of
    worker count.
    """
    epsilons = list(epsilons)
    ids = list(range(cfg.replicas))
    if workers <= 1 or cfg.replicas == 1:
        return _replica_masses((cfg, ids, epsilons))
    chunks = [ids[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_replica_masses,
                              [(cfg, chunk, epsilons) for chunk in chunks]))
    out = np.empty((cfg.replicas, len(epsilons)), dtype=float)
    for chunk, part in zip(chunks, parts):
        out[chunk, :] = part
    return out


_MASSES_FORMAT = 1


def default_cache_dir() -> str:
    return os.environ.get("SHFLAB_CACHE_DIR") or os.path.join(
        os.path.expanduser("~"), ".cache", "shflab")


def cached_ball_masses(cfg: PolymerConfig, epsilons: Sequence[float],
                       workers: int = 1, cache_dir: str | None = None) -> np.ndarray:
    """Disk-cached :func:`simulate_ball_masses`.

    The cache key hashes the full resolved configuration and the epsilon
    ladder; since the simulation is bit-reproducible, a cached array is
    indistinguishable from a fresh run.
    """
    cache_dir = cache_dir or default_cache_dir()
    key_src = json.dumps(
        {**asdict(cfg), "epsilons": [float(e) for e in epsilons],
         "format": _MASSES_FORMAT}, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:24]
    path = os.path.join(cache_dir, f"masses_{key}.npz")
    if os.path.exists(path):
        with np.load(path) as z:
            return z["masses"]
    masses = simulate_ball_masses(cfg, epsilons, workers=workers)
    os.makedirs(cache_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".npz")
    os.close(fd)
    try:
        np.savez_compressed(tmp, masses=masses,
                            epsilons=np.asarray(epsilons, dtype=float))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return masses


def exact_walk_kernel(N: int, extent: int) -> np.ndarray:
    """P(S_N = .) on the even chart, via the independent-diagonals identity
    P(S_N = (x, y)) = b(N, (x+y)/2) b(N, (x-y)/2), b(N, u) = C(N, N/2+u)/2^N.

    Independent oracle for the beta = 0 field (no dynamic programming).
    """
    u = np.arange(-extent, extent + 1, dtype=float)
    half = N / 2.0
    logb = (gammaln(N + 1) - gammaln(half + u + 1) - gammaln(half - u + 1)
            - N * math.log(2.0))
    b = np.exp(logb)
    b[np.abs(u) > half] = 0.0
    return np.outer(b, b)
