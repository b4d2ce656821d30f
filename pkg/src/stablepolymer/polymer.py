"""Partition functions of the stable directed polymer and intermediate-disorder schedules."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import rng as streams
from .parallel import map_replicas
from .poisson_env import DEFAULT_COUNT_CAP, PoissonCloud, sample_cloud, tube_counts
from .stable_process import (
    StableParams,
    build_density_grid,
    cdf,
    density,
    sample_bridges,
    sample_increments,
    sample_paths,
)

WINDOW_SCALES = 12.0
MAX_EXCLUDED = 0.01


class WindowOverflowError(RuntimeError):
    """A path tube left the environment window."""


def lambda_of(beta):
    """``lambda(beta) = e**beta - 1``."""
    return np.expm1(beta) if np.ndim(beta) else math.expm1(beta)


@dataclass(frozen=True)
class PolymerConfig:
    stable: StableParams
    beta: float
    v: float
    r: float
    t: float

    def __post_init__(self):
        if not (self.v >= 0 and self.r > 0 and self.t > 0):
            raise ValueError("need v >= 0, r > 0, t > 0")

    @property
    def lam(self) -> float:
        return lambda_of(self.beta)

    @property
    def log_normalizer(self) -> float:
        """``-lambda(beta) v r t``."""
        return -self.lam * self.v * self.r * self.t

    def default_window(self) -> float:
        return WINDOW_SCALES * (2.0 * self.stable.nu * self.t) ** (1.0 / self.stable.alpha)

    def default_steps(self) -> int:
        """Smallest step count with one-step scale ``(nu dt)**(1/alpha) < r/4``."""
        dt_max = (self.r / 4.0) ** self.stable.alpha / self.stable.nu
        return max(1, math.ceil(self.t / dt_max * (1 + 1e-12)))


@dataclass(frozen=True)
class Schedule:
    """``r_t = t**rho``, ``lambda(beta_t) = sign(beta*) t**(-eta)`` and ``v_t`` solving (a) exactly."""

    alpha: float = 2.0
    beta_star: float = 0.5
    rho: float | None = None
    eta: float | None = None
    nu: float = 1.0

    def __post_init__(self):
        StableParams(self.alpha, self.nu)
        if self.rho is None:
            object.__setattr__(self, "rho", 1.0 / (2.0 * self.alpha))
        if self.eta is None:
            object.__setattr__(self, "eta", 1.0 / (2.0 * self.alpha))
        if self.beta_star == 0:
            raise ValueError("beta_star must be non-zero")
        if not (0.0 < self.rho < 1.0 / self.alpha):
            raise ValueError(f"need 0 < rho < 1/alpha, got rho={self.rho}")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if not (self.rho - self.eta < 1.0 / self.alpha):
            raise ValueError("need rho - eta < 1/alpha")

    @property
    def stable(self) -> StableParams:
        return StableParams(self.alpha, self.nu)

    def r(self, t):
        return t**self.rho

    def lam(self, t):
        lam = math.copysign(1.0, self.beta_star) * t ** (-self.eta)
        if lam <= -1.0:
            raise ValueError(f"lambda(beta_t) = {lam} <= -1 at t={t}; use larger t or eta > 0")
        return lam

    def beta(self, t):
        return math.log1p(self.lam(t))

    def v(self, t):
        a = self.alpha
        return self.beta_star**2 * t ** (-(1.0 - 1.0 / a) - 2.0 * self.rho + 2.0 * self.eta)

    def config(self, t) -> PolymerConfig:
        return PolymerConfig(self.stable, self.beta(t), self.v(t), self.r(t), float(t))

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "beta_star": self.beta_star, "rho": self.rho, "eta": self.eta, "nu": self.nu}


@dataclass
class PolymerEstimate:
    value: float
    std_error: float
    n_env: int
    n_path: int
    overflow_fraction: float

    def __post_init__(self):
        if self.std_error < 0 or not (0.0 <= self.overflow_fraction <= 1.0):
            raise ValueError("invalid estimate")


def _paths_for(config, n, n_steps, rng, endpoint):
    if endpoint is None:
        return sample_paths(config.stable, config.t, n_steps, n, rng)
    grid = build_density_grid(config.stable)
    return sample_bridges(grid, config.t, endpoint, n_steps, n, rng, method="auto")


def _weights(config, cloud, times, paths):
    counts = tube_counts(cloud, times, paths, config.r, config.t)
    if config.beta == 0:
        return np.ones(len(counts))
    return np.exp(config.beta * counts + config.log_normalizer)


def _check_window(config, cloud, paths, max_overflow):
    if cloud.t_max < config.t:
        raise WindowOverflowError("environment window ends before the horizon")
    out = np.abs(paths).max(axis=1) + config.r / 2.0 > cloud.L
    frac = float(out.mean())
    if frac > max_overflow:
        raise WindowOverflowError(f"{frac:.3%} of paths leave the window [-{cloud.L}, {cloud.L}]")


def point_to_line_W(config: PolymerConfig, cloud: PoissonCloud, n_path: int, n_steps: int | None, rng,
                    max_overflow: float = 0.0) -> float:
    """Path Monte Carlo estimate of ``W_t`` in one fixed environment."""
    n_steps = n_steps or config.default_steps()
    times, paths = sample_paths(config.stable, config.t, n_steps, n_path, rng)
    _check_window(config, cloud, paths, max_overflow)
    return float(_weights(config, cloud, times, paths).mean())


def point_to_point_W(config: PolymerConfig, cloud: PoissonCloud, x: float, n_path: int, n_steps: int | None,
                     rng, grid=None, max_overflow: float = 0.0, method: str = "auto") -> float:
    """Bridge Monte Carlo estimate of ``W_{t,x} = p(t,x) e^{-lambda v r t} E[e^{beta omega(V_t)} | X_t = x]``."""
    grid = grid or build_density_grid(config.stable)
    n_steps = n_steps or config.default_steps()
    times, paths = sample_bridges(grid, config.t, x, n_steps, n_path, rng, method=method)
    _check_window(config, cloud, paths, max_overflow)
    return float(density(grid, config.t, x) * _weights(config, cloud, times, paths).mean())


def _hit_probability(stable, s, x, width, n_path, rng, grid, conditional):
    """MC estimate of ``P(|x_i - X_{s_i}| <= width/2, i = 1..k)`` for ``X_0 = 0``."""
    s = np.asarray(s, dtype=float)
    x = np.asarray(x, dtype=float)
    k = len(s)
    ds = np.diff(np.concatenate([[0.0], s]))
    pos = np.zeros(n_path)
    alive = np.ones(n_path)
    last = k - 1 if conditional else k
    for i in range(last):
        pos = pos + sample_increments(stable, ds[i], n_path, rng)
        alive *= np.abs(x[i] - pos) <= width / 2.0
    if conditional:
        # integrate the last indicator out exactly given X_{s_{k-1}}
        d = x[-1] - pos
        alive *= cdf(grid, ds[-1], d + width / 2.0) - cdf(grid, ds[-1], d - width / 2.0)
    return float(alive.mean())


def _in_simplex(s, t):
    s = np.asarray(s, dtype=float)
    return bool(np.all(s > 0) and np.all(np.diff(s) > 0) and s[-1] <= t)


def chaos_coefficient(config: PolymerConfig, s, x, k: int, n_path: int, rng, grid=None,
                      conditional: bool = True) -> float:
    """``T_k W_t(s, x) = lambda(beta)**k P(|x_i - X_{s_i}| <= r/2 for all i)``.

    With ``conditional=True`` the last indicator is integrated out exactly
    given the previous position, which leaves the estimator unbiased and
    removes most of its variance for narrow tubes.
    """
    if k == 0:
        return 1.0
    s = np.atleast_1d(s)[:k]
    x = np.atleast_1d(x)[:k]
    if not _in_simplex(s, config.t):
        raise ValueError("s must lie in the simplex 0 < s_1 < ... < s_k <= t")
    grid = grid or build_density_grid(config.stable)
    p = _hit_probability(config.stable, s, x, config.r, n_path, rng, grid, conditional)
    return config.lam**k * p


def gamma_t(schedule: Schedule, t: float) -> float:
    """Normalizing constant linking the polymer chaos to the Gaussian limit."""
    a = schedule.alpha
    e = (a + 1.0) / (a - 1.0)
    lam = abs(schedule.lam(t))
    return abs(schedule.beta_star) ** (-e) * schedule.v(t) ** (1.0 / (a - 1.0)) * (schedule.r(t) * lam) ** e


def phi_t_k(schedule: Schedule, t: float, k: int, s, x, n_path: int, rng, grid=None,
            conditional: bool = True) -> float:
    """Rescaled chaos coefficient on unit-time paths with tube width ``r_t / t**(1/alpha)``."""
    if k == 0:
        return 1.0
    s = np.atleast_1d(s)[:k]
    x = np.atleast_1d(x)[:k]
    if not _in_simplex(s, 1.0):
        return 0.0
    grid = grid or build_density_grid(schedule.stable)
    width = schedule.r(t) / t ** (1.0 / schedule.alpha)
    p = _hit_probability(schedule.stable, s, x, width, n_path, rng, grid, conditional)
    return (schedule.lam(t) / gamma_t(schedule, t)) ** k * p


@dataclass
class AssumptionReport:
    t: np.ndarray
    a_ratio: np.ndarray
    b_quantity: np.ndarray
    c_quantity: np.ndarray
    a_exact: bool
    b_decreasing: bool
    c_decreasing: bool

    @property
    def ok(self) -> bool:
        return self.a_exact and self.b_decreasing and self.c_decreasing

    def rows(self):
        return list(zip(self.t.tolist(), self.a_ratio.tolist(), self.b_quantity.tolist(), self.c_quantity.tolist()))


def verify_assumptions(schedule: Schedule, t_list) -> AssumptionReport:
    t = np.asarray(t_list, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_list must be increasing")
    a = schedule.alpha
    v = np.array([schedule.v(x) for x in t])
    r = np.array([schedule.r(x) for x in t])
    lam = np.abs([schedule.lam(x) for x in t])
    a_ratio = v * r**2 * lam**2 / (schedule.beta_star**2 * t ** (-(1.0 - 1.0 / a)))
    b = v * r ** (a + 1.0) * lam ** (a + 1.0)
    c = r / t ** (1.0 / a)
    return AssumptionReport(
        t, a_ratio, b, c,
        a_exact=bool(np.all(np.abs(a_ratio - 1.0) <= 1e-12)),
        b_decreasing=bool(np.all(np.diff(b) < 0)),
        c_decreasing=bool(np.all(np.diff(c) < 0)),
    )


@dataclass
class WSamples:
    """Two independent path-batch estimates per environment replica."""

    w1: np.ndarray
    w2: np.ndarray
    enlarged: np.ndarray
    excluded: np.ndarray
    window: np.ndarray
    config: PolymerConfig
    n_path: int
    n_steps: int
    seed: int
    endpoint: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def ok(self) -> np.ndarray:
        return ~self.excluded

    @property
    def pooled(self) -> np.ndarray:
        return 0.5 * (self.w1 + self.w2)[self.ok]

    @property
    def products(self) -> np.ndarray:
        """Unbiased per-environment estimates of ``W**2`` (independent batches)."""
        return (self.w1 * self.w2)[self.ok]

    @property
    def overflow_fraction(self) -> float:
        """Fraction of replicas whose window had to be enlarged past the default."""
        return float(self.enlarged.mean())

    @property
    def excluded_fraction(self) -> float:
        return float(self.excluded.mean())

    @property
    def valid(self) -> bool:
        return self.excluded_fraction <= MAX_EXCLUDED


def _replica(i, config, seed, n_path, n_steps, endpoint, count_cap):
    times, paths = _paths_for(config, 2 * n_path, n_steps, streams.stream(seed, streams.PATHS, i), endpoint)
    L0 = config.default_window()
    # the window is sized after the paths are drawn: tubes are never clipped
    L = max(L0, float(np.abs(paths).max()) + 2.0 * config.r)
    enlarged = L > L0
    if config.v * config.t * 2.0 * L > count_cap:
        return math.nan, math.nan, enlarged, True, L
    cloud = sample_cloud(config.v, config.t, L, streams.stream(seed, streams.CLOUD, i), count_cap)
    w = _weights(config, cloud, times, paths)
    if endpoint is not None:
        w = w * density(build_density_grid(config.stable), config.t, endpoint)
    return float(w[:n_path].mean()), float(w[n_path:].mean()), enlarged, False, L


def sample_W_pairs(config: PolymerConfig, n_env: int, n_path: int, n_steps: int | None = None, seed: int = 0,
                   workers: int = 1, endpoint: float | None = None,
                   count_cap: float = DEFAULT_COUNT_CAP) -> WSamples:
    """Nested Monte Carlo: ``n_env`` environments, two batches of ``n_path`` paths each.

    With ``endpoint`` set, bridges to ``(t, endpoint)`` are used and the
    samples estimate the point-to-point ``W_{t, endpoint}``.
    """
    if n_env < 1 or n_path < 1:
        raise ValueError("budgets must be positive")
    n_steps = n_steps or config.default_steps()
    fn = functools.partial(_replica, config=config, seed=seed, n_path=n_path, n_steps=n_steps,
                           endpoint=endpoint, count_cap=count_cap)
    res = map_replicas(fn, n_env, workers)
    w1, w2, enl, exc, L = (np.array(c) for c in zip(*res))
    return WSamples(w1, w2, enl.astype(bool), exc.astype(bool), L, config, n_path, n_steps, seed, endpoint)


def sample_W_distribution(schedule: Schedule, t: float, n_env: int, n_path: int, n_steps: int | None = None,
                          seed: int = 0, workers: int = 1, endpoint: float | None = None) -> WSamples:
    return sample_W_pairs(schedule.config(t), n_env, n_path, n_steps, seed, workers, endpoint)


def estimate_W(config: PolymerConfig, n_env: int, n_path: int, n_steps: int | None = None, seed: int = 0,
               workers: int = 1, endpoint: float | None = None) -> PolymerEstimate:
    ws = sample_W_pairs(config, n_env, n_path, n_steps, seed, workers, endpoint)
    w = ws.pooled
    se = float(w.std(ddof=1) / math.sqrt(len(w))) if len(w) > 1 else 0.0
    return PolymerEstimate(float(w.mean()), se, n_env, 2 * n_path, ws.overflow_fraction)
