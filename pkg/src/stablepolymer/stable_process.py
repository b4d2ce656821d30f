"""Symmetric alpha-stable transition densities, increments, paths and bridges.

The process has characteristic function ``exp(-nu * t * |z|**alpha)``.  All
densities are served from a single unit-time table and the self-similarity
``p(t, x) = t**(-1/alpha) * p(1, t**(-1/alpha) * x)``.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid
from scipy.interpolate import CubicHermiteSpline
from scipy.special import erf, gamma

# fraction of the peak below which the table hands over to the power tail
TAIL_THRESHOLD = 1e-10
# half-width, in scale units, of the local bridge windows
BRIDGE_WINDOW = 12.0
BRIDGE_UNDERFLOW = 1e-12


class BridgeSamplingError(RuntimeError):
    """Conditional bridge density underflowed."""


@dataclass(frozen=True)
class StableParams:
    alpha: float = 2.0
    nu: float = 1.0

    def __post_init__(self):
        if not (1.0 < self.alpha <= 2.0):
            raise ValueError(f"alpha must lie in (1, 2], got {self.alpha}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")

    @property
    def gaussian(self) -> bool:
        return self.alpha == 2.0

    def scale(self, t: float) -> float:
        """Natural length scale ``(nu t)**(1/alpha)`` at time ``t``."""
        return (self.nu * t) ** (1.0 / self.alpha)

    @property
    def peak(self) -> float:
        """``p(1, 0) = Gamma(1 + 1/alpha) / (pi nu**(1/alpha))``."""
        return gamma(1.0 + 1.0 / self.alpha) / (math.pi * self.nu ** (1.0 / self.alpha))

    @property
    def tail_constant(self) -> float:
        """Leading coefficient of ``p(1, x) ~ C |x|**(-1-alpha)``; zero at alpha=2."""
        if self.gaussian:
            return 0.0
        a = self.alpha
        return self.nu * gamma(1.0 + a) * math.sin(math.pi * a / 2.0) / math.pi


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """Unit-time density table with a power-law continuation beyond ``x_cut``."""

    params: StableParams
    x_nodes: np.ndarray
    values: np.ndarray
    tail_coeff: float
    x_cut: float
    _interp: CubicHermiteSpline = field(repr=False, default=None)
    _antideriv: object = field(repr=False, default=None)
    _half_mass: float = field(repr=False, default=0.5)

    @property
    def alpha(self) -> float:
        return self.params.alpha

    def table_mass(self) -> float:
        """Trapezoidal mass of the table plus the analytic tail mass."""
        inside = self.x_nodes[np.abs(self.x_nodes) <= self.x_cut]
        vals = self.values[np.abs(self.x_nodes) <= self.x_cut]
        tail = 2.0 * self.tail_coeff * self.x_cut ** (-self.alpha) / self.alpha
        return float(trapezoid(vals, inside) + tail)

    def pdf1(self, x) -> np.ndarray:
        """Unit-time density ``p(1, x)``."""
        x = np.abs(np.asarray(x, dtype=float))
        p = self.params
        if p.gaussian:
            return np.exp(-x * x / (4.0 * p.nu)) / math.sqrt(4.0 * math.pi * p.nu)
        out = np.empty_like(x)
        inner = x <= self.x_cut
        out[inner] = self._interp(x[inner])
        xo = x[~inner]
        out[~inner] = self.tail_coeff * xo ** (-1.0 - self.alpha)
        return np.maximum(out, 0.0)

    def cdf1(self, x) -> np.ndarray:
        """Unit-time distribution function, exactly normalized."""
        x = np.asarray(x, dtype=float)
        p = self.params
        if p.gaussian:
            return 0.5 * (1.0 + erf(x / (2.0 * math.sqrt(p.nu))))
        ax = np.abs(x)
        scale = 0.5 / self._half_mass
        upper = np.empty_like(ax)
        inner = ax <= self.x_cut
        upper[inner] = 0.5 + (self._antideriv(ax[inner]) - self._antideriv(0.0)) * scale
        xo = ax[~inner]
        upper[~inner] = 1.0 - self.tail_coeff * xo ** (-self.alpha) / self.alpha * scale
        return np.where(x >= 0, upper, 1.0 - upper)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "p"])
            for xv, pv in zip(self.x_nodes, self.values):
                w.writerow([repr(float(xv)), repr(float(pv))])
        return path


@dataclass
class PathSkeleton:
    times: np.ndarray
    positions: np.ndarray
    is_bridge: bool = False
    endpoint: float | None = None

    def __post_init__(self):
        if self.positions[0] != 0.0:
            raise ValueError("paths start at the origin")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if self.is_bridge and self.positions[-1] != self.endpoint:
            raise ValueError("bridge must end at its endpoint")

    @property
    def t(self) -> float:
        return float(self.times[-1])

    def at(self, s) -> np.ndarray:
        """Piecewise-constant, right-continuous extension ``X(s)``."""
        idx = np.searchsorted(self.times, s, side="right") - 1
        return self.positions[np.clip(idx, 0, len(self.times) - 1)]


def _gl_nodes(alpha: float, xi_max: float, n_gl: int = 10):
    """Gauss-Legendre nodes/weights for the integral over u in (0, inf)."""
    u_max = 42.0 ** (1.0 / alpha)
    h = min(0.25, 3.0 / max(xi_max, 1.0))
    gx, gw = np.polynomial.legendre.leggauss(n_gl)
    # geometric panels resolve the |u|**alpha kink at the origin
    geo = h * 0.5 ** np.arange(52, -1, -1)
    edges = np.concatenate([geo, np.arange(2 * h, u_max + h, h)])
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    nodes = (0.5 * (a + b))[:, None] + half[:, None] * gx[None, :]
    weights = half[:, None] * gw[None, :]
    return nodes.ravel(), weights.ravel()


def _standard_density(alpha: float, xi: np.ndarray, chunk: int = 256):
    """``(1/pi) int_0^inf cos(xi u) exp(-u**alpha) du`` and its xi-derivative, for xi >= 0 (nu = 1)."""
    u, w = _gl_nodes(alpha, float(np.max(xi)))
    fw = np.exp(-(u**alpha)) * w
    out = np.empty(len(xi))
    der = np.empty(len(xi))
    for i in range(0, len(xi), chunk):
        arg = np.outer(xi[i : i + chunk], u)
        out[i : i + chunk] = np.cos(arg) @ fw
        der[i : i + chunk] = -(np.sin(arg) @ (u * fw))
    return out / math.pi, der / math.pi


def default_x_max(params: StableParams) -> float:
    if params.gaussian:
        return 20.0 * math.sqrt(params.nu)
    return 200.0 * params.nu ** (1.0 / params.alpha)


@functools.lru_cache(maxsize=32)
def _cached_grid(alpha: float, nu: float, x_max: float, n_nodes: int) -> DensityGrid:
    params = StableParams(alpha, nu)
    x = np.linspace(-x_max, x_max, n_nodes)
    ax = np.abs(x)
    if params.gaussian:
        values = np.exp(-ax * ax / (4.0 * nu)) / math.sqrt(4.0 * math.pi * nu)
    else:
        half = np.unique(ax)
        s = nu ** (-1.0 / alpha)
        half_vals, half_der = _standard_density(alpha, half * s)
        idx = np.searchsorted(half, ax)
        values = np.maximum(half_vals * s, 0.0)[idx]
        slopes = (half_der * s * s)[idx] * np.sign(x)
    peak = values.max()
    small = (values < TAIL_THRESHOLD * peak) & (x > 0)
    x_cut = float(x[small][0]) if np.any(small) else float(x_max)
    values.setflags(write=False)
    x.setflags(write=False)
    if params.gaussian:
        return DensityGrid(params, x, values, 0.0, x_cut)
    # cubic Hermite with exact slopes: fourth-order accurate, and shape preserving
    # at this resolution because the density is smooth and unimodal
    interp = CubicHermiteSpline(x, values, slopes)
    anti = interp.antiderivative()
    v_cut = float(interp(x_cut))
    tail_coeff = v_cut * x_cut ** (1.0 + alpha)
    half_mass = float(anti(x_cut) - anti(0.0)) + tail_coeff * x_cut ** (-alpha) / alpha
    return DensityGrid(params, x, values, tail_coeff, x_cut, interp, anti, half_mass)


def build_density_grid(
    params: StableParams, x_max: float | None = None, n_nodes: int | None = None
) -> DensityGrid:
    """Tabulate ``p(1, x)`` on a uniform symmetric grid by Fourier inversion.

    For alpha < 2 the inversion integral is done with graded Gauss-Legendre
    panels; beyond ``x_cut`` the table is continued by ``C |x|**(-1-alpha)``
    with ``C`` fixed by continuity at ``x_cut``.  At alpha = 2 the table is
    the closed-form Gaussian of variance ``2 nu``.
    """
    if x_max is None:
        x_max = default_x_max(params)
    if n_nodes is None:
        n_nodes = 2**12 + 1 if params.gaussian else 2**14 + 1
    if not x_max > 0:
        raise ValueError("x_max must be positive")
    if n_nodes < 2**10:
        raise ValueError("n_nodes must be at least 1024")
    return _cached_grid(float(params.alpha), float(params.nu), float(x_max), int(n_nodes))


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("time must be positive")
    return t


def density(grid: DensityGrid, t, x):
    """Transition density ``p(t, x)`` via the scaling transform."""
    t = _check_t(t)
    x = np.asarray(x, dtype=float)
    s = t ** (-1.0 / grid.alpha)
    out = s * grid.pdf1(x * s)
    return float(out) if out.ndim == 0 else out


def cdf(grid: DensityGrid, t, x):
    t = _check_t(t)
    out = grid.cdf1(np.asarray(x, dtype=float) * t ** (-1.0 / grid.alpha))
    return float(out) if np.ndim(out) == 0 else out


def multistep_density(grid: DensityGrid, s, x) -> float:
    """Product of one-step densities along ``(0,0) -> (s_1,x_1) -> ... -> (s_k,x_k)``."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if s.shape != x.shape:
        raise ValueError("s and x must have the same length")
    ds = np.diff(np.concatenate([[0.0], s]))
    if np.any(ds <= 0):
        raise ValueError("s must be strictly increasing and positive")
    dx = np.diff(np.concatenate([[0.0], x]))
    return float(np.prod(density(grid, ds, dx)))


def density_l2(params: StableParams, s: float) -> float:
    """Exact ``int p(s, x)**2 dx = Gamma(1 + 1/alpha) / (pi (2 nu s)**(1/alpha))``."""
    if s <= 0:
        raise ValueError("s must be positive")
    a = params.alpha
    return gamma(1.0 + 1.0 / a) / (math.pi * (2.0 * params.nu * s) ** (1.0 / a))


def sample_increments(params: StableParams, dt: float, size, rng: np.random.Generator):
    """Draws with density ``p(dt, .)``; Chambers-Mallows-Stuck for alpha < 2."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if params.gaussian:
        return math.sqrt(2.0 * params.nu * dt) * rng.standard_normal(size)
    a = params.alpha
    v = math.pi * (rng.random(size) - 0.5)
    w = rng.standard_exponential(size)
    x = np.sin(a * v) / np.cos(v) ** (1.0 / a) * (np.cos((1.0 - a) * v) / w) ** ((1.0 - a) / a)
    bad = ~np.isfinite(x)
    # v = -pi/2 or w = 0 happen with probability ~2**-53; redraw those cells
    while np.any(bad):
        x[bad] = sample_increments(params, 1.0 / params.nu, int(bad.sum()), rng)
        bad = ~np.isfinite(x)
    return params.scale(dt) * x


def sample_increment(params: StableParams, dt: float, rng: np.random.Generator) -> float:
    return float(sample_increments(params, dt, 1, rng)[0])


def sample_paths(params: StableParams, t: float, n_steps: int, n_paths: int, rng):
    """Return ``(times, positions)`` with positions of shape ``(n_paths, n_steps + 1)``."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    times = np.linspace(0.0, t, n_steps + 1)
    inc = sample_increments(params, t / n_steps, (n_paths, n_steps), rng)
    pos = np.zeros((n_paths, n_steps + 1))
    np.cumsum(inc, axis=1, out=pos[:, 1:])
    return times, pos


def sample_path(params: StableParams, t: float, n_steps: int, rng) -> PathSkeleton:
    times, pos = sample_paths(params, t, n_steps, 1, rng)
    return PathSkeleton(times, pos[0])


def _inverse_cdf_rows(nodes, q, u):
    """Sample from row-wise piecewise-linear densities ``q`` on sorted ``nodes``."""
    widths = np.diff(nodes, axis=1)
    cells = 0.5 * (q[:, 1:] + q[:, :-1]) * widths
    cum = np.cumsum(cells, axis=1)
    total = cum[:, -1]
    target = u * total
    k = np.minimum((cum < target[:, None]).sum(axis=1), cells.shape[1] - 1)
    rows = np.arange(len(u))
    before = np.where(k > 0, cum[rows, np.maximum(k - 1, 0)], 0.0)
    delta = np.clip(target - before, 0.0, None)
    w = widths[rows, k]
    q0 = q[rows, k]
    q1 = q[rows, k + 1]
    slope = (q1 - q0) / np.where(w > 0, w, 1.0)
    disc = np.sqrt(np.maximum(q0 * q0 + 2.0 * slope * delta, 0.0))
    denom = q0 + disc
    tau = np.where(denom > 0, 2.0 * delta / np.where(denom > 0, denom, 1.0), 0.0)
    return nodes[rows, k] + np.minimum(tau, w), total


@dataclass
class BridgeDiagnostics:
    # sequential conditional mass before normalization, divided by
    # p(t - s_prev, x_end - X_prev); equals 1 up to quadrature error
    ck_ratio: np.ndarray
    min_mass: float


def sample_bridges(
    grid: DensityGrid,
    t: float,
    x_end: float,
    n_steps: int,
    n_paths: int,
    rng: np.random.Generator,
    method: str = "table",
    n_local: int = 201,
    return_diagnostics: bool = False,
):
    """Bridges from 0 to ``x_end`` at time ``t`` on a uniform grid.

    ``method="table"`` draws each node from the normalized conditional density
    ``p(ds, y - X_prev) p(t - s, x_end - y)`` by inverse CDF on a local node
    set covering ``X_prev``, ``x_end`` and the segment between them.
    ``method="gaussian"`` uses the exact Brownian-bridge transition (alpha=2
    only); ``"auto"`` picks it whenever alpha = 2.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    params = grid.params
    if method == "auto":
        method = "gaussian" if params.gaussian else "table"
    if method == "gaussian" and not params.gaussian:
        raise ValueError("the gaussian bridge needs alpha = 2")
    times = np.linspace(0.0, t, n_steps + 1)
    pos = np.zeros((n_paths, n_steps + 1))
    ratios = np.ones((n_steps - 1, n_paths)) if n_steps > 1 else np.ones((0, n_paths))
    min_mass = np.inf
    a = np.linspace(-BRIDGE_WINDOW, BRIDGE_WINDOW, n_local)
    c = np.linspace(0.0, 1.0, max(n_local // 2, 3))
    for i in range(1, n_steps):
        prev = pos[:, i - 1]
        ds = times[i] - times[i - 1]
        rem = t - times[i]
        if method == "gaussian":
            tot = t - times[i - 1]
            mean = prev + ds / tot * (x_end - prev)
            var = 2.0 * params.nu * ds * rem / tot
            pos[:, i] = mean + math.sqrt(var) * rng.standard_normal(n_paths)
            continue
        s1, s2 = params.scale(ds), params.scale(rem)
        nodes = np.concatenate(
            [
                prev[:, None] + s1 * a[None, :],
                x_end + s2 * np.broadcast_to(a, (n_paths, len(a))),
                prev[:, None] + (x_end - prev)[:, None] * c[None, :],
            ],
            axis=1,
        )
        nodes.sort(axis=1)
        q = density(grid, ds, nodes - prev[:, None]) * density(grid, rem, x_end - nodes)
        draw, mass = _inverse_cdf_rows(nodes, q, rng.random(n_paths))
        if np.any(mass < BRIDGE_UNDERFLOW):
            raise BridgeSamplingError(
                f"conditional density mass {mass.min():.3g} below {BRIDGE_UNDERFLOW:g} at step {i}"
            )
        min_mass = min(min_mass, float(mass.min()))
        ratios[i - 1] = mass / density(grid, t - times[i - 1], x_end - prev)
        pos[:, i] = draw
    pos[:, -1] = x_end
    if return_diagnostics:
        return times, pos, BridgeDiagnostics(ratios, min_mass)
    return times, pos


def sample_bridge(grid: DensityGrid, t: float, x_end: float, n_steps: int, rng, method="table"):
    times, pos = sample_bridges(grid, t, x_end, n_steps, 1, rng, method=method)
    return PathSkeleton(times, pos[0], is_bridge=True, endpoint=float(x_end))
