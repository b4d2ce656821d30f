"""Fractional stochastic heat equation driven by space-time white noise.

Two discretizations share one noise grid so they can be compared pathwise:
a truncated Wiener chaos series built by a strictly causal space-time
recursion, and Euler-Duhamel time stepping.

A kernel running from or to a noise cell over ``m`` whole steps plus part of
a cell is evaluated at the effective time ``tau_m`` whose ``s**(-1/alpha)``
equals the average over ``(m dt, (m+1) dt)``, so each cell carries the exact
``L^2`` mass of ``p(s, .)``.  ``tau_0 = theta``, by default
``dt ((alpha-1)/alpha)**alpha``; ``theta = 0`` gives the plain left-point
scheme in the first cell.  The Duhamel stepper keeps whole steps between
noise cells and applies ``P_theta`` on both sides of the noise, which is
exact in the first and last cell; between neighbouring cells its kernel runs
for ``2 theta`` instead of ``tau_0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.special import gamma as G

from .stable_process import DensityGrid, StableParams, build_density_grid, cdf, density

INSTABILITY = 1e12
DEFAULT_MEMORY_CAP = 1 << 30
MAX_ORDER = 8


class SheInstabilityError(RuntimeError):
    """Time stepping produced values beyond the instability threshold."""


@dataclass(frozen=True, eq=False)
class NoiseGrid:
    """Cell-averaged white noise on ``[0, t_max) x {j dx : |j| <= J}``.

    ``xi`` has shape ``(..., n_t, n_x)``; leading axes index independent
    replicas.  Each value has variance ``1/(dt dx)``.
    """

    dt: float
    dx: float
    t_max: float
    x_max: float
    xi: np.ndarray
    seed: int | None = None

    @property
    def n_t(self) -> int:
        return self.xi.shape[-2]

    @property
    def n_x(self) -> int:
        return self.xi.shape[-1]

    @property
    def half(self) -> int:
        return (self.n_x - 1) // 2

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(-self.half, self.half + 1)

    @property
    def times(self) -> np.ndarray:
        """Left endpoints of the time cells."""
        return self.dt * np.arange(self.n_t)

    @property
    def batch_shape(self) -> tuple:
        return self.xi.shape[:-2]

    def restrict(self, t: float) -> "NoiseGrid":
        n = _steps(t, self.dt)
        if n > self.n_t:
            raise ValueError(f"t={t} beyond the noise horizon {self.t_max}")
        return NoiseGrid(self.dt, self.dx, n * self.dt, self.x_max, self.xi[..., :n, :], self.seed)


def _steps(t, dt):
    n = round(t / dt)
    if n < 1 or abs(n * dt - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"t={t} is not a positive multiple of dt={dt}")
    return n


def sample_noise(dt: float, dx: float, t_max: float, x_max: float, rng, size: int | None = None,
                 memory_cap: int = DEFAULT_MEMORY_CAP, seed: int | None = None) -> NoiseGrid:
    if not (dt > 0 and dx > 0 and t_max > 0 and x_max > 0):
        raise ValueError("steps and extents must be positive")
    n_t = _steps(t_max, dt)
    half = math.ceil(x_max / dx - 1e-9)
    shape = (n_t, 2 * half + 1) if size is None else (size, n_t, 2 * half + 1)
    if 8 * math.prod(shape) > memory_cap:
        raise MemoryError(f"noise grid {shape} exceeds the memory cap of {memory_cap} bytes")
    xi = rng.standard_normal(shape) / math.sqrt(dt * dx)
    return NoiseGrid(dt, dx, n_t * dt, half * dx, xi, seed)


def stack_noise(grids) -> NoiseGrid:
    """Combine single-replica grids into one batched grid."""
    grids = list(grids)
    g = grids[0]
    return NoiseGrid(g.dt, g.dx, g.t_max, g.x_max, np.stack([h.xi for h in grids]), g.seed)


def discrete_I1(noise: NoiseGrid, g) -> np.ndarray | float:
    """``sum g xi dt dx``.

    ``g`` is an ``(n_t, n_x)`` array or a callable evaluated at cell
    midpoints in time and at the spatial nodes.
    """
    if callable(g):
        s = noise.times + 0.5 * noise.dt
        g = g(s[:, None], noise.x[None, :])
    g = np.broadcast_to(np.asarray(g, dtype=float), (noise.n_t, noise.n_x))
    out = np.einsum("...ij,ij->...", noise.xi, g) * noise.dt * noise.dx
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SheConfig:
    """Discretization of the SHE solvers; ``None`` fields get defaults from the parameters."""

    dt: float = 0.05
    dx: float | None = None
    x_max: float | None = None
    theta: float | None = None
    K: int = 6
    dx_factor: float = 1.5
    window_scales: float = 12.0
    memory_cap: int = DEFAULT_MEMORY_CAP

    def offset(self, params: StableParams) -> float:
        if self.theta is not None:
            if not (0.0 <= self.theta < self.dt):
                raise ValueError("theta must lie in [0, dt)")
            return self.theta
        return self.dt * ((params.alpha - 1.0) / params.alpha) ** params.alpha

    def spacing(self, params: StableParams) -> float:
        if self.dx is not None:
            return self.dx
        th = self.offset(params) or self.dt
        return self.dx_factor * (params.nu * th) ** (1.0 / params.alpha)

    def window(self, params: StableParams, t: float) -> float:
        if self.x_max is not None:
            return self.x_max
        return self.window_scales * (2.0 * params.nu * t) ** (1.0 / params.alpha)

    def noise(self, params: StableParams, t: float, rng, size=None, seed=None) -> NoiseGrid:
        return sample_noise(self.dt, self.spacing(params), t, self.window(params, t), rng, size, self.memory_cap,
                            seed)

    def stability_ratio(self, params: StableParams) -> float:
        """``dt / (dx**alpha / (4 nu))``; above 1 the explicit finite-difference heuristic fails.

        The solvers here convolve with exact kernels and stay stable regardless.
        """
        return self.dt / (self.spacing(params) ** params.alpha / (4.0 * params.nu))

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("dt", "dx", "x_max", "theta", "K", "dx_factor", "window_scales")}


@dataclass
class SheSolution:
    times: np.ndarray
    x: np.ndarray
    values: np.ndarray
    params: StableParams
    beta: float
    scheme: str
    K: int | None
    theta: float
    mass_loss: float
    meta: dict = field(default_factory=dict)

    def at(self, x: float) -> np.ndarray | float:
        """Final-time value at the node ``x``."""
        j = _node(self.x, x)
        out = self.values[..., -1, j]
        return float(out) if np.ndim(out) == 0 else out

    def to_csv(self, path):
        from pathlib import Path

        vals = self.values
        if vals.ndim != 2:
            raise ValueError("only single-replica solutions can be exported")
        lines = ["t,x,Z"]
        for i, t in enumerate(self.times.tolist()):
            lines += [f"{t!r},{x!r},{z!r}" for x, z in zip(self.x.tolist(), vals[i].tolist())]
        Path(path).write_text("\n".join(lines) + "\n")
        return Path(path)


def _node(xs, x):
    dx = xs[1] - xs[0]
    j = int(round((x - xs[0]) / dx))
    if not (0 <= j < len(xs)) or abs(xs[j] - x) > 1e-9 * max(1.0, abs(x)) + 1e-12:
        raise ValueError(f"x={x} is not a grid node")
    return j


class _Ops:
    """Kernel weights and FFT convolutions on a fixed noise geometry."""

    def __init__(self, grid: DensityGrid, noise: NoiseGrid):
        self.grid = grid
        self.dx = noise.dx
        self.dt = noise.dt
        self.J = noise.half
        self.offsets = noise.dx * np.arange(-2 * self.J, 2 * self.J + 1)
        self.nx_fft = sfft.next_fast_len(4 * self.J + 1, real=True)
        self._cache = {}

    def weights(self, s: float) -> np.ndarray:
        if s <= 0:
            w = np.zeros(len(self.offsets))
            w[2 * self.J] = 1.0
            return w
        return density(self.grid, s, self.offsets) * self.dx

    def _hat(self, s):
        key = round(s / self.dt * 2**20)
        if key not in self._cache:
            self._cache[key] = sfft.rfft(self.weights(s), self.nx_fft)
        return self._cache[key]

    def conv(self, z, s):
        """``sum_y p(s, x - y) z(y) dx`` on the window, mass leaving it is dropped."""
        if s <= 0:
            return z
        out = sfft.irfft(sfft.rfft(z, self.nx_fft, axis=-1) * self._hat(s), self.nx_fft, axis=-1)
        return out[..., 2 * self.J : 4 * self.J + 1]


def _grid_for(params, grid):
    if grid is None:
        return build_density_grid(params)
    if grid.params != params:
        raise ValueError("density grid built for different parameters")
    return grid


def _theta(noise, params, theta):
    if theta is None:
        return noise.dt * ((params.alpha - 1.0) / params.alpha) ** params.alpha
    if not (0.0 <= theta < noise.dt):
        raise ValueError("theta must lie in [0, dt)")
    return float(theta)


def _check_order(K, max_order):
    if K < 0:
        raise ValueError("K must be >= 0")
    if K > max_order:
        raise ValueError(f"K={K} exceeds the maximal chaos order {max_order}")


def _tau(n, dt, theta, alpha):
    """Effective kernel times for a cell ``m = 0..n-1`` steps away from the kernel's other end."""
    m = np.arange(n, dtype=float)
    q = 1.0 - 1.0 / alpha
    avg = ((m + 1) ** q - m**q) / q
    tau = dt * avg ** (-alpha)
    tau[0] = theta
    return tau


def _chaos_levels(noise, params, beta, K, grid, theta):
    """Yield ``H_k = G_k xi`` for ``k = 1..K``; ``G_k`` is the order-k integrand at the noise events."""
    ops = _Ops(grid, noise)
    n, dt = noise.n_t, noise.dt
    J = noise.half
    u = _tau(n, dt, theta, params.alpha)
    g = np.stack([ops.weights(s)[J : 3 * J + 1] / noise.dx for s in u])
    if K == 0:
        return ops, u, []
    nt_fft = sfft.next_fast_len(2 * n - 1, real=False)
    kern = np.zeros((n, 4 * J + 1))
    for m in range(1, n):
        kern[m] = ops.weights(u[m - 1])
    khat = sfft.rfft2(kern, (nt_fft, ops.nx_fft))
    levels = []
    h = g * noise.xi
    levels.append(h)
    for _ in range(K - 1):
        full = sfft.irfft2(sfft.rfft2(h, (nt_fft, ops.nx_fft)) * khat, (nt_fft, ops.nx_fft))
        g = beta * dt * full[..., :n, 2 * J : 4 * J + 1]
        h = g * noise.xi
        levels.append(h)
    return ops, u, levels


def chaos_terms(noise: NoiseGrid, params: StableParams, beta: float, K: int, grid: DensityGrid | None = None,
                theta: float | None = None, max_order: int = MAX_ORDER) -> np.ndarray:
    """Chaos contributions to ``Z(t_max, .)``, shape ``(K+1, *batch, n_x)``; row 0 is ``p(t_max, .)``."""
    _check_order(K, max_order)
    grid = _grid_for(params, grid)
    theta = _theta(noise, params, theta)
    t = noise.t_max
    p_t = density(grid, t, noise.x)
    out = np.zeros((K + 1, *noise.batch_shape, noise.n_x))
    out[0] = p_t
    if K == 0 or beta == 0:
        return out
    ops, u, levels = _chaos_levels(noise, params, beta, K, grid, theta)
    J = noise.half
    fin = np.stack([sfft.rfft(ops.weights(s), ops.nx_fft) for s in u[::-1]])
    for k, h in enumerate(levels, start=1):
        spec = (sfft.rfft(h, ops.nx_fft, axis=-1) * fin).sum(axis=-2)
        out[k] = beta * noise.dt * sfft.irfft(spec, ops.nx_fft, axis=-1)[..., 2 * J : 4 * J + 1]
    return out


def chaos_profile(noise: NoiseGrid, params: StableParams, beta: float, K: int, grid: DensityGrid | None = None,
                  theta: float | None = None, max_order: int = MAX_ORDER) -> SheSolution:
    grid = _grid_for(params, grid)
    th = _theta(noise, params, theta)
    terms = chaos_terms(noise, params, beta, K, grid, th, max_order)
    vals = terms.sum(axis=0)[..., None, :]
    return SheSolution(np.array([noise.t_max]), noise.x, vals, params, beta, "chaos", K, th,
                       _mass_loss(grid, noise))


def chaos_solve(noise: NoiseGrid, params: StableParams, beta: float, K: int, t: float, x: float,
                grid: DensityGrid | None = None, theta: float | None = None, max_order: int = MAX_ORDER):
    """Truncated chaos series ``sum_{k<=K} F_k(t, x)`` at a grid point."""
    sub = noise.restrict(t)
    j = _node(sub.x, x)
    out = chaos_terms(sub, params, beta, K, grid, theta, max_order)[..., j].sum(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def chaos_point_to_line_terms(noise: NoiseGrid, params: StableParams, beta: float, K: int,
                              grid: DensityGrid | None = None, theta: float | None = None,
                              max_order: int = MAX_ORDER) -> np.ndarray:
    """Chaos contributions to ``int Z(t_max, x) dx``, shape ``(K+1, *batch)``.

    Integrating the terminal kernel over ``x`` gives one, so each order is
    ``beta dt dx sum G_k xi`` and order zero is exactly 1.
    """
    _check_order(K, max_order)
    grid = _grid_for(params, grid)
    theta = _theta(noise, params, theta)
    out = np.zeros((K + 1, *noise.batch_shape))
    out[0] = 1.0
    if K == 0 or beta == 0:
        return out
    _, _, levels = _chaos_levels(noise, params, beta, K, grid, theta)
    for k, h in enumerate(levels, start=1):
        out[k] = beta * noise.dt * noise.dx * h.sum(axis=(-2, -1))
    return out


def chaos_point_to_line(noise: NoiseGrid, params: StableParams, beta: float, K: int,
                        grid: DensityGrid | None = None, theta: float | None = None,
                        max_order: int = MAX_ORDER):
    out = chaos_point_to_line_terms(noise, params, beta, K, grid, theta, max_order).sum(axis=0)
    return float(out) if np.ndim(out) == 0 else out


def duhamel_solve(noise: NoiseGrid, params: StableParams, beta: float, grid: DensityGrid | None = None,
                  theta: float | None = None) -> SheSolution:
    """Euler-Duhamel stepping ``Z_{j+1} = P_dt Z_j + beta dt P_theta((P_theta Z_j) xi_j)`` from ``delta_0``."""
    grid = _grid_for(params, grid)
    theta = _theta(noise, params, theta)
    ops = _Ops(grid, noise)
    n, dt, J = noise.n_t, noise.dt, noise.half
    z = np.zeros((*noise.batch_shape, noise.n_x))
    z[..., J] = 1.0 / noise.dx
    vals = np.empty((*noise.batch_shape, n + 1, noise.n_x))
    vals[..., 0, :] = z
    for j in range(n):
        nxt = ops.conv(z, dt)
        if beta != 0:
            nxt = nxt + beta * dt * ops.conv(ops.conv(z, theta) * noise.xi[..., j, :], theta)
        z = nxt
        if not np.all(np.abs(z) < INSTABILITY):
            raise SheInstabilityError(f"|Z| exceeded {INSTABILITY:g} at t={(j + 1) * dt:g}")
        vals[..., j + 1, :] = z
    return SheSolution(np.arange(n + 1) * dt, noise.x, vals, params, beta, "duhamel", None, theta,
                       _mass_loss(grid, noise))


def _mass_loss(grid, noise):
    """Heat-kernel mass outside the window at the final time."""
    return float(2.0 * (1.0 - cdf(grid, noise.t_max, noise.half * noise.dx + 0.5 * noise.dx)))


@dataclass
class MomentSeries:
    alpha: float
    nu: float
    beta: float
    terms: np.ndarray
    bound_terms: np.ndarray

    @property
    def total(self) -> float:
        return float(self.terms.sum())

    @property
    def partial_sums(self) -> np.ndarray:
        return np.cumsum(self.terms)


def second_moment_series(params: StableParams, beta: float, K: int = 50) -> MomentSeries:
    """``E[Z**2]`` of the point-to-line SHE solution at ``t = 1``, order by order.

    Term ``k`` is ``beta**(2k) c**k Gamma(1-1/alpha)**k / Gamma(k(1-1/alpha)+1)``
    with ``c = int p(1,x)**2 dx``.  ``bound_terms`` replaces ``c`` by the peak
    ``p(1,0) >= c``.
    """
    a = params.alpha
    if a <= 1.05:
        raise ValueError("alpha <= 1.05: Gamma(1 - 1/alpha) blows up")
    if not (0 <= K <= 50):
        raise ValueError("K must lie in [0, 50]")
    k = np.arange(K + 1, dtype=float)
    c = G(1.0 + 1.0 / a) / (math.pi * (2.0 * params.nu) ** (1.0 / a))
    g1 = G(1.0 - 1.0 / a)
    denom = G(k * (1.0 - 1.0 / a) + 1.0)
    terms = (beta**2 * c * g1) ** k / denom
    bound = (beta**2 * params.peak * g1) ** k / denom
    return MomentSeries(a, params.nu, beta, terms, bound)
