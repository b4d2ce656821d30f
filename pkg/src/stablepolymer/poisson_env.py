"""Poisson space-time environments, tube counts and Poisson Wiener-Ito integrals."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stable_process import PathSkeleton

DEFAULT_COUNT_CAP = 1e8


class QuadratureError(RuntimeError):
    """Deterministic part of a Wiener-Ito integral did not converge."""


@dataclass(frozen=True, eq=False)
class PoissonCloud:
    """Finite realization of intensity ``v ds dy`` on ``(0, t_max] x [-L, L]``.

    Points are stored sorted by time.
    """

    s: np.ndarray
    y: np.ndarray
    t_max: float
    L: float
    v: float
    seed: int | None = None

    def __len__(self):
        return len(self.s)

    @property
    def area(self) -> float:
        return 2.0 * self.L * self.t_max

    def restrict(self, t: float) -> "PoissonCloud":
        """The sub-cloud ``omega_t`` of points with ``s <= t``."""
        keep = self.s <= t
        return PoissonCloud(self.s[keep], self.y[keep], min(t, self.t_max), self.L, self.v, self.seed)

    def header(self) -> dict:
        return {"v": self.v, "t_max": self.t_max, "L": self.L, "seed": self.seed, "n": len(self)}

    def to_csv(self, path) -> Path:
        path = Path(path)
        lines = ["# " + json.dumps(self.header(), sort_keys=True), "s,y"]
        lines += [f"{a!r},{b!r}" for a, b in zip(self.s.tolist(), self.y.tolist())]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "PoissonCloud":
        text = Path(path).read_text().splitlines()
        head = json.loads(text[0][2:])
        rows = [tuple(map(float, ln.split(","))) for ln in text[2:] if ln]
        arr = np.array(rows, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1], head["t_max"], head["L"], head["v"], head["seed"])


@dataclass(frozen=True)
class TubeSpec:
    r: float

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("tube width r must be positive")


def sample_cloud(v, t_max, L, rng, count_cap=DEFAULT_COUNT_CAP, seed=None) -> PoissonCloud:
    if v < 0 or not (t_max > 0 and L > 0):
        raise ValueError("need v >= 0 and positive window")
    mean = v * t_max * 2.0 * L
    if mean > count_cap:
        raise ValueError(f"expected point count {mean:.3g} exceeds cap {count_cap:.3g}")
    n = int(rng.poisson(mean)) if mean > 0 else 0
    s = t_max * (1.0 - rng.random(n))  # (0, t_max]
    y = L * (2.0 * rng.random(n) - 1.0)
    order = np.argsort(s, kind="stable")
    return PoissonCloud(s[order], y[order], float(t_max), float(L), float(v), seed)


def tube_counts(cloud: PoissonCloud, times, positions, r: float, t: float | None = None):
    """``omega(V_t(X))`` for every row of ``positions``.

    A point ``(s, y)`` with ``0 < s <= t`` is collected by path ``X`` when
    ``|y - X(s)| <= r/2``, ``X`` being the right-continuous step extension of
    the skeleton.  Per time cell the paths are sorted once and each point
    covers a contiguous rank range, so the cost is ``O(points log paths)``.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    times = np.asarray(times, dtype=float)
    n_paths, n_nodes = positions.shape
    t = times[-1] if t is None else t
    keep = (cloud.s > 0) & (cloud.s <= t)
    s, y = cloud.s[keep], cloud.y[keep]
    counts = np.zeros(n_paths, dtype=np.int64)
    if len(s) == 0:
        return counts
    lo_all, hi_all = positions.min(), positions.max()
    band = (y >= lo_all - r / 2) & (y <= hi_all + r / 2)
    s, y = s[band], y[band]
    if len(s) == 0:
        return counts
    cells = np.clip(np.searchsorted(times, s, side="right") - 1, 0, n_nodes - 1)
    order = np.argsort(cells, kind="stable")
    cells, y = cells[order], y[order]
    uniq, starts = np.unique(cells, return_index=True)
    stops = np.append(starts[1:], len(cells))
    half = 0.5 * r
    cover = np.empty(n_paths + 1, dtype=np.int64)
    for c, a, b in zip(uniq, starts, stops):
        col = positions[:, c]
        rank = np.argsort(col, kind="stable")
        sc = col[rank]
        yy = y[a:b]
        lo = np.searchsorted(sc, yy - half, side="left")
        hi = np.searchsorted(sc, yy + half, side="right")
        cover[:] = 0
        np.add.at(cover, lo, 1)
        np.add.at(cover, hi, -1)
        counts[rank] += np.cumsum(cover[:-1])
    return counts


def tube_count(cloud: PoissonCloud, path: PathSkeleton, spec: TubeSpec, t: float | None = None) -> int:
    return int(tube_counts(cloud, path.times, path.positions[None, :], spec.r, t)[0])


def _points(cloud):
    return np.column_stack([cloud.s, cloud.y])


def _ordered_tuples(n: int, m: int) -> np.ndarray:
    if m == 1:
        return np.arange(n)[:, None]
    if n < m:
        return np.zeros((0, m), dtype=int)
    return np.array(list(itertools.permutations(range(n), m)), dtype=int)


def factorial_measure(cloud: PoissonCloud, f, m: int) -> float:
    """``omega^(m)(f)``: sum of ``f`` over ordered m-tuples of distinct points.

    ``f`` is called as ``f(s_1, y_1, ..., s_m, y_m)`` with array arguments.
    """
    if m not in (1, 2, 3):
        raise ValueError("factorial measures are supported for m in {1, 2, 3}")
    idx = _ordered_tuples(len(cloud), m)
    if len(idx) == 0:
        return 0.0
    args = []
    for j in range(m):
        args += [cloud.s[idx[:, j]], cloud.y[idx[:, j]]]
    return float(np.sum(f(*args)))


class BoxKernel:
    """Symmetrized tensor product of box indicators ``1_{A_1} x ... x 1_{A_m}``.

    Boxes are ``(s0, s1, y0, y1)``.  Partial integrals are exact.
    """

    def __init__(self, *boxes, weight: float = 1.0):
        self.boxes = [tuple(map(float, b)) for b in boxes]
        self.m = len(self.boxes)
        self.weight = weight
        self._perms = list(itertools.permutations(range(self.m)))

    @staticmethod
    def _ind(box, s, y):
        s0, s1, y0, y1 = box
        s, y = np.asarray(s), np.asarray(y)
        return ((s > s0) & (s <= s1) & (y >= y0) & (y <= y1)).astype(float)

    @staticmethod
    def _area(box):
        return (box[1] - box[0]) * (box[3] - box[2])

    def __call__(self, *coords):
        out = 0.0
        for perm in self._perms:
            term = 1.0
            for i, j in enumerate(perm):
                term = term * self._ind(self.boxes[j], coords[2 * i], coords[2 * i + 1])
            out = out + term
        return self.weight * out / len(self._perms)

    def marginal(self, fixed):
        """Integral over the last ``m - k`` coordinates; ``fixed`` is a list of k (s, y) pairs."""
        k = len(fixed)
        out = 0.0
        for perm in self._perms:
            term = 1.0
            for i, j in enumerate(perm):
                if i < k:
                    term = term * self._ind(self.boxes[j], *fixed[i])
                else:
                    term = term * self._area(self.boxes[j])
            out = out + term
        return self.weight * out / len(self._perms)

    def inner(self, other: "BoxKernel") -> float:
        """Exact ``int f g`` against Lebesgue measure on ``(R_+ x R)^m``."""
        if other.m != self.m:
            return 0.0
        tot = 0.0
        for p in self._perms:
            for q in other._perms:
                prod = 1.0
                for i in range(self.m):
                    a, b = self.boxes[p[i]], other.boxes[q[i]]
                    ds = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
                    dy = max(0.0, min(a[3], b[3]) - max(a[2], b[2]))
                    prod *= ds * dy
                tot += prod
        return self.weight * other.weight * tot / (len(self._perms) * len(other._perms))


class QuadratureKernel:
    """Symmetric kernel given by a callable; partial integrals by quadrature.

    Integrals over the window ``(0, t_max] x [-L, L]`` use tensor-product
    trapezoidal rules on ``2**j + 1`` nodes per axis, refined (with Richardson
    extrapolation) until successive estimates agree to ``rtol``.
    """

    def __init__(self, func, m: int, t_max: float, L: float, rtol: float = 1e-6, max_level: int = 7):
        self.func = func
        self.m = m
        self.t_max = t_max
        self.L = L
        self.rtol = rtol
        self.max_level = max_level

    def __call__(self, *coords):
        return self.func(*coords)

    def _trap(self, fixed, level):
        n = 2**level + 1
        sg = np.linspace(0.0, self.t_max, n)
        yg = np.linspace(-self.L, self.L, n)
        w = np.ones(n)
        w[0] = w[-1] = 0.5
        hs, hy = self.t_max / (n - 1), 2.0 * self.L / (n - 1)
        free = self.m - len(fixed)
        axes = [sg, yg] * free
        grids = np.meshgrid(*axes, indexing="ij", sparse=True)
        wt = 1.0
        for g_i in range(free):
            shape = [1] * (2 * free)
            shape[2 * g_i] = n
            wt = wt * (w * hs).reshape(shape)
            shape = [1] * (2 * free)
            shape[2 * g_i + 1] = n
            wt = wt * (w * hy).reshape(shape)
        args = []
        for s_, y_ in fixed:
            args += [s_, y_]
        vals = self.func(*args, *grids)
        return float(np.sum(vals * wt))

    def marginal(self, fixed):
        if len(fixed) == self.m:
            return self.func(*[c for pt in fixed for c in pt])
        fixed_pts = [tuple(np.asarray(c, dtype=float) for c in pt) for pt in fixed]
        n_rows = len(np.atleast_1d(fixed_pts[0][0])) if fixed_pts else 1
        out = np.empty(n_rows)
        for i in range(n_rows):
            pts = [(np.atleast_1d(s_)[i], np.atleast_1d(y_)[i]) for s_, y_ in fixed_pts]
            out[i] = self._integrate(pts)
        return out if fixed_pts else float(out[0])

    def _integrate(self, pts):
        prev_t = self._trap(pts, 2)
        prev_r = None
        for level in range(3, self.max_level + 1):
            t_ = self._trap(pts, level)
            r_ = (4.0 * t_ - prev_t) / 3.0
            if prev_r is not None and abs(r_ - prev_r) <= self.rtol * max(abs(r_), 1e-300):
                return r_
            if prev_r is not None and abs(r_) < 1e-300 and abs(prev_r) < 1e-300:
                return 0.0
            prev_t, prev_r = t_, r_
        raise QuadratureError(
            f"quadrature did not reach relative tolerance {self.rtol:g} at {2**self.max_level + 1} nodes/axis"
        )


def wiener_ito(cloud: PoissonCloud, f, m: int):
    """Poisson Wiener-Ito integral of order ``m`` of the symmetric kernel ``f``.

    ``sum_k (-1)**(m-k) C(m,k) omega^(k) x v^(m-k) (f)``; ``f`` must expose
    ``marginal(fixed_points)`` (see :class:`BoxKernel`, :class:`QuadratureKernel`).
    For ``m = 0`` the kernel itself is returned.
    """
    if m == 0:
        return f
    if m not in (1, 2):
        raise ValueError("Wiener-Ito integrals are supported for m in {0, 1, 2}")
    if not hasattr(f, "marginal"):
        f = QuadratureKernel(f, m, cloud.t_max, cloud.L)
    v = cloud.v
    total = 0.0
    for k in range(m + 1):
        coef = (-1) ** (m - k) * math.comb(m, k) * v ** (m - k)
        if k == 0:
            part = float(f.marginal([]))
        else:
            idx = _ordered_tuples(len(cloud), k)
            if len(idx) == 0:
                continue
            fixed = [(cloud.s[idx[:, j]], cloud.y[idx[:, j]]) for j in range(k)]
            part = float(np.sum(f.marginal(fixed)))
        total += coef * part
    return total
