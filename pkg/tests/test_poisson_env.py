from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from stablepolymer.poisson_env import (
    BoxKernel,
    PoissonCloud,
    QuadratureError,
    QuadratureKernel,
    TubeSpec,
    factorial_measure,
    sample_cloud,
    tube_count,
    tube_counts,
    wiener_ito,
)
from stablepolymer.rng import stream
from stablepolymer.stable_process import PathSkeleton, StableParams, sample_paths

from conftest import mc, within_sigma


def brute_counts(cloud, times, paths, r, t):
    # direct evaluation of the right-continuous step path at every point time
    out = np.zeros(len(paths), dtype=int)
    for s, y in zip(cloud.s, cloud.y):
        if not (0 < s <= t):
            continue
        j = np.searchsorted(times, s, side="right") - 1
        out += np.abs(y - paths[:, min(j, len(times) - 1)]) <= r / 2
    return out


def cloud_of(points, t_max=10.0, L=10.0, v=1.0):
    pts = np.array(points, dtype=float).reshape(-1, 2)
    order = np.argsort(pts[:, 0], kind="stable")
    return PoissonCloud(pts[order, 0], pts[order, 1], t_max, L, v)


def test_cloud_invariants(rng):
    c = sample_cloud(2.0, 3.0, 4.0, rng, seed=7)
    assert np.all((c.s > 0) & (c.s <= 3.0))
    assert np.all(np.abs(c.y) <= 4.0)
    assert np.all(np.diff(c.s) >= 0)
    assert c.area == 24.0


def test_empty_cloud(rng):
    c = sample_cloud(0.0, 1.0, 1.0, rng)
    assert len(c) == 0
    with pytest.raises(ValueError):
        sample_cloud(-1.0, 1.0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_cloud(1.0, 1.0, 1e9, rng, count_cap=1e8)


def test_mean_count():
    counts = [len(sample_cloud(1.0, 1.0, 5.0, stream(1, 2, i))) for i in range(10_000)]
    m, se = mc(counts)
    assert within_sigma(m, 10.0, se)


def test_disjoint_windows_uncorrelated():
    a, b = [], []
    for i in range(10_000):
        c = sample_cloud(1.0, 2.0, 2.0, stream(2, 2, i))
        a.append(np.sum(c.y < 0))
        b.append(np.sum(c.y >= 0))
    prod = (np.array(a) - 4.0) * (np.array(b) - 4.0)
    m, se = mc(prod)
    assert within_sigma(m, 0.0, se)


def test_csv_roundtrip(tmp_path, rng):
    c = sample_cloud(3.0, 2.0, 1.5, rng, seed=11)
    path = c.to_csv(tmp_path / "cloud.csv")
    back = PoissonCloud.from_csv(path)
    assert np.array_equal(back.s, c.s) and np.array_equal(back.y, c.y)
    assert (back.v, back.t_max, back.L, back.seed) == (3.0, 2.0, 1.5, 11)
    assert path.read_text().startswith("# {")


def test_tube_count_basic():
    path = PathSkeleton(np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, -1.0]))
    empty = cloud_of([])
    assert tube_count(empty, path, TubeSpec(0.5)) == 0
    on = cloud_of([(1.5, 1.0)])
    assert tube_count(on, path, TubeSpec(0.5)) == 1
    # the step path jumps to -1 at s = 2 (right-continuous)
    assert tube_count(cloud_of([(2.0, -1.0)]), path, TubeSpec(0.1)) == 1
    assert tube_count(cloud_of([(2.0, 1.0)]), path, TubeSpec(0.1)) == 0
    # boundary |y - X| = r/2 is inside
    assert tube_count(cloud_of([(0.5, 0.25)]), path, TubeSpec(0.5)) == 1
    with pytest.raises(ValueError):
        TubeSpec(0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.floats(0.05, 3.0), alpha=st.sampled_from([1.3, 2.0]))
def test_tube_counts_match_brute_force(seed, r, alpha):
    rg = stream(seed, 9, 3)
    times, paths = sample_paths(StableParams(alpha), 4.0, 23, 40, rg)
    cloud = sample_cloud(2.0, 5.0, 8.0, rg)
    for t in (4.0, 2.5):
        assert np.array_equal(tube_counts(cloud, times, paths, r, t), brute_counts(cloud, times, paths, r, t))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), r1=st.floats(0.01, 2.0), dr=st.floats(0.0, 2.0))
def test_tube_counts_monotone_in_r(seed, r1, dr):
    rg = stream(seed, 9, 4)
    times, paths = sample_paths(StableParams(1.5), 3.0, 30, 20, rg)
    cloud = sample_cloud(3.0, 3.0, 10.0, rg)
    assert np.all(tube_counts(cloud, times, paths, r1, 3.0) <= tube_counts(cloud, times, paths, r1 + dr, 3.0))


def test_restriction_consistency(rng):
    times, paths = sample_paths(StableParams(1.5), 3.0, 30, 50, rng)
    cloud = sample_cloud(3.0, 3.0, 10.0, rng)
    for tp in (0.7, 1.9):
        sub = cloud.restrict(tp)
        assert np.array_equal(tube_counts(cloud, times, paths, 1.0, tp), tube_counts(sub, times, paths, 1.0))


def test_exponential_moment_straight_path():
    beta, v, r, t = 0.4, 1.5, 0.8, 1.0
    zero = np.zeros((1, 2))
    times = np.array([0.0, t])
    w = [
        math.exp(beta * tube_counts(sample_cloud(v, t, 2.0, stream(3, 2, i)), times, zero, r)[0])
        for i in range(20_000)
    ]
    m, se = mc(w)
    assert within_sigma(m, math.exp(math.expm1(beta) * v * r * t), se)


def test_exponential_formula_nonpositive():
    # E exp(int h d omega) = exp(int (e^h - 1) v) for h <= 0
    v, T, L = 2.0, 1.0, 1.0

    def h(s, y):
        return -(1.0 + s) * (1.0 - np.abs(y))

    vals = []
    for i in range(20_000):
        c = sample_cloud(v, T, L, stream(4, 2, i))
        vals.append(math.exp(np.sum(h(c.s, c.y))))
    m, se = mc(vals)
    q, _ = integrate.dblquad(lambda y, s: math.expm1(h(s, y)), 0, T, -L, L)
    assert within_sigma(m, math.exp(v * q), se)


def test_factorial_measure_counts(rng):
    one = lambda *a: np.ones_like(a[0])  # noqa: E731
    for k in range(0, 7):
        c = cloud_of([(0.1 * (i + 1), 0.0) for i in range(k)])
        assert factorial_measure(c, one, 1) == k
        assert factorial_measure(c, one, 2) == k * (k - 1)
        assert factorial_measure(c, one, 3) == k * (k - 1) * (k - 2)
    with pytest.raises(ValueError):
        factorial_measure(c, one, 4)


def test_factorial_measure_brute_force(rng):
    c = sample_cloud(2.0, 2.0, 2.0, rng)

    def f(s1, y1, s2, y2):
        return np.sin(s1 + 2 * y2) * np.exp(-y1 * y1) + s2

    want = sum(f(c.s[i], c.y[i], c.s[j], c.y[j]) for i in range(len(c)) for j in range(len(c)) if i != j)
    assert factorial_measure(c, f, 2) == pytest.approx(want, rel=1e-12)


def test_box_kernel_marginals():
    f = BoxKernel((0, 1, -1, 1), (1, 2, 0, 2), weight=2.0)
    # symmetrized: integrate the second coordinate against Lebesgue
    pt = (np.array([0.5]), np.array([0.0]))
    assert f.marginal([pt])[0] == pytest.approx(2.0 * 0.5 * (1 * 2))
    assert f.marginal([]) == pytest.approx(2.0 * 4.0)
    assert f(0.5, 0.0, 1.5, 1.0) == pytest.approx(1.0)
    assert f(1.5, 1.0, 0.5, 0.0) == pytest.approx(1.0)


def test_box_inner_matches_quadrature():
    f = BoxKernel((0, 1, -1, 1))
    g = BoxKernel((0.5, 2, 0, 2))
    assert f.inner(g) == pytest.approx(0.5 * 1.0)
    assert f.inner(BoxKernel((0, 1, -1, 1), (0, 1, -1, 1))) == 0.0


def test_quadrature_kernel_marginal():
    k = QuadratureKernel(lambda s, y: np.exp(-s) * (1 - y * y), 1, t_max=1.0, L=1.0)
    exact = (1 - math.exp(-1)) * (4.0 / 3.0)
    assert k.marginal([]) == pytest.approx(exact, rel=1e-6)
    k2 = QuadratureKernel(lambda s1, y1, s2, y2: np.cos(y1 - y2) * s1 * s2, 2, t_max=1.0, L=1.0)
    pts = (np.array([0.3, 0.9]), np.array([0.2, -0.4]))
    out = k2.marginal([pts])
    for s1, y1, o in zip(*pts, out):
        want, _ = integrate.dblquad(lambda y, s: math.cos(y1 - y) * s1 * s, 0, 1, -1, 1)
        assert o == pytest.approx(want, rel=1e-6)


def test_quadrature_tolerance_error():
    rough = QuadratureKernel(lambda s, y: 1.0 / np.sqrt(np.abs(y) + 1e-12) + 0 * s, 1, t_max=1.0, L=1.0, max_level=6)
    with pytest.raises(QuadratureError):
        rough.marginal([])


def test_wiener_ito_m0_and_m1(rng):
    f = BoxKernel((0, 1, -1, 1))
    c = sample_cloud(1.5, 1.0, 1.0, rng)
    assert wiener_ito(c, f, 0) is f
    assert wiener_ito(c, f, 1) == pytest.approx(len(c) - 1.5 * 2.0)
    with pytest.raises(ValueError):
        wiener_ito(c, f, 3)
    # callables are wrapped in a quadrature kernel
    g = lambda s, y: (s <= 1.0) * 1.0 + 0 * y  # noqa: E731
    assert wiener_ito(c, g, 1) == pytest.approx(len(c) - 1.5 * 2.0, rel=1e-6, abs=1e-6)


def test_wiener_ito_centered():
    f = BoxKernel((0, 1, -1, 1))
    vals = [wiener_ito(sample_cloud(1.0, 1.0, 1.0, stream(5, 2, i)), f, 1) for i in range(10_000)]
    m, se = mc(vals)
    assert within_sigma(m, 0.0, se)


def test_wiener_ito_m2_explicit():
    # m=2 with a box kernel: N(N-1)-type formula for f = 1_A x 1_A
    f = BoxKernel((0, 1, -1, 1), (0, 1, -1, 1))
    c = cloud_of([(0.2, 0.0), (0.5, 0.5), (0.9, -0.5), (1.5, 0.0)], t_max=2.0, L=1.0, v=0.7)
    n, area, v = 3, 2.0, 0.7
    assert wiener_ito(c, f, 2) == pytest.approx(n * (n - 1) - 2 * v * area * n + (v * area) ** 2)
