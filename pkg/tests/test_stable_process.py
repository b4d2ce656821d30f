from __future__ import annotations

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from stablepolymer.rng import stream
from stablepolymer.stable_process import (
    BridgeSamplingError,
    PathSkeleton,
    StableParams,
    build_density_grid,
    cdf,
    density,
    density_l2,
    multistep_density,
    sample_bridge,
    sample_bridges,
    sample_increment,
    sample_increments,
    sample_path,
    sample_paths,
)


def series_density(alpha, x, terms=400):
    # convergent expansion of the standard symmetric stable density for 1 < alpha < 2,
    # summed in high precision because of cancellation
    with mpmath.workdps(60):
        a = mpmath.mpf(alpha)
        out = []
        for xv in np.atleast_1d(x):
            x2 = mpmath.mpf(float(xv)) ** 2
            tot = mpmath.fsum(
                (-1) ** k * mpmath.gamma((2 * k + 1) / a) / mpmath.gamma(2 * k + 1) * x2**k for k in range(terms)
            )
            out.append(float(tot / (mpmath.pi * a)))
    return np.array(out)


@pytest.mark.parametrize("alpha,nu", [(0.9, 1.0), (1.0, 1.0), (2.5, 1.0), (1.5, 0.0), (1.5, -1.0)])
def test_params_rejected(alpha, nu):
    with pytest.raises(ValueError):
        StableParams(alpha, nu)


def test_grid_rejects_bad_sizes():
    p = StableParams(1.5)
    with pytest.raises(ValueError):
        build_density_grid(p, n_nodes=512)
    with pytest.raises(ValueError):
        build_density_grid(p, x_max=-1.0)


def test_gaussian_peak(gauss):
    j = np.argmin(np.abs(gauss.x_nodes))
    assert gauss.x_nodes[j] == 0.0
    assert gauss.values[j] == pytest.approx(1.0 / (2.0 * math.sqrt(math.pi)), abs=1e-12)
    # the same value by direct quadrature of the inversion integral
    q, _ = integrate.quad(lambda z: math.exp(-z * z), -np.inf, np.inf)
    assert gauss.values[j] == pytest.approx(q / (2 * math.pi), rel=1e-12)


def test_gaussian_table_closed_form(gauss):
    x = gauss.x_nodes
    exact = np.exp(-x * x / 4.0) / math.sqrt(4.0 * math.pi)
    assert np.max(np.abs(gauss.values - exact)) <= 1e-8


@pytest.mark.parametrize("alpha", [1.2, 1.5, 1.8])
def test_table_matches_series(alpha):
    g = build_density_grid(StableParams(alpha))
    x = np.linspace(-2, 2, 41)
    assert np.max(np.abs(g.pdf1(x) - series_density(alpha, x))) < 1e-7


@pytest.mark.parametrize("alpha", [1.2, 1.5, 1.9, 2.0])
def test_normalization_and_symmetry(alpha):
    g = build_density_grid(StableParams(alpha))
    assert abs(g.table_mass() - 1.0) <= 1e-6
    assert np.all(g.values >= 0)
    assert np.array_equal(g.values, g.values[::-1])


@pytest.mark.parametrize("alpha", [1.2, 1.5, 2.0])
def test_interpolant_unimodal(alpha):
    g = build_density_grid(StableParams(alpha))
    x = np.linspace(0.0, min(g.x_cut, 60.0), 400_001)
    y = g.pdf1(x)
    assert np.all(np.diff(y) <= 0)
    assert np.all(y >= 0)


def test_tail_continuation(grid15):
    p = grid15.params
    assert grid15.x_cut <= grid15.x_nodes[-1]
    far = grid15.x_cut * np.array([1.5, 4.0, 30.0])
    assert np.allclose(grid15.pdf1(far), grid15.tail_coeff * far ** (-2.5))
    # fitted tail constant close to the exact asymptotic constant
    assert grid15.tail_coeff == pytest.approx(p.tail_constant, rel=2e-2)


def test_density_examples(gauss):
    assert density(gauss, 4.0, 0.0) == pytest.approx(0.1410474, abs=1e-7)
    with pytest.raises(ValueError):
        density(gauss, 0.0, 1.0)
    with pytest.raises(ValueError):
        cdf(gauss, -1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(
    t=st.floats(0.01, 100.0),
    T=st.floats(0.01, 100.0),
    X=st.floats(-30.0, 30.0),
    alpha=st.sampled_from([1.5, 2.0]),
)
def test_scaling_identity(t, T, X, alpha):
    g = build_density_grid(StableParams(alpha))
    s = t ** (1.0 / alpha)
    lhs = s * density(g, t * T, s * X)
    assert lhs == pytest.approx(float(density(g, T, X)), rel=1e-12, abs=1e-300)


def test_density_at_origin_scales(grid15):
    for t in [1.0, 10.0, 1e4]:
        assert density(grid15, t, 0.0) == pytest.approx(t ** (-1 / 1.5) * grid15.pdf1(0.0), rel=1e-14)


@pytest.mark.parametrize("alpha", [1.5, 2.0])
@pytest.mark.parametrize("s,t,x", [(0.3, 1.0, 0.0), (1.0, 2.5, 1.7), (2.0, 3.0, -4.0)])
def test_chapman_kolmogorov(alpha, s, t, x):
    g = build_density_grid(StableParams(alpha))
    y = np.linspace(-400, 400, 400_001)
    val = integrate.trapezoid(density(g, s, y) * density(g, t - s, x - y), y)
    assert abs(val - density(g, t, x)) <= 1e-4


def test_cdf_consistent(grid15):
    x = np.linspace(-50, 50, 11)
    for xi in x:
        q, _ = integrate.quad(lambda y: float(density(grid15, 2.0, y)), -np.inf, xi, limit=400)
        assert float(cdf(grid15, 2.0, xi)) == pytest.approx(q, abs=2e-6)
    assert float(cdf(grid15, 1.0, 0.0)) == pytest.approx(0.5, abs=1e-15)


def test_multistep(gauss):
    assert multistep_density(gauss, [1.5], [0.3]) == pytest.approx(float(density(gauss, 1.5, 0.3)))
    assert multistep_density(gauss, [1.0, 2.0], [0.0, 0.0]) == pytest.approx(0.0795775, abs=1e-7)
    s = [0.5, 0.7, 2.0]
    expect = np.prod(np.diff([0.0] + s) ** -0.5) * (1 / (2 * math.sqrt(math.pi))) ** 3
    assert multistep_density(gauss, s, [0, 0, 0]) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ValueError):
        multistep_density(gauss, [1.0, 1.0], [0.0, 0.0])


@pytest.mark.parametrize("alpha", [1.3, 1.5, 2.0])
def test_density_l2(alpha):
    p = StableParams(alpha)
    g = build_density_grid(p)
    for s in [0.5, 1.0, 3.0]:
        y = np.linspace(-200, 200, 800_001)
        quad = integrate.trapezoid(density(g, s, y) ** 2, y)
        assert density_l2(p, s) == pytest.approx(quad, rel=1e-5)
        assert density_l2(p, s) == pytest.approx(s ** (-1 / alpha) * density_l2(p, 1.0), rel=1e-14)
        assert density_l2(p, s) <= density(g, s, 0.0)
    if alpha == 2.0:
        assert density_l2(p, 1.0) == pytest.approx(0.1994711, abs=1e-7)
    with pytest.raises(ValueError):
        density_l2(p, 0.0)


def test_increment_moments():
    r = stream(1, 9, 1)
    p = StableParams(2.0, 0.7)
    x = sample_increments(p, 0.3, 100_000, r)
    se = x.std() / math.sqrt(len(x))
    assert abs(x.mean()) <= 4 * se
    assert x.var() == pytest.approx(2 * 0.7 * 0.3, rel=0.05)
    y = sample_increments(StableParams(1.5), 0.3, 100_000, r)
    assert abs(np.median(y)) < 0.02
    assert np.all(np.isfinite(y))
    assert isinstance(sample_increment(p, 0.1, r), float)


def test_increment_ks(grid15):
    x = sample_increments(grid15.params, 0.7, 100_000, stream(2, 9, 0))
    ks = stats.kstest(x, lambda z: cdf(grid15, 0.7, z)).statistic
    assert ks < 0.01


def test_path_structure(grid15):
    path = sample_path(grid15.params, 2.0, 1, stream(3, 9, 0))
    assert isinstance(path, PathSkeleton)
    assert len(path.times) == 2 and path.positions[0] == 0.0
    times, pos = sample_paths(grid15.params, 2.0, 10, 5, stream(3, 9, 0))
    assert pos.shape == (5, 11)
    assert np.all(pos[:, 0] == 0)
    assert np.allclose(np.diff(times), 0.2)


def test_path_validation():
    with pytest.raises(ValueError):
        PathSkeleton(np.array([0.0, 1.0, 1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        PathSkeleton(np.array([0.0, 1.0]), np.array([1.0, 0.0]))


def test_step_path_evaluation():
    path = PathSkeleton(np.array([0.0, 1.0, 2.0]), np.array([0.0, 3.0, -1.0]))
    assert np.array_equal(path.at(np.array([0.5, 1.0, 1.5, 2.0])), [0.0, 3.0, 3.0, -1.0])


@pytest.mark.parametrize("n_steps", [1, 7, 40])
def test_path_marginal(grid15, n_steps):
    _, pos = sample_paths(grid15.params, 3.0, n_steps, 100_000, stream(4, 9, n_steps))
    ks = stats.kstest(pos[:, -1], lambda z: cdf(grid15, 3.0, z)).statistic
    assert ks < 0.01


def test_gaussian_bridge_midpoint(gauss):
    for method in ("table", "gaussian"):
        times, pos = sample_bridges(gauss, 2.0, 0.0, 2, 10_000, stream(5, 9, 0), method=method)
        assert np.all(pos[:, -1] == 0.0)
        ks = stats.kstest(pos[:, 1], stats.norm(0, math.sqrt(2.0 * 2.0 / 4)).cdf).statistic
        assert ks < 0.02


def test_stable_bridge_midpoint(grid15):
    # midpoint law of a bridge to x: p(t/2, y) p(t/2, x - y) / p(t, x)
    t, x_end = 2.0, 1.5
    _, pos = sample_bridges(grid15, t, x_end, 2, 10_000, stream(6, 9, 0))
    y = np.linspace(-60, 60, 120_001)
    dens = density(grid15, t / 2, y) * density(grid15, t / 2, x_end - y) / density(grid15, t, x_end)
    cdf_vals = integrate.cumulative_trapezoid(dens, y, initial=0.0)
    ks = stats.kstest(pos[:, 1], lambda z: np.interp(z, y, cdf_vals)).statistic
    assert ks < 0.02


def test_bridge_normalization(grid15):
    _, pos, diag = sample_bridges(grid15, 1.0, 0.5, 10, 500, stream(7, 9, 0), return_diagnostics=True)
    assert np.all(pos[:, -1] == 0.5)
    assert np.max(np.abs(diag.ck_ratio - 1.0)) < 1e-3
    path = sample_bridge(grid15, 1.0, -0.25, 4, stream(7, 9, 1))
    assert path.is_bridge and path.positions[-1] == -0.25


def test_bridge_underflow(grid15):
    with pytest.raises(BridgeSamplingError):
        sample_bridges(grid15, 1e-6, 1e6, 3, 2, stream(8, 9, 0))


def test_gaussian_method_needs_alpha_two(grid15):
    with pytest.raises(ValueError):
        sample_bridges(grid15, 1.0, 0.0, 4, 2, stream(8, 9, 1), method="gaussian")
