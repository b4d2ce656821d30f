"""Desk-scale convergence experiments and their on-disk reports."""

from __future__ import annotations

import functools
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import integrate, stats

from . import __version__
from . import rng as streams
from .parallel import map_replicas
from .poisson_env import sample_cloud
from .polymer import Schedule, gamma_t, sample_W_pairs
from .she_solver import SheConfig, chaos_point_to_line, chaos_solve, second_moment_series, stack_noise
from .stable_process import StableParams, build_density_grid, density

SCHEMA_VERSION = 1
SHE_BLOCK = 100
CACHE_ENV = "STABLEPOLYMER_CACHE"
TREND_Z = 1.2815515655446004  # one-sided 90% normal quantile


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance between empirical CDFs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("samples must be nonempty")
    return float(stats.ks_2samp(a, b).statistic)


@dataclass(frozen=True)
class Budgets:
    n_env: int = 2000
    n_path: int = 200
    n_steps: int | None = None
    n_she: int = 10_000
    n_rep: int = 10_000
    n_batches: int = 20

    def __post_init__(self):
        if min(self.n_env, self.n_path, self.n_she, self.n_rep) < 1:
            raise ValueError("budgets must be positive")
        if self.n_batches < 20:
            raise ValueError("at least 20 replicate batches are required")
        if min(self.n_env, self.n_rep) < self.n_batches:
            raise ValueError("need at least one replica per batch")


@dataclass(frozen=True)
class SpaceTimeFunction:
    """Named bounded function ``g(s, x)`` on ``[0, 1] x [-a, a]``."""

    name: str
    half_width: float

    def __call__(self, s, x):
        s = np.asarray(s, dtype=float)
        x = np.asarray(x, dtype=float)
        inside = (s > 0) & (s <= 1) & (np.abs(x) <= self.half_width)
        if self.name == "zero":
            val = np.zeros(np.broadcast(s, x).shape)
        elif self.name == "bump":
            val = 1.0 - (x / self.half_width) ** 2
        elif self.name == "box":
            val = np.ones(np.broadcast(s, x).shape)
        elif self.name == "ramp":
            val = s * (1.0 - np.abs(x) / self.half_width)
        else:
            raise ValueError(f"unknown test function {self.name!r}")
        return np.where(inside, val, 0.0)

    def norm2(self) -> float:
        """``int g**2`` by adaptive quadrature."""
        a = self.half_width
        val, _ = integrate.dblquad(lambda x, s: float(self(s, x)) ** 2, 0.0, 1.0, -a, a, epsabs=1e-12, epsrel=1e-10)
        return val

    def integral(self) -> float:
        a = self.half_width
        val, _ = integrate.dblquad(lambda x, s: float(self(s, x)), 0.0, 1.0, -a, a, epsabs=1e-12, epsrel=1e-10)
        return val


NAMED_FUNCTIONS = ("zero", "bump", "box", "ramp")


@dataclass
class TrendResult:
    slope: float
    std_error: float
    passed: bool


def trend_test(t, values, errors, z: float = TREND_Z) -> TrendResult:
    """Weighted least-squares slope of ``values`` against ``log t``.

    The sequence counts as non-increasing unless the slope is positive at the
    one-sided level given by ``z``.
    """
    x = np.log(np.asarray(t, dtype=float))
    y = np.asarray(values, dtype=float)
    e = np.maximum(np.asarray(errors, dtype=float), 1e-12)
    w = 1.0 / e**2
    xm = np.sum(w * x) / w.sum()
    sxx = np.sum(w * (x - xm) ** 2)
    slope = float(np.sum(w * (x - xm) * y) / sxx)
    se = float(math.sqrt(1.0 / sxx))
    return TrendResult(slope, se, bool(slope <= z * se))


def _batches(n, n_batches):
    return np.array_split(np.arange(n), n_batches)


def jackknife(stat, samples, n_batches: int = 20):
    """Statistic on the full samples and its delete-one-batch jackknife standard error.

    ``samples`` is a tuple of arrays sharing the leading replica axis.
    """
    n = len(samples[0])
    full = stat(*samples)
    parts = _batches(n, n_batches)
    reps = []
    for drop in parts:
        keep = np.setdiff1d(np.arange(n), drop, assume_unique=True)
        reps.append(stat(*(a[keep] for a in samples)))
    reps = np.array(reps)
    b = len(parts)
    se = math.sqrt((b - 1) / b * np.sum((reps - reps.mean()) ** 2))
    return float(full), float(se)


def bootstrap(stat, samples, n_boot: int = 200, rng=None):
    """Statistic and its bootstrap standard error, resampling each array independently.

    Used for the KS distance, whose jackknife is degenerate because dropping a
    batch often leaves the supremum unchanged.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    full = stat(*samples)
    reps = np.array([stat(*(a[rng.integers(0, len(a), len(a))] for a in samples)) for _ in range(n_boot)])
    return float(full), float(reps.std(ddof=1))


@dataclass
class ConvergenceReport:
    kind: str
    columns: list
    rows: list
    manifest: dict
    trend: TrendResult | None = None
    extras: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        if "valid" not in self.columns:
            return True
        i = self.columns.index("valid")
        return all(bool(r[i]) for r in self.rows)

    def column(self, name) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)


def _seed_for(seed, *key):
    return int(np.random.SeedSequence(int(seed), spawn_key=(streams.AUX, *key)).generate_state(1)[0])


def _manifest(kind, seed, budgets, **extra):
    return {
        "schema": SCHEMA_VERSION,
        "version": __version__,
        "kind": kind,
        "seed": int(seed),
        "budgets": asdict(budgets),
        **extra,
    }


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _she_block(b, params, beta, cfg, t, x, n, seed):
    idx = range(b * SHE_BLOCK, min((b + 1) * SHE_BLOCK, n))
    noise = stack_noise(cfg.noise(params, t, streams.stream(seed, streams.NOISE, i)) for i in idx)
    grid = build_density_grid(params)
    if x is None:
        return chaos_point_to_line(noise, params, beta, cfg.K, grid, cfg.theta)
    return chaos_solve(noise, params, beta, cfg.K, t, x, grid, cfg.theta)


def she_reference(params: StableParams, beta: float, cfg: SheConfig, n: int, seed: int, workers: int = 1,
                  t: float = 1.0, x: float | None = None, cache_dir=None) -> np.ndarray:
    """``n`` chaos samples of the point-to-line ``Z`` (``x=None``) or of ``Z(t, x)``.

    Samples are cached on disk by the hash of everything that determines them.
    """
    key = {"alpha": params.alpha, "nu": params.nu, "beta": beta, "she": cfg.as_dict(), "n": n, "seed": seed,
           "t": t, "x": x, "schema": SCHEMA_VERSION, "version": __version__}
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    path = Path(cache_dir) / f"she-{_hash(key)}.npy" if cache_dir else None
    if path is not None and path.exists():
        return np.load(path)
    fn = functools.partial(_she_block, params=params, beta=beta, cfg=cfg, t=t, x=x, n=n, seed=seed)
    blocks = map_replicas(fn, math.ceil(n / SHE_BLOCK), workers, chunk=1)
    out = np.concatenate([np.atleast_1d(b) for b in blocks])
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, out)
    return out


def _check_t_list(t_list):
    t = [float(x) for x in t_list]
    if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0:
        raise ValueError("t_list must be positive and increasing")
    return t


def _second_moment(w1, w2):
    return float(np.mean(w1 * w2))




THM_COLUMNS = ["t", "mean", "mean_se", "second_moment", "second_moment_se", "ks", "ks_se", "n_env", "n_ref",
               "overflow_fraction", "excluded_fraction", "valid"]


def _thm_row(t, ws, ref, budgets, seed, scale=1.0):
    ok = ws.ok
    w1, w2 = scale * ws.w1[ok], scale * ws.w2[ok]
    pooled = 0.5 * (w1 + w2)
    nb = budgets.n_batches
    m, m_se = jackknife(np.mean, (pooled,), nb)
    m2, m2_se = jackknife(_second_moment, (w1, w2), nb)
    ks, ks_se = bootstrap(ks_statistic, (pooled, ref), rng=streams.stream(seed, streams.AUX))
    return [t, m, m_se, m2, m2_se, ks, ks_se, int(ok.sum()), len(ref), ws.overflow_fraction,
            ws.excluded_fraction, int(ws.valid)]


def run_theorem1(schedule: Schedule, t_list, budgets: Budgets = Budgets(), she: SheConfig = SheConfig(),
                 seed: int = 0, workers: int = 1, cache_dir=None) -> ConvergenceReport:
    """Point-to-line ``W_t`` along the schedule against chaos samples of ``Z_{alpha, beta*}``."""
    t_list = _check_t_list(t_list)
    params = schedule.stable
    ref = she_reference(params, schedule.beta_star, she, budgets.n_she, _seed_for(seed, 0), workers,
                        cache_dir=cache_dir)
    rows = []
    for i, t in enumerate(t_list):
        ws = sample_W_pairs(schedule.config(t), budgets.n_env, budgets.n_path, budgets.n_steps,
                            _seed_for(seed, 1, i), workers)
        rows.append(_thm_row(t, ws, ref, budgets, _seed_for(seed, 2, i)))
    series = second_moment_series(params, schedule.beta_star)
    rep = ConvergenceReport("theorem1", THM_COLUMNS, rows,
                            _manifest("theorem1", seed, budgets, schedule=schedule.as_dict(), t_list=t_list,
                                      she=she.as_dict()))
    ks = rep.column("ks")
    rep.trend = trend_test(t_list, ks, rep.column("ks_se"))
    rep.extras = {"series_second_moment": series.total, "ref_mean": float(ref.mean()),
                  "ref_second_moment": float(np.mean(ref**2))}
    return rep


def run_theorem2(schedule: Schedule, t_list, T: float = 1.0, Y: float = 0.0, budgets: Budgets = Budgets(),
                 she: SheConfig = SheConfig(), seed: int = 0, workers: int = 1, cache_dir=None) -> ConvergenceReport:
    """Rescaled point-to-point ``t**(1/alpha) W_{tT, t**(1/alpha) Y}`` against chaos samples of ``Z(T, Y)``."""
    if not T > 0:
        raise ValueError("T must be positive")
    t_list = _check_t_list(t_list)
    params = schedule.stable
    a = schedule.alpha
    ref = she_reference(params, schedule.beta_star / T, she, budgets.n_she, _seed_for(seed, 0), workers,
                        t=T, x=Y, cache_dir=cache_dir)
    rows = []
    for i, t in enumerate(t_list):
        scale = t ** (1.0 / a)
        ws = sample_W_pairs(schedule.config(t * T), budgets.n_env, budgets.n_path, budgets.n_steps,
                            _seed_for(seed, 1, i), workers, endpoint=scale * Y)
        rows.append(_thm_row(t, ws, ref, budgets, _seed_for(seed, 2, i), scale))
    rep = ConvergenceReport("theorem2", THM_COLUMNS, rows,
                            _manifest("theorem2", seed, budgets, schedule=schedule.as_dict(), t_list=t_list,
                                      T=T, Y=Y, she=she.as_dict()))
    rep.trend = trend_test(t_list, rep.column("ks"), rep.column("ks_se"))
    rep.extras = {"p_TY": float(density(build_density_grid(params), T, Y)), "ref_mean": float(ref.mean())}
    return rep


def _prop31_replica(i, schedule, g, t, seed):
    a = schedule.alpha
    st = t ** (1.0 / a)
    L = g.half_width * st
    v = schedule.v(t)
    cloud = sample_cloud(v, t, L, streams.stream(seed, streams.PROP31, i))
    total = float(np.sum(g(cloud.s / t, cloud.y / st)))
    return gamma_t(schedule, t) * (total - v * t * st * g.integral())


PROP31_COLUMNS = ["t", "mean", "mean_se", "variance_ratio", "variance_ratio_se", "ks", "ks_se", "skew", "skew_se",
                  "n_rep"]


def _skew(x):
    sd = x.std()
    return float(stats.skew(x)) if sd > 0 else 0.0


def run_prop31(schedule: Schedule, g: SpaceTimeFunction, t_list, budgets: Budgets = Budgets(), seed: int = 0,
               workers: int = 1) -> ConvergenceReport:
    """First-order compensated sums ``gamma_t (omega(g_t) - v_t int g_t)`` against ``N(0, |g|^2)``."""
    t_list = _check_t_list(t_list)
    norm2 = g.norm2()
    sd = math.sqrt(norm2)
    rows = []
    for i, t in enumerate(t_list):
        fn = functools.partial(_prop31_replica, schedule=schedule, g=g, t=t, seed=_seed_for(seed, 2, i))
        x = np.array(map_replicas(fn, budgets.n_rep, workers))
        nb = budgets.n_batches
        m, m_se = jackknife(np.mean, (x,), nb)
        if norm2 > 0:
            vr, vr_se = jackknife(lambda a: float(np.mean(a**2) / norm2), (x,), nb)
            ks, ks_se = bootstrap(lambda a: float(stats.kstest(a, stats.norm(0.0, sd).cdf).statistic), (x,),
                                  rng=streams.stream(_seed_for(seed, 3, i), streams.AUX))
        else:
            vr = vr_se = ks = ks_se = 0.0
        sk, sk_se = jackknife(_skew, (x,), nb)
        rows.append([t, m, m_se, vr, vr_se, ks, ks_se, sk, sk_se, len(x)])
    rep = ConvergenceReport("prop31", PROP31_COLUMNS, rows,
                            _manifest("prop31", seed, budgets, schedule=schedule.as_dict(), t_list=t_list,
                                      g={"name": g.name, "half_width": g.half_width}))
    rep.extras = {"norm2": norm2}
    return rep


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


_PLOTS = {
    "theorem1": ("ks", "KS distance to the SHE reference"),
    "theorem2": ("ks", "KS distance to the SHE reference"),
    "prop31": ("variance_ratio", "variance ratio to |g|^2"),
}


def emit_report(report: ConvergenceReport, out_dir) -> dict:
    """Write ``<kind>.csv``, ``<kind>.manifest.json`` and a gnuplot script; returns the paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv = out / f"{report.kind}.csv"
        lines = [",".join(report.columns)] + [",".join(_fmt(v) for v in row) for row in report.rows]
        csv.write_text("\n".join(lines) + "\n")
        man = out / f"{report.kind}.manifest.json"
        body = dict(report.manifest)
        body["outputs"] = {"csv": csv.name}
        man.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        col, label = _PLOTS.get(report.kind, (report.columns[1], report.columns[1]))
        y = report.columns.index(col) + 1
        gp = out / f"{report.kind}.gp"
        gp.write_text(
            "set datafile separator ','\n"
            "set key autotitle columnhead\n"
            "set logscale x\n"
            "set xlabel 't'\n"
            f"set ylabel '{label}'\n"
            f"set terminal pngcairo\nset output '{report.kind}.png'\n"
            f"plot '{csv.name}' using 1:{y}:{y + 1} with yerrorlines\n"
        )
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return {"csv": csv, "manifest": man, "plot": gp}


def load_manifest(path) -> dict:
    m = json.loads(Path(path).read_text())
    if m.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema {m.get('schema')!r}")
    return m


def rerun(manifest: dict, workers: int = 1, cache_dir=None) -> ConvergenceReport:
    """Re-run the experiment a manifest describes."""
    kind = manifest["kind"]
    budgets = Budgets(**manifest["budgets"])
    schedule = Schedule(**manifest["schedule"])
    seed = manifest["seed"]
    if kind == "theorem1":
        return run_theorem1(schedule, manifest["t_list"], budgets, SheConfig(**manifest["she"]), seed, workers,
                            cache_dir)
    if kind == "theorem2":
        return run_theorem2(schedule, manifest["t_list"], manifest["T"], manifest["Y"], budgets,
                            SheConfig(**manifest["she"]), seed, workers, cache_dir)
    if kind == "prop31":
        return run_prop31(schedule, SpaceTimeFunction(**manifest["g"]), manifest["t_list"], budgets, seed, workers)
    raise ValueError(f"unknown experiment kind {kind!r}")
