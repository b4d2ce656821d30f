"""Command-line entry point.

Every subcommand takes its parameters from an optional config file (INI with
typed sections, or a manifest written by an earlier run) and then from flags,
which win.  Each run writes ``run-<command>.json`` into the output
directory; passing that file back with ``--config`` reproduces the run.

Exit status: 0 on success, 2 on usage or validation errors, 3 on runtime failures.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import rng as streams
from .experiments import (
    NAMED_FUNCTIONS,
    Budgets,
    SpaceTimeFunction,
    emit_report,
    run_prop31,
    run_theorem1,
    run_theorem2,
)
from .poisson_env import BoxKernel, sample_cloud, wiener_ito
from .polymer import PolymerConfig, Schedule, sample_W_pairs, verify_assumptions
from .she_solver import DEFAULT_MEMORY_CAP, SheConfig, chaos_profile, duhamel_solve
from .stable_process import StableParams, build_density_grid, sample_bridges, sample_paths

OUT_ENV = "STABLEPOLYMER_OUT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def _opt(conv):
    def parse(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return conv(text)

    parse.__name__ = conv.__name__
    return parse


def floats(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).replace(";", ",").split(",") if x.strip()]


@dataclass(frozen=True)
class Param:
    section: str
    name: str
    conv: object
    default: object
    help: str = ""


RUN = [
    Param("run", "seed", int, 0, "master seed"),
    Param("run", "workers", int, 1, "worker processes; never changes results"),
    Param("run", "out", str, None, f"output directory (default ${OUT_ENV} or ./stablepolymer-runs)"),
    Param("run", "memory_cap", int, DEFAULT_MEMORY_CAP, "largest noise grid in bytes"),
]
STABLE = [Param("stable", "alpha", float, 2.0, "stability index in (1, 2]"), Param("stable", "nu", float, 1.0)]
SCHEDULE = [
    Param("schedule", "beta_star", float, 0.5),
    Param("schedule", "rho", _opt(float), None, "r_t = t**rho (default 1/(2 alpha))"),
    Param("schedule", "eta", _opt(float), None, "lambda(beta_t) = t**-eta (default 1/(2 alpha))"),
]
BUDGETS = [
    Param("budgets", "n_env", int, 2000),
    Param("budgets", "n_path", int, 200),
    Param("budgets", "n_steps", _opt(int), None),
    Param("budgets", "n_she", int, 10_000),
    Param("budgets", "n_rep", int, 10_000),
    Param("budgets", "n_batches", int, 20),
]
SHE = [
    Param("she", "dt", float, 0.05),
    Param("she", "dx", _opt(float), None),
    Param("she", "x_max", _opt(float), None),
    Param("she", "theta", _opt(float), None, "noise offset inside a time cell; 0 gives the left-point scheme"),
    Param("she", "K", int, 6, "chaos truncation order"),
]

COMMANDS = {
    "density": (
        "export the unit-time density table",
        STABLE + [Param("density", "x_max", _opt(float), None), Param("density", "n_nodes", _opt(int), None)],
    ),
    "sample-path": (
        "sample stable paths or bridges",
        STABLE + [
            Param("path", "t", float, 1.0),
            Param("path", "n_steps", int, 100),
            Param("path", "n_paths", int, 1),
            Param("path", "bridge_to", _opt(float), None, "end point of a bridge"),
        ],
    ),
    "simulate": (
        "estimate W by nested Monte Carlo",
        STABLE + [
            Param("polymer", "beta", float, 0.5),
            Param("polymer", "v", float, 1.0),
            Param("polymer", "r", float, 1.0),
            Param("polymer", "t", float, 1.0),
            Param("polymer", "endpoint", _opt(float), None, "point-to-point end point"),
            Param("budgets", "n_env", int, 200),
            Param("budgets", "n_path", int, 200),
            Param("budgets", "n_steps", _opt(int), None),
        ],
    ),
    "solve-she": (
        "solve the fractional SHE on one noise realization",
        STABLE + SHE + [
            Param("she", "beta", float, 0.5),
            Param("she", "t", float, 1.0),
            Param("she", "scheme", str, "chaos", "chaos or duhamel"),
        ],
    ),
    "check-assumptions": (
        "tabulate the intermediate-disorder conditions along a schedule",
        [Param("stable", "alpha", float, 2.0), Param("stable", "nu", float, 1.0)] + SCHEDULE + [
            Param("sweep", "t_list", floats, [4.0, 16.0, 64.0, 256.0, 1024.0]),
        ],
    ),
    "chaos-cov-test": (
        "Monte Carlo check of the Poisson Wiener-Ito covariance",
        [
            Param("env", "v", float, 1.0),
            Param("env", "t_max", float, 2.0),
            Param("env", "L", float, 2.0),
            Param("env", "n_clouds", int, 20_000),
        ],
    ),
    "sweep-thm1": (
        "point-to-line convergence sweep",
        STABLE + SCHEDULE + BUDGETS + SHE + [Param("sweep", "t_list", floats, [4.0, 16.0, 64.0, 256.0])],
    ),
    "sweep-thm2": (
        "point-to-point convergence sweep",
        STABLE + SCHEDULE + BUDGETS + SHE + [
            Param("sweep", "t_list", floats, [4.0, 16.0, 64.0, 256.0]),
            Param("sweep", "T", float, 1.0),
            Param("sweep", "Y", float, 0.0),
        ],
    ),
    "prop31": (
        "first-order chaos limit of compensated Poisson sums",
        STABLE + SCHEDULE + BUDGETS + [
            Param("sweep", "t_list", floats, [10.0, 100.0, 1000.0, 10000.0]),
            Param("sweep", "g", str, "bump", f"one of {', '.join(NAMED_FUNCTIONS)}"),
            Param("sweep", "half_width", float, 1.0),
        ],
    ),
}


class UsageError(ValueError):
    pass


def _flag(p: Param) -> str:
    return "--" + p.name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablepolymer", description="Stable directed polymers and the fractional SHE")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_, params) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="INI config or a previous run manifest")
        for p in RUN + params:
            sp.add_argument(_flag(p), dest=p.name, type=p.conv, default=None,
                            help=f"{p.help} [{p.section}.{p.name}, default {p.default}]".strip())
    return parser


def _read_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    if path.suffix == ".json":
        return json.loads(path.read_text()).get("params", {})
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def resolve(command: str, args) -> dict:
    """Parameters by section: defaults, then the config file, then flags."""
    cfg = _read_config(args.config) if args.config else {}
    out: dict = {}
    for p in RUN + COMMANDS[command][1]:
        value = p.default
        sec = cfg.get(p.section, {})
        if p.name in sec:
            raw = sec[p.name]
            value = raw if raw is None or not isinstance(raw, str) else p.conv(raw)
            if isinstance(value, list) and p.conv is floats:
                value = floats(value)
        flag = getattr(args, p.name)
        if flag is not None:
            value = flag
        out.setdefault(p.section, {})[p.name] = value
    if out["run"]["out"] is None:
        out["run"]["out"] = os.environ.get(OUT_ENV, "stablepolymer-runs")
    if out["run"]["workers"] < 1:
        raise UsageError("workers must be >= 1")
    return out


def _stable(c):
    return StableParams(c["stable"]["alpha"], c["stable"]["nu"])


def _schedule(c):
    s = c["schedule"]
    return Schedule(c["stable"]["alpha"], s["beta_star"], s["rho"], s["eta"], c["stable"]["nu"])


def _budgets(c):
    return Budgets(**c["budgets"])


def _she(c):
    s = c["she"]
    return SheConfig(dt=s["dt"], dx=s["dx"], x_max=s["x_max"], theta=s["theta"], K=s["K"],
                     memory_cap=c["run"]["memory_cap"])


def _write_csv(path, header, rows):
    lines = [",".join(header)] + [",".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in r) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def cmd_density(c, out):
    params = _stable(c)
    d = c["density"]
    grid = build_density_grid(params, d["x_max"], d["n_nodes"])
    path = grid.to_csv(out / "density.csv")
    j = int(np.argmin(np.abs(grid.x_nodes)))
    print(f"p(1, 0) = {grid.values[j]:.10f}")
    print(f"table mass = {grid.table_mass():.10f}")
    return [path]


def cmd_sample_path(c, out):
    params = _stable(c)
    p = c["path"]
    rng = streams.stream(c["run"]["seed"], streams.PATHS, 0)
    if p["bridge_to"] is None:
        times, pos = sample_paths(params, p["t"], p["n_steps"], p["n_paths"], rng)
    else:
        times, pos = sample_bridges(build_density_grid(params), p["t"], p["bridge_to"], p["n_steps"], p["n_paths"],
                                    rng, method="auto")
    rows = [(i, float(s), float(x)) for i in range(len(pos)) for s, x in zip(times, pos[i])]
    path = _write_csv(out / "paths.csv", ["path", "t", "x"], rows)
    print(f"wrote {len(pos)} path(s) with {p['n_steps']} steps to {path}")
    return [path]


def cmd_simulate(c, out):
    p, b = c["polymer"], c["budgets"]
    cfg = PolymerConfig(_stable(c), p["beta"], p["v"], p["r"], p["t"])
    ws = sample_W_pairs(cfg, b["n_env"], b["n_path"], b["n_steps"], c["run"]["seed"], c["run"]["workers"],
                        endpoint=p["endpoint"])
    w = ws.pooled
    se = float(w.std(ddof=1) / math.sqrt(len(w))) if len(w) > 1 else 0.0
    rows = [(i, float(a), float(bb)) for i, (a, bb) in enumerate(zip(ws.w1, ws.w2))]
    path = _write_csv(out / "simulate.csv", ["env", "w1", "w2"], rows)
    mean = float(w.mean()) if len(w) else math.nan
    m2 = float(ws.products.mean()) if len(w) else math.nan
    summary = _write_csv(out / "simulate_summary.csv",
                         ["t", "n_env", "n_path", "mean", "stderr", "second_moment", "overflow_fraction",
                          "excluded_fraction"],
                         [(cfg.t, int(ws.ok.sum()), b["n_path"], mean, se, m2, ws.overflow_fraction,
                           ws.excluded_fraction)])
    print(f"W = {mean!r}  stderr = {se!r}")
    print(f"second moment = {m2!r}  overflow = {ws.overflow_fraction!r}  excluded = {ws.excluded_fraction!r}")
    if not ws.valid:
        raise RuntimeError("more than 1% of replicas were excluded")
    return [path, summary]


def cmd_solve_she(c, out):
    params = _stable(c)
    s = c["she"]
    cfg = _she(c)
    noise = cfg.noise(params, s["t"], streams.stream(c["run"]["seed"], streams.NOISE, 0))
    grid = build_density_grid(params)
    if s["scheme"] == "chaos":
        sol = chaos_profile(noise, params, s["beta"], cfg.K, grid, cfg.theta)
    elif s["scheme"] == "duhamel":
        sol = duhamel_solve(noise, params, s["beta"], grid, cfg.theta)
    else:
        raise UsageError("scheme must be 'chaos' or 'duhamel'")
    path = sol.to_csv(out / "she.csv")
    print(f"Z(t, 0) = {sol.at(0.0)!r}  integral = {float(sol.values[-1].sum() * noise.dx)!r}  "
          f"mass outside window = {sol.mass_loss:.3g}")
    return [path]


def cmd_check_assumptions(c, out):
    sched = _schedule(c)
    rep = verify_assumptions(sched, c["sweep"]["t_list"])
    print(f"{'t':>12} {'a_ratio':>20} {'b_quantity':>14} {'c_quantity':>14}")
    for t, a, b, cc in rep.rows():
        print(f"{t:12.6g} {a:20.16f} {b:14.6g} {cc:14.6g}")
    print(f"a exact: {rep.a_exact}  b decreasing: {rep.b_decreasing}  c decreasing: {rep.c_decreasing}")
    path = _write_csv(out / "assumptions.csv", ["t", "a_ratio", "b_quantity", "c_quantity"], rep.rows())
    return [path]


COV_KERNELS = {
    1: [BoxKernel((0.0, 1.0, -1.0, 1.0)), BoxKernel((0.5, 2.0, 0.0, 2.0))],
    2: [BoxKernel((0.0, 1.0, -1.0, 1.0), (1.0, 2.0, -1.0, 1.0)), BoxKernel((0.0, 2.0, -1.0, 0.0), (0.0, 1.0, 0.0, 1.0))],
}


def cov_pairs(v):
    """``(m, n, exact covariance)`` for the preset box kernels."""
    f1, g1 = COV_KERNELS[1]
    f2, g2 = COV_KERNELS[2]
    return [(1, 1, f1, g1, v * f1.inner(g1)), (2, 2, f2, g2, 2 * v**2 * f2.inner(g2)), (1, 2, f1, g2, 0.0)]


def cmd_chaos_cov_test(c, out):
    e = c["env"]
    seed = c["run"]["seed"]
    pairs = cov_pairs(e["v"])
    prods = np.empty((e["n_clouds"], len(pairs)))
    for i in range(e["n_clouds"]):
        cloud = sample_cloud(e["v"], e["t_max"], e["L"], streams.stream(seed, streams.CLOUD, i))
        for j, (m, n, f, g, _) in enumerate(pairs):
            prods[i, j] = wiener_ito(cloud, f, m) * wiener_ito(cloud, g, n)
    rows = []
    for j, (m, n, _, _, exact) in enumerate(pairs):
        mc = float(prods[:, j].mean())
        se = float(prods[:, j].std(ddof=1) / math.sqrt(len(prods)))
        rows.append((m, n, mc, se, exact))
        print(f"(m, n) = ({m}, {n})  MC = {mc:.5f} +- {se:.5f}  exact = {exact:.5f}  z = {(mc - exact) / se:+.2f}")
    return [_write_csv(out / "chaos_cov.csv", ["m", "n", "mc", "se", "exact"], rows)]


def _print_report(rep):
    print(",".join(rep.columns))
    for row in rep.rows:
        print(",".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in row))
    if rep.trend is not None:
        print(f"KS trend slope = {rep.trend.slope:.4g} +- {rep.trend.std_error:.4g}  "
              f"non-increasing: {rep.trend.passed}")


def cmd_sweep(kind):
    def run(c, out):
        sw = c["sweep"]
        w = c["run"]["workers"]
        if kind == "thm1":
            rep = run_theorem1(_schedule(c), sw["t_list"], _budgets(c), _she(c), c["run"]["seed"], w,
                               cache_dir=out / "cache")
        elif kind == "thm2":
            rep = run_theorem2(_schedule(c), sw["t_list"], sw["T"], sw["Y"], _budgets(c), _she(c),
                               c["run"]["seed"], w, cache_dir=out / "cache")
        else:
            if sw["g"] not in NAMED_FUNCTIONS:
                raise UsageError(f"g must be one of {', '.join(NAMED_FUNCTIONS)}")
            rep = run_prop31(_schedule(c), SpaceTimeFunction(sw["g"], sw["half_width"]), sw["t_list"],
                             _budgets(c), c["run"]["seed"], w)
        _print_report(rep)
        paths = emit_report(rep, out)
        if not rep.valid:
            raise RuntimeError("run marked failed: more than 1% of replicas excluded")
        return list(paths.values())

    return run


HANDLERS = {
    "density": cmd_density,
    "sample-path": cmd_sample_path,
    "simulate": cmd_simulate,
    "solve-she": cmd_solve_she,
    "check-assumptions": cmd_check_assumptions,
    "chaos-cov-test": cmd_chaos_cov_test,
    "sweep-thm1": cmd_sweep("thm1"),
    "sweep-thm2": cmd_sweep("thm2"),
    "prop31": cmd_sweep("prop31"),
}


def _validate(command, c):
    """Construct the module objects once so bad parameters fail before any work."""
    if "stable" in c:
        _stable(c)
    if "schedule" in c:
        _schedule(c)
    if "budgets" in c and command.startswith(("sweep", "prop")):
        _budgets(c)
    if "she" in c:
        _she(c).offset(_stable(c))
    if "sweep" in c and "t_list" in c["sweep"]:
        t = c["sweep"]["t_list"]
        if not t or any(b <= a for a, b in zip(t, t[1:])) or t[0] <= 0:
            raise UsageError("t_list must be positive and increasing")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        c = resolve(args.command, args)
        _validate(args.command, c)
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(c["run"]["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = HANDLERS[args.command](c, out)
        manifest = {"command": args.command, "version": __version__, "params": _jsonable(c),
                    "outputs": sorted(p.name for p in paths)}
        manifest["params"]["run"].pop("workers")
        manifest["params"]["run"].pop("out")
        (out / f"run-{args.command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, OSError, MemoryError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _jsonable(c):
    return json.loads(json.dumps(c))


if __name__ == "__main__":
    sys.exit(main())
