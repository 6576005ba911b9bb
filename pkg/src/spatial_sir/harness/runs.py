"""Experiment drivers behind the CLI subcommands.

Seeds
-----
Every random stream is ``SeedSequence(master, spawn_key=(N, r, purpose))``
for population size ``N``, replica ``r`` and purpose

==========  ==========================================
0 / 1       initial population / dynamics (simulate, converge-*)
2 / 3       martingale study population / dynamics
4 / 5       increment study population / dynamics
==========  ==========================================

so any replica can be rerun on its own.  Replicas are distributed over a
process pool and collected in task order, which makes every output file
independent of the worker count.
"""
from __future__ import annotations

import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..engine import TestFunctionTriple, simulate
from ..fields import GridField, field_from_initial, make_local_rhs, make_nonlocal_rhs, rk4_integrate
from ..measures import (
    bl_triple,
    commutator_field,
    distance_components,
    empirical_measure,
    l2_distance,
    mollified_density,
    mollified_lattice,
    slope_fit,
)
from ..model import HealthState, sample_initial_population, seed_sequence
from .config import ConfigError, ExperimentConfig
from .csvio import write_csv
from .manifest import RunManifest

__all__ = [
    "OutputExistsError",
    "prepare_out",
    "replica_seed",
    "solve_limit",
    "run_simulate",
    "run_solve",
    "run_converge_meanfield",
    "run_converge_local",
    "run_diagnostics",
    "diagnostic_phi",
    "DISTANCE_COLUMNS",
]

DISTANCE_COLUMNS = ["N", "beta", "t", "metric_name", "value", "replica", "seed"]
PURPOSE_POP, PURPOSE_DYN = 0, 1
PURPOSE_MART_POP, PURPOSE_MART_DYN = 2, 3
PURPOSE_INC_POP, PURPOSE_INC_DYN = 4, 5


class OutputExistsError(ConfigError):
    pass


def prepare_out(out, force: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise OutputExistsError(f"output directory {out} is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def replica_seed(master: int, N: int, r: int, purpose: int):
    return seed_sequence(master, N, r, purpose)


def seed_label(master: int, N: int, r: int) -> str:
    return f"{master}:{N}:{r}"


def _pool_map(fn, tasks, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=1))


def _beta(cfg) -> str:
    return repr(cfg.kernel.beta) if cfg.kernel.kind == "local" else ""


# ---------------------------------------------------------------------------
# limit solutions
# ---------------------------------------------------------------------------

def solve_limit(cfg: ExperimentConfig, kind: str, times=None) -> dict:
    """Solve the non-local or local system; returns ``{t: GridField}`` for ``times``."""
    times = tuple(cfg.snapshot_times if times is None else times)
    if kind == "nonlocal":
        if cfg.kernel.kind != "meanfield":
            raise ConfigError("solve-nonlocal needs kind = meanfield", ("kernel", "kind"))
        f0 = field_from_initial(cfg.initial, cfg.grid, "cell_average")
        rhs = make_nonlocal_rhs(cfg.kernel.T, cfg.params.p, cfg.params.q)
    elif kind == "local":
        # point values: compared against mollified densities evaluated at cell centres
        f0 = field_from_initial(cfg.initial, cfg.grid, "point")
        rhs = make_local_rhs(cfg.params.p, cfg.params.q)
    else:
        raise ValueError(kind)
    t_end = max(times) if times else 0.0
    n_steps = int(round(t_end / cfg.dt))
    traj = rk4_integrate(f0, rhs, cfg.dt, n_steps, save_times=times)
    out = {}
    for t in times:
        best = min(traj, key=lambda f: abs(f.t - t))
        if abs(best.t - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigError(f"snapshot time {t} is not on the solver grid (dt={cfg.dt})",
                              ("experiment", "snapshot_times"))
        out[t] = GridField(best.data, t)
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _simulate_task(task):
    cfg, N, r = task
    pop = sample_initial_population(cfg.initial, N, replica_seed(cfg.seed, N, r, PURPOSE_POP))
    traj = simulate(pop, cfg.params, cfg.kernel, cfg.snapshot_times, replica_seed(cfg.seed, N, r, PURPOSE_DYN))
    pos = pop.positions
    events = [(N, r, float(t), "infection" if k == HealthState.I else "recovery", int(i),
               float(pos[i, 0]), float(pos[i, 1]))
              for t, k, i in zip(traj.times, traj.kinds, traj.indices)]
    snaps = []
    for k, t in enumerate(traj.snapshot_times):
        c = np.bincount(traj.snapshot_states[k], minlength=3)
        snaps.append((N, r, seed_label(cfg.seed, N, r), float(t), int(c[0]), int(c[1]), int(c[2])))
    return events, snaps


def run_simulate(cfg: ExperimentConfig, out, workers: int = 1, force: bool = False) -> Path:
    out = prepare_out(out, force)
    man = RunManifest("simulate", cfg.to_dict())
    tasks = [(cfg, N, r) for N in cfg.N for r in range(cfg.replicas)]
    man.seeds = [seed_label(cfg.seed, N, r) for _, N, r in tasks]
    results = _pool_map(_simulate_task, tasks, workers)
    write_csv(out / "events.csv", "events", ["N", "replica", "time", "kind", "individual", "x", "y"],
              [row for ev, _ in results for row in ev])
    write_csv(out / "snapshots.csv", "snapshots", ["N", "replica", "seed", "t", "n_S", "n_I", "n_R"],
              [row for _, sn in results for row in sn])
    man.record_files(out, ["events.csv", "snapshots.csv"])
    man.finish()
    man.write(out)
    return out


def run_solve(cfg: ExperimentConfig, out, kind: str, force: bool = False) -> Path:
    """Solve one limit system and write totals plus per-snapshot fields."""
    out = prepare_out(out, force)
    man = RunManifest(f"solve-{kind}", cfg.to_dict())
    sols = solve_limit(cfg, kind)
    names = []
    rows = []
    for k, (t, f) in enumerate(sols.items()):
        rows.append((t, *map(float, f.totals())))
        name = f"field_{k:03d}.csv"
        f.write_csv(out / name)
        raw = f"field_{k:03d}.bin"
        f.write_raw(out / raw)
        names += [name, raw]
    write_csv(out / "totals.csv", "totals", ["t", "S", "I", "R"], rows)
    man.record_files(out, names + ["totals.csv"])
    man.finish()
    man.write(out)
    return out


# ---------------------------------------------------------------------------
# convergence studies
# ---------------------------------------------------------------------------

def _summaries(rows, cfg):
    """Median/mean/stderr per (N, t, metric) and slope fits per (t, metric)."""
    groups = {}
    for N, _, t, metric, value, _, _ in rows:
        groups.setdefault((metric, t, N), []).append(value)
    report = []
    for (metric, t, N), vals in sorted(groups.items()):
        v = np.asarray(vals, dtype=float)
        se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else None
        report.append((N, _beta(cfg), t, metric, float(np.median(v)), float(v.mean()), se, len(v)))
    slopes = []
    keys = sorted({(m, t) for m, t, _ in groups})
    for metric, t in keys:
        pts = [(N, r[4]) for r in report if r[3] == metric and r[2] == t for N in [r[0]]]
        if len(pts) >= 3 and all(v > 0 for _, v in pts):
            s, c, se = slope_fit(pts)
            slopes.append((_beta(cfg), t, metric, s, c, se))
    return report, slopes


def _write_reports(out, rows, cfg):
    report, slopes = _summaries(rows, cfg)
    write_csv(out / "distances.csv", "distances", DISTANCE_COLUMNS, rows)
    write_csv(out / "report.csv", "report", ["N", "beta", "t", "metric_name", "median", "mean", "stderr", "n"],
              report)
    write_csv(out / "slopes.csv", "slopes", ["beta", "t", "metric_name", "slope", "intercept", "stderr"], slopes)
    return ["distances.csv", "report.csv", "slopes.csv"]


def _meanfield_task(task):
    cfg, N, r, limits = task
    pop = sample_initial_population(cfg.initial, N, replica_seed(cfg.seed, N, r, PURPOSE_POP))
    traj = simulate(pop, cfg.params, cfg.kernel, cfg.snapshot_times, replica_seed(cfg.seed, N, r, PURPOSE_DYN))
    rows = []
    for k, t in enumerate(traj.snapshot_times):
        mu = empirical_measure(traj.snapshot(k))
        d = bl_triple(mu, GridField(limits[float(t)], float(t)), grid=cfg.metric_grid)
        rows.append((N, "", float(t), "bl", d, r, seed_label(cfg.seed, N, r)))
    return rows


def run_converge_meanfield(cfg: ExperimentConfig, out, workers: int = 1, force: bool = False) -> Path:
    """Flat distance between particle snapshots and the non-local solution."""
    if cfg.kernel.kind != "meanfield":
        raise ConfigError("converge-meanfield needs kind = meanfield", ("kernel", "kind"))
    out = prepare_out(out, force)
    man = RunManifest("converge-meanfield", cfg.to_dict())
    limits = {float(t): f.data for t, f in solve_limit(cfg, "nonlocal").items()}
    tasks = [(cfg, N, r, limits) for N in cfg.N for r in range(cfg.replicas)]
    man.seeds = [seed_label(cfg.seed, N, r) for _, N, r, _ in tasks]
    rows = [row for res in _pool_map(_meanfield_task, tasks, workers) for row in res]
    names = _write_reports(out, rows, cfg)
    write_csv(out / "limit_totals.csv", "totals", ["t", "S", "I", "R"],
              [(t, *map(float, GridField(d).totals())) for t, d in limits.items()])
    man.record_files(out, names + ["limit_totals.csv"])
    man.finish()
    man.write(out)
    return out


def _local_task(task):
    cfg, N, r, limits = task
    spec = cfg.kernel
    pop = sample_initial_population(cfg.initial, N, replica_seed(cfg.seed, N, r, PURPOSE_POP))
    traj = simulate(pop, cfg.params, spec, cfg.snapshot_times, replica_seed(cfg.seed, N, r, PURPOSE_DYN))
    label = seed_label(cfg.seed, N, r)
    beta = _beta(cfg)
    rows = []
    comm = []
    w1_reps = cfg.replicas if cfg.w1_replicas is None else cfg.w1_replicas
    for k, t in enumerate(traj.snapshot_times):
        t = float(t)
        snap = traj.snapshot(k)
        mu = empirical_measure(snap)
        if r < w1_reps:
            lat = mollified_lattice(mu, spec, cfg.metric_grid)
            dc = distance_components(lat, mu, grid=cfg.metric_grid)
            rows.append((N, beta, t, "w1_mollified", float(dc["values"].sum()), r, label))
            rows.append((N, beta, t, "w1_aggregation_error", dc["aggregation_error"], r, label))
        rho = mollified_density(mu, spec, cfg.grid)
        rows.append((N, beta, t, "l2_field", l2_distance(rho, GridField(limits[t], t)), r, label))
        comm.append(commutator_field(snap, spec, cfg.commutator_grid).sup)
        rows.append((N, beta, t, "commutator_sup", comm[-1], r, label))
    if comm:
        # sup over the snapshot times up to the last one
        rows.append((N, beta, float(traj.snapshot_times[-1]), "commutator_sup_time", max(comm), r, label))
    return rows


def run_converge_local(cfg: ExperimentConfig, out, workers: int = 1, force: bool = False) -> Path:
    """Mollification distance, field distance and commutator size for the local regime."""
    if cfg.kernel.kind != "local":
        raise ConfigError("converge-local needs kind = local", ("kernel", "kind"))
    out = prepare_out(out, force)
    man = RunManifest("converge-local", cfg.to_dict())
    limits = {float(t): f.data for t, f in solve_limit(cfg, "local").items()}
    tasks = [(cfg, N, r, limits) for N in cfg.N for r in range(cfg.replicas)]
    man.seeds = [seed_label(cfg.seed, N, r) for _, N, r, _ in tasks]
    rows = [row for res in _pool_map(_local_task, tasks, workers) for row in res]
    bounds = [(N, _beta(cfg), "", "support_radius", cfg.kernel.support_radius(N), "", "") for N in cfg.N]
    names = _write_reports(out, rows, cfg)
    write_csv(out / "bounds.csv", "bounds", DISTANCE_COLUMNS, bounds)
    man.record_files(out, names + ["bounds.csv"])
    man.finish()
    man.write(out)
    return out


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def _phi_values(xy):
    x, y = xy[:, 0], xy[:, 1]
    return np.column_stack([0.5 * np.cos(np.pi * x) * np.cos(np.pi * y),
                            np.sin(np.pi * x) * np.sin(np.pi * y),
                            0.25 + 0.5 * x * y])


def _const_values(xy):
    return np.full((len(xy), 3), 0.7)


def diagnostic_phi() -> tuple[TestFunctionTriple, TestFunctionTriple]:
    """The smooth test triple used by the diagnostics and a constant triple."""
    return TestFunctionTriple(_phi_values, "phi"), TestFunctionTriple(_const_values, "const")


def _martingale_task(task):
    cfg, N, r = task
    phi, const = diagnostic_phi()
    H = cfg.diagnostics.horizon
    params = replace(cfg.params, horizon=max(H, cfg.params.horizon))
    pop = sample_initial_population(cfg.initial, N, replica_seed(cfg.seed, N, r, PURPOSE_MART_POP))
    traj = simulate(pop, params, cfg.kernel, [0.0, H], replica_seed(cfg.seed, N, r, PURPOSE_MART_DYN),
                    observables=[phi, const])
    obs = traj.snapshot_observables
    out = []
    for m, name in enumerate(("phi", "const")):
        M = (obs[1, 0, m] - obs[0, 0, m]) / N - (obs[1, 1, m] - obs[0, 1, m])
        out.append((N, r, seed_label(cfg.seed, N, r), name, float(M), float(obs[1, 2, m] - obs[0, 2, m])))
    return out


def _increment_task(task):
    cfg, N, r = task
    phi, _ = diagnostic_phi()
    d = cfg.diagnostics
    t0 = d.increment_start
    times = sorted({t0, *[t0 + th for th in d.thetas]})
    params = replace(cfg.params, horizon=max(times[-1], cfg.params.horizon))
    pop = sample_initial_population(cfg.initial, N, replica_seed(cfg.seed, N, r, PURPOSE_INC_POP))
    traj = simulate(pop, params, cfg.kernel, times, replica_seed(cfg.seed, N, r, PURPOSE_INC_DYN))
    vals = {t: phi.pairing(traj.snapshot(k)) for k, t in enumerate(times)}
    return [(N, r, seed_label(cfg.seed, N, r), th, (vals[t0 + th] - vals[t0]) ** 2) for th in d.thetas]


def run_diagnostics(cfg: ExperimentConfig, out, workers: int = 1, force: bool = False) -> Path:
    """Martingale variance sweep, quadratic-variation check and increment bounds."""
    out = prepare_out(out, force)
    man = RunManifest("diagnostics", cfg.to_dict())
    d = cfg.diagnostics
    mtasks = [(cfg, N, r) for N in d.N for r in range(d.replicas)]
    itasks = [(cfg, N, r) for N in d.increment_N for r in range(d.increment_replicas)]
    man.seeds = [seed_label(cfg.seed, N, r) for _, N, r in mtasks + itasks]
    mrows = [row for res in _pool_map(_martingale_task, mtasks, workers) for row in res]
    irows = [row for res in _pool_map(_increment_task, itasks, workers) for row in res]
    write_csv(out / "martingale.csv", "martingale", ["N", "replica", "seed", "phi", "M_T", "QV_T"], mrows)
    write_csv(out / "increments.csv", "increments", ["N", "replica", "seed", "theta", "sq_increment"], irows)

    summary = []
    var_pts = {}
    for name in ("phi", "const"):
        for N in d.N:
            M = np.array([row[4] for row in mrows if row[0] == N and row[3] == name])
            Q = np.array([row[5] for row in mrows if row[0] == N and row[3] == name])
            var = float(M.var(ddof=1)) if len(M) > 1 else 0.0
            summary += [("martingale", N, name, "var_M", var),
                        ("martingale", N, name, "mean_QV", float(Q.mean())),
                        ("martingale", N, name, "median_abs_M", float(np.median(np.abs(M))))]
            var_pts.setdefault(name, []).append((N, var))
    if len(d.N) >= 3 and all(v > 0 for _, v in var_pts["phi"]):
        s, _, se = slope_fit(var_pts["phi"])
        summary += [("martingale", "", "phi", "var_M_slope", s), ("martingale", "", "phi", "var_M_slope_stderr", se)]
    consts = []
    for N in d.increment_N:
        ratios = []
        for th in d.thetas:
            v = float(np.mean([row[4] for row in irows if row[0] == N and row[3] == th]))
            summary.append(("increment", N, repr(th), "mean_sq", v))
            ratios.append(v / th)
        C = max(ratios)
        consts.append(C)
        summary.append(("increment", N, "", "constant", C))
        means = [r * th for r, th in zip(ratios, d.thetas)]
        if len(d.thetas) >= 3 and min(means) > 0:
            summary.append(("increment", N, "", "theta_exponent", slope_fit(zip(d.thetas, means))[0]))
    if consts and min(consts) > 0:
        summary.append(("increment", "", "", "constant_ratio", max(consts) / min(consts)))
    write_csv(out / "diagnostics.csv", "diagnostics", ["section", "N", "label", "statistic", "value"], summary)
    man.record_files(out, ["martingale.csv", "increments.csv", "diagnostics.csv"])
    man.finish()
    man.write(out)
    return out
