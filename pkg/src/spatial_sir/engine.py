"""Exact event-driven simulation of the spatial SIR Markov chain.

Two transitions exist: recovery ``I -> R`` of an infected individual at rate
``p`` and infection ``S -> I`` of susceptible ``i`` at rate
``lambda_i = sum_{j infected} tau_N(i, j)``.  :func:`simulate` drives one of
the two cores (compiled or numpy, see ``_backend``); :func:`gillespie_step`
is a slow, self-contained reference stepper used as an oracle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import _backend, _pycore
from .kernels import (
    K_PYTHON,
    SpatialIndex,
    brute_force_pressure,
    build_spatial_index,
    cell_list,
    cells_for_radius,
    core_params,
    eval_tau,
)
from .model import HealthState, ModelParams, PopulationState, make_rng

__all__ = [
    "Event",
    "ABSORBED",
    "Trajectory",
    "TestFunctionTriple",
    "MartingaleDiagnostic",
    "total_event_rate",
    "gillespie_step",
    "build_engine",
    "simulate",
    "replay",
    "martingale_path",
    "generator_drift",
    "quadratic_variation_rate",
    "absorption_time",
]


@dataclass(frozen=True)
class Event:
    """One transition; ``kind`` is the new state (``I`` for infection, ``R`` for recovery)."""

    time: float
    kind: HealthState
    index: int

    @property
    def is_infection(self) -> bool:
        return self.kind == HealthState.I


class _Absorbed:
    def __repr__(self):
        return "ABSORBED"

    def __bool__(self):
        return False


ABSORBED = _Absorbed()


# ---------------------------------------------------------------------------
# reference stepper
# ---------------------------------------------------------------------------

def total_event_rate(pop: PopulationState, spec, params: ModelParams) -> float:
    """``p * n_I + sum_{i in S} lambda_i``.

    Uses ``pop.pressure`` when present, otherwise recomputes every pressure
    from scratch.
    """
    n_I = int(np.count_nonzero(pop.states == HealthState.I))
    if n_I == 0:
        return 0.0
    lam = pop.pressure if pop.pressure is not None else brute_force_pressure(pop, spec, params)
    return params.p * n_I + float(lam[pop.states == HealthState.S].sum())


def _neighbourhood(pop, index, spec, j):
    if spec.kind == "local":
        cand = index.block(pop.positions[j])
    else:
        cand = np.arange(pop.N)
    return cand[pop.states[cand] == HealthState.S]


def gillespie_step(pop: PopulationState, index: SpatialIndex | None, spec, params: ModelParams,
                   rng: np.random.Generator):
    """Advance ``pop`` in place by one event of the direct method.

    The waiting time is exponential with the total rate; the event is drawn
    with probability proportional to its rate.  Pressures in
    ``pop.pressure`` are updated incrementally over the kernel neighbourhood
    of the individual that changed state.

    Returns
    -------
    Event or ABSORBED
        ``ABSORBED`` when no event can occur any more.
    """
    if pop.pressure is None:
        pop.pressure = brute_force_pressure(pop, spec, params)
    if spec.kind == "local" and index is None:
        index = build_spatial_index(pop, spec)
    st = pop.states
    infected = np.flatnonzero(st == HealthState.I)
    if len(infected) == 0:
        return ABSORBED
    lam = np.where(st == HealthState.S, pop.pressure, 0.0)
    rec = params.p * len(infected)
    total = rec + lam.sum()
    if total <= 0:
        return ABSORBED
    pop.clock += rng.exponential(1.0 / total)
    x = rng.random() * total
    if x < rec:
        j = int(infected[min(int(x / params.p), len(infected) - 1)])
        st[j] = HealthState.R
        cand = _neighbourhood(pop, index, spec, j)
        if len(cand):
            pop.pressure[cand] -= eval_tau(spec, params, pop.N, pop.positions[cand], pop.positions[j])
            np.maximum(pop.pressure, 0.0, out=pop.pressure)
        kind = HealthState.R
    else:
        cs = np.cumsum(lam)
        j = int(min(np.searchsorted(cs, x - rec, side="right"), pop.N - 1))
        if lam[j] <= 0:
            j = int(np.flatnonzero(lam > 0)[-1])
        st[j] = HealthState.I
        pop.pressure[j] = 0.0
        cand = _neighbourhood(pop, index, spec, j)
        if len(cand):
            pop.pressure[cand] += eval_tau(spec, params, pop.N, pop.positions[cand], pop.positions[j])
        kind = HealthState.I
    if index is not None:
        index.infected_per_cell[index.cell_of[j]] += 1 if kind == HealthState.I else -1
    # a pressure with no infected neighbour left is exactly zero
    if kind == HealthState.R and not np.any(st == HealthState.I):
        pop.pressure[:] = 0.0
    return Event(pop.clock, kind, j)


# ---------------------------------------------------------------------------
# test functions and martingale bookkeeping
# ---------------------------------------------------------------------------

class TestFunctionTriple:
    """Three bounded functions on the unit square, one per compartment.

    Parameters
    ----------
    fn : callable
        Maps points ``(n, 2)`` to values ``(n, 3)`` ordered (S, I, R).
    """

    __test__ = False  # keep pytest from collecting this class

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], name: str = "phi"):
        self.fn = fn
        self.name = name

    def values(self, xy) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        out = np.asarray(self.fn(xy), dtype=float)
        if out.shape != (len(xy), 3):
            raise ValueError(f"test function must return shape ({len(xy)}, 3), got {out.shape}")
        return out

    def jumps(self, xy):
        """``(phi^I - phi^S, phi^R - phi^I)`` at ``xy``."""
        v = self.values(xy)
        return v[:, 1] - v[:, 0], v[:, 2] - v[:, 1]

    @classmethod
    def constant(cls, c: float = 1.0):
        return cls(lambda xy: np.full((len(xy), 3), float(c)), name=f"const{c:g}")

    @classmethod
    def from_callables(cls, fS, fI, fR, name="phi"):
        return cls(lambda xy: np.stack([fS(xy), fI(xy), fR(xy)], axis=1), name=name)

    def pairing(self, pop: PopulationState) -> float:
        """``<mu^N, phi> = (1/N) sum_k phi^{A_k}(x_k)``."""
        v = self.values(pop.positions)
        return float(v[np.arange(pop.N), pop.states.astype(np.intp)].sum() / pop.N)


def generator_drift(pop: PopulationState, phi: TestFunctionTriple, spec, params: ModelParams,
                    pressure: np.ndarray | None = None) -> float:
    """Generator applied to ``<mu^N, phi>``, summed directly over individuals."""
    lam = brute_force_pressure(pop, spec, params) if pressure is None else pressure
    a, b = phi.jumps(pop.positions)
    inf = pop.states == HealthState.I
    sus = pop.states == HealthState.S
    return float((params.p * b[inf].sum() + (lam[sus] * a[sus]).sum()) / pop.N)


def quadratic_variation_rate(pop: PopulationState, phi: TestFunctionTriple, spec, params: ModelParams,
                             pressure: np.ndarray | None = None) -> float:
    """``L F^2 - 2 F L F`` for ``F = <mu^N, phi>``: every rate times its squared jump.

    ``(p / N^2) sum_I (phi^R - phi^I)^2 + (1 / N^2) sum_S lambda_k (phi^I - phi^S)^2``.
    """
    lam = brute_force_pressure(pop, spec, params) if pressure is None else pressure
    a, b = phi.jumps(pop.positions)
    inf = pop.states == HealthState.I
    sus = pop.states == HealthState.S
    return float((params.p * (b[inf] ** 2).sum() + (lam[sus] * a[sus] ** 2).sum()) / pop.N**2)


@dataclass
class MartingaleDiagnostic:
    """Martingale ``M_t = <mu_t, phi> - <mu_0, phi> - int_0^t L<mu_s, phi> ds``.

    Arrays have shape ``(K, m)`` for ``K`` sample times and ``m`` test functions.
    ``quadratic_variation`` is the integrated bracket ``int_0^t (L F^2 - 2 F L F) ds``.
    """

    names: list
    times: np.ndarray
    value: np.ndarray
    compensator: np.ndarray
    quadratic_variation: np.ndarray

    @property
    def martingale(self) -> np.ndarray:
        return self.value - self.value[:1] - self.compensator


# ---------------------------------------------------------------------------
# engine-backed simulation
# ---------------------------------------------------------------------------

def _observable_arrays(phis, positions):
    if not phis:
        return None, None
    ab = [phi.jumps(positions) for phi in phis]
    return np.stack([a for a, _ in ab]), np.stack([b for _, b in ab])


def build_engine(pop: PopulationState, spec, params: ModelParams, rng=None,
                 observables: Sequence[TestFunctionTriple] = (), backend: str | None = None):
    """Instantiate a core engine for ``pop``; ``rng=None`` gives a replay-only engine."""
    N = pop.N
    code, pref, shape, cutoff2 = core_params(spec, params.q, N)
    core = _backend.get_core(backend)
    tau_fn = None
    if code == K_PYTHON:
        core = _pycore
        tau_fn = spec.T
    kw = {}
    if spec.kind == "local":
        n = cells_for_radius(spec.support_radius(N))
        cell_of, start, items = cell_list(pop.positions, n)
        kw = dict(cell_n=n, cell_of=cell_of, cell_start=start, cell_items=items)
    oa, ob = _observable_arrays(list(observables), pop.positions)
    return core.Engine(pop.positions, pop.states, params.p, params.q, code, pref, shape, cutoff2,
                       rng=rng, obs_a=oa, obs_b=ob, tau_fn=tau_fn, **kw)


@dataclass
class Trajectory:
    """Initial state, full event log and càdlàg snapshots of one run."""

    initial: PopulationState
    params: ModelParams
    spec: object
    times: np.ndarray
    kinds: np.ndarray
    indices: np.ndarray
    snapshot_times: np.ndarray
    snapshot_states: np.ndarray
    snapshot_observables: np.ndarray | None = None
    seed: object = None
    backend: str = ""
    observable_names: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.initial.N

    @property
    def n_events(self) -> int:
        return len(self.times)

    def events(self) -> Iterator[Event]:
        for t, k, i in zip(self.times, self.kinds, self.indices):
            yield Event(float(t), HealthState(int(k)), int(i))

    def states_at(self, t: float) -> np.ndarray:
        """States just after the last event at or before ``t``."""
        st = self.initial.states.copy()
        n = int(np.searchsorted(self.times, t, side="right"))
        # each individual changes at most twice, so the last write wins
        st[self.indices[:n]] = self.kinds[:n]
        return st

    def snapshot(self, k: int) -> PopulationState:
        return PopulationState(self.initial.positions, self.snapshot_states[k].copy(),
                               clock=float(self.snapshot_times[k]))

    def state_at(self, t: float) -> PopulationState:
        return PopulationState(self.initial.positions, self.states_at(t), clock=float(t))

    def counts_path(self) -> tuple[np.ndarray, np.ndarray]:
        """Event times (with 0 prepended) and counts ``(n_S, n_I, n_R)`` after each event."""
        c0 = np.asarray(self.initial.counts, dtype=np.int64)
        steps = np.zeros((self.n_events, 3), dtype=np.int64)
        inf = self.kinds == HealthState.I
        steps[inf, 0] = -1
        steps[inf, 1] = 1
        steps[~inf, 1] = -1
        steps[~inf, 2] = 1
        counts = np.vstack([c0, c0 + np.cumsum(steps, axis=0)])
        return np.concatenate([[0.0], self.times]), counts

    def write_events_csv(self, path) -> None:
        """Columns ``time, kind, individual, x, y``."""
        pos = self.initial.positions
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["time", "kind", "individual", "x", "y"])
            for t, k, i in zip(self.times, self.kinds, self.indices):
                w.writerow([repr(float(t)), "infection" if k == HealthState.I else "recovery", int(i),
                            repr(float(pos[i, 0])), repr(float(pos[i, 1]))])


def _as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return make_rng(seed)


def simulate(pop0: PopulationState, params: ModelParams, spec, snapshot_times: Sequence[float],
             seed, observables: Sequence[TestFunctionTriple] = (), backend: str | None = None,
             max_events: int | None = None) -> Trajectory:
    """Run the chain from ``pop0`` and capture càdlàg snapshots.

    Parameters
    ----------
    snapshot_times : sequence of float
        Sorted times in ``[0, horizon]``; the run stops at the last one.
    seed : int, SeedSequence or Generator
        The trajectory is a deterministic function of ``seed``.
    observables : sequence of TestFunctionTriple
        Test functions whose martingale bookkeeping is recorded at each snapshot.
    max_events : int, optional
        Safety cap; exceeding it raises ``RuntimeError``.
    """
    ts = np.asarray(snapshot_times, dtype=float)
    if ts.ndim != 1 or np.any(np.diff(ts) < 0):
        raise ValueError("snapshot_times must be a sorted 1-D sequence")
    if len(ts) and (ts[0] < 0 or ts[-1] > params.horizon * (1 + 1e-12)):
        raise ValueError("snapshot_times must lie in [0, horizon]")
    obs = list(observables)
    eng = build_engine(pop0, spec, params, rng=_as_rng(seed), observables=obs, backend=backend)
    snaps = np.empty((len(ts), pop0.N), dtype=np.int8)
    snap_obs = np.empty((len(ts), 3, len(obs))) if obs else None
    for k, t in enumerate(ts):
        if max_events is None:
            eng.advance(t)
        else:
            while eng.t_next <= t:
                if eng.n_events >= max_events:
                    raise RuntimeError(f"event cap {max_events} exceeded before t={t}")
                eng.step()
        snaps[k] = eng.states_array()
        if obs:
            snap_obs[k] = np.stack(eng.observe(t))
    log = eng.take_log()
    return Trajectory(
        initial=PopulationState(pop0.positions, pop0.states.copy(), clock=0.0),
        params=params, spec=spec,
        times=log["times"], kinds=log["kinds"], indices=log["idx"],
        snapshot_times=ts, snapshot_states=snaps, snapshot_observables=snap_obs,
        seed=seed if not isinstance(seed, np.random.Generator) else None,
        backend=type(eng).__module__.rsplit(".", 1)[-1],
        observable_names=[o.name for o in obs],
    )


def replay(traj: Trajectory, observables: Sequence[TestFunctionTriple] = (), backend: str | None = None,
           until: float | None = None):
    """Re-apply the event log to a fresh replay-only engine and return it."""
    eng = build_engine(traj.initial, traj.spec, traj.params, rng=None, observables=observables, backend=backend)
    n = traj.n_events if until is None else int(np.searchsorted(traj.times, until, side="right"))
    eng.replay(traj.times[:n], traj.kinds[:n], traj.indices[:n])
    return eng


def martingale_path(traj: Trajectory, phis: Sequence[TestFunctionTriple] | TestFunctionTriple,
                    times: Sequence[float] | None = None, backend: str | None = None) -> MartingaleDiagnostic:
    """Martingale and bracket of ``<mu^N, phi>`` along a recorded trajectory.

    The compensator and bracket integrands are constant between events, so
    both integrals are exact.  Without ``times`` the path is sampled at 0 and
    after every event.
    """
    if isinstance(phis, TestFunctionTriple):
        phis = [phis]
    phis = list(phis)
    eng = build_engine(traj.initial, traj.spec, traj.params, rng=None, observables=phis, backend=backend)
    m = len(phis)
    if times is None:
        v0, c0, q0 = eng.observe(0.0)
        eng.replay(traj.times, traj.kinds, traj.indices)
        obs = eng.take_log().get("obs", np.zeros((0, 3, m)))
        ts = np.concatenate([[0.0], traj.times])
        V = np.vstack([v0, obs[:, 0]])
        C = np.vstack([c0, obs[:, 1]])
        Q = np.vstack([q0, obs[:, 2]])
    else:
        ts = np.asarray(times, dtype=float)
        V, C, Q = np.empty((len(ts), m)), np.empty((len(ts), m)), np.empty((len(ts), m))
        done = 0
        for k, t in enumerate(ts):
            n = int(np.searchsorted(traj.times, t, side="right"))
            eng.replay(traj.times[done:n], traj.kinds[done:n], traj.indices[done:n])
            done = max(done, n)
            V[k], C[k], Q[k] = eng.observe(t)
        eng.take_log()
    N = traj.N
    # the cores track sum_k phi^{A_k}(x_k) relative to the all-susceptible baseline
    base = np.array([phi.values(traj.initial.positions)[:, 0].sum() for phi in phis])
    return MartingaleDiagnostic([p.name for p in phis], ts, (V + base) / N, C, Q)


def absorption_time(traj: Trajectory) -> float:
    """Time of the last recovery when the run ended with no infected, else ``inf``."""
    _, counts = traj.counts_path()
    if counts[-1, 1] != 0:
        return math.inf
    return float(traj.times[-1]) if traj.n_events else 0.0
