"""Empirical measures, mollified densities, transport distances and slopes.

Distances
---------
* :func:`w1_exact` solves the balanced transport problem with Euclidean
  cost by network simplex (POT's ``emd``).
* :func:`bounded_lipschitz` is the flat metric
  ``sup { int phi d(mu - nu) : |phi| <= 1, Lip(phi) <= 1 }``.  It is computed
  exactly as an unbalanced transport problem: mass may be moved at cost
  ``|x - y|`` or created/destroyed at cost 1, which is the primal side of
  the same supremum.  :func:`bounded_lipschitz_dual_lp` evaluates the
  supremum directly as a linear program and serves as a cross-check.

Both distances depend only on ``mu - nu``.  When the combined atom count
exceeds :data:`MAX_EXACT_ATOMS`, atoms are moved to the centres of a lattice
of spacing ``1 / grid`` (at most ``h / sqrt(2)`` per unit mass) and
co-located mass is netted before solving.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats
from scipy.sparse import csr_matrix
from scipy.spatial.distance import cdist

for _flag in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_flag}", "1")
import ot  # noqa: E402

from . import _backend  # noqa: E402
from .fields import GridField, grid_centres  # noqa: E402
from .kernels import BUMP_NORMALIZATION, K_BUMP, Local, cell_list, cells_for_radius, theta_N  # noqa: E402
from .model import HealthState, PopulationState  # noqa: E402

__all__ = [
    "MAX_EXACT_ATOMS",
    "AtomSet",
    "EmpiricalMeasure",
    "empirical_measure",
    "grid_atoms",
    "kernel_sum",
    "mollified_density",
    "all_particle_density",
    "mollified_lattice",
    "w1_exact",
    "w1",
    "bounded_lipschitz",
    "bounded_lipschitz_dual_lp",
    "w1_triple",
    "bl_triple",
    "distance_components",
    "CommutatorField",
    "commutator_field",
    "l2_distance",
    "slope_fit",
]

MAX_EXACT_ATOMS = 4096


@dataclass(frozen=True)
class AtomSet:
    """Finite measure ``sum_k w_k delta_{x_k}``."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(pos) != len(w):
            raise ValueError("positions and weights differ in length")
        if np.any(w < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "weights", w)

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def __len__(self) -> int:
        return len(self.weights)

    @classmethod
    def empty(cls) -> "AtomSet":
        return cls(np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def point(cls, x, mass: float = 1.0) -> "AtomSet":
        return cls(np.asarray(x, float).reshape(1, 2), np.array([mass]))

    def translate(self, v) -> "AtomSet":
        return AtomSet(self.positions + np.asarray(v, float), self.weights)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """``mu^N = (1/N) sum_k delta_{(x_k, A_k)}`` split by compartment."""

    positions: np.ndarray
    states: np.ndarray

    @property
    def N(self) -> int:
        return len(self.states)

    def component(self, A) -> AtomSet:
        sel = self.states == int(A)
        return AtomSet(self.positions[sel], np.full(int(sel.sum()), 1.0 / self.N))

    def components(self) -> tuple[AtomSet, AtomSet, AtomSet]:
        return tuple(self.component(A) for A in HealthState)

    @property
    def masses(self) -> np.ndarray:
        return np.bincount(self.states.astype(np.intp), minlength=3)[:3] / self.N

    def pairing(self, phi) -> float:
        """``<mu^N, phi>`` for a test-function triple."""
        v = phi.values(self.positions)
        return float(v[np.arange(self.N), self.states.astype(np.intp)].sum() / self.N)


def empirical_measure(pop: PopulationState) -> EmpiricalMeasure:
    return EmpiricalMeasure(pop.positions, pop.states.copy())


def grid_atoms(field: GridField, A) -> AtomSet:
    """Cell-mass atoms at the cell centres; empty cells are dropped."""
    w = field.cell_masses()[int(A)].ravel()
    keep = w > 0
    return AtomSet(field.centres()[keep], w[keep])


def _as_triple(x) -> tuple[AtomSet, AtomSet, AtomSet]:
    if isinstance(x, EmpiricalMeasure):
        return x.components()
    if isinstance(x, PopulationState):
        return empirical_measure(x).components()
    if isinstance(x, GridField):
        return tuple(grid_atoms(x, A) for A in range(3))
    if isinstance(x, (tuple, list)) and len(x) == 3 and all(isinstance(a, AtomSet) for a in x):
        return tuple(x)
    raise TypeError(f"cannot interpret {type(x).__name__} as a measure triple")


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------

def _bump_params(spec: Local, N: int):
    s = spec.scale(N)
    return K_BUMP, spec.amplitude(N) * BUMP_NORMALIZATION, s * s, spec.support_radius(N) ** 2


def kernel_sum(query, atoms, weights, spec: Local, N: int, backend: str | None = None) -> np.ndarray:
    """``out[q, c] = sum_j theta_N(query_q - atom_j) weights[j, c]`` using a cell list."""
    atoms = np.asarray(atoms, dtype=float).reshape(-1, 2)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = weights[:, None]
    code, pref, shape, cutoff2 = _bump_params(spec, N)
    n = cells_for_radius(spec.support_radius(N))
    _, start, items = cell_list(atoms, n)
    core = _backend.get_core(backend)
    return core.kernel_sum(np.asarray(query, float).reshape(-1, 2), atoms, weights, code, pref, shape, cutoff2,
                           n, start, items)


def _check_resolution(spec: Local, N: int, n: int):
    if 1.0 / n > spec.support_radius(N) / 2:
        warnings.warn(f"grid spacing 1/{n} exceeds half the kernel support radius "
                      f"{spec.support_radius(N):.3g}; kernel under-resolved", stacklevel=3)


def mollified_density(mu: EmpiricalMeasure, spec: Local, n: int = 64, backend: str | None = None) -> GridField:
    """``rho^{N,A}(x) = (1/N) sum_{k: A_k = A} theta_N(x - x_k)`` at the cell centres."""
    if spec.kind != "local":
        raise ValueError("mollified densities need a local kernel")
    N = mu.N
    _check_resolution(spec, N, n)
    onehot = np.zeros((N, 3))
    onehot[np.arange(N), mu.states.astype(np.intp)] = 1.0 / N
    c = grid_centres(n)
    X, Y = np.meshgrid(c, c, indexing="ij")
    q = np.column_stack([X.ravel(), Y.ravel()])
    vals = kernel_sum(q, mu.positions, onehot, spec, N, backend)
    return GridField(vals.T.reshape(3, n, n))


def all_particle_density(mu: EmpiricalMeasure, spec: Local, n: int = 64, backend: str | None = None) -> np.ndarray:
    """Mollified density of all atoms regardless of compartment, shape (n, n)."""
    return mollified_density(mu, spec, n, backend).data.sum(axis=0)


def mollified_lattice(mu: EmpiricalMeasure, spec: Local, grid: int = 32) -> tuple[AtomSet, AtomSet, AtomSet]:
    """Discrete mollification on a lattice that extends past the domain.

    Each atom's mass is spread over the lattice points in its kernel support
    with weights proportional to ``theta_N`` and renormalized per atom, so
    masses are exact and no mass moves farther than the support radius.
    Lattice points are the cell centres ``(i + 1/2) / grid`` for all integer
    ``i`` (negative or beyond ``grid`` included), matching :func:`w1`'s
    aggregation lattice.
    """
    N = mu.N
    r = spec.support_radius(N)
    h = 1.0 / grid
    if h / math.sqrt(2) >= r:
        raise ValueError("lattice too coarse: an atom may have no lattice point in its support")
    reach = int(math.ceil(r / h)) + 1
    off = np.arange(-reach, reach + 1)
    OX, OY = np.meshgrid(off, off, indexing="ij")
    OX, OY = OX.ravel(), OY.ravel()
    out = []
    for A in HealthState:
        atoms = mu.component(A)
        if len(atoms) == 0:
            out.append(AtomSet.empty())
            continue
        base = np.floor(atoms.positions / h).astype(np.int64)
        ix = base[:, :1] + OX[None, :]
        iy = base[:, 1:] + OY[None, :]
        disp = np.stack([(ix + 0.5) * h - atoms.positions[:, :1], (iy + 0.5) * h - atoms.positions[:, 1:]], axis=-1)
        w = theta_N(spec, N, disp)
        tot = w.sum(axis=1, keepdims=True)
        w = w / tot * atoms.weights[:, None]
        keep = w > 0
        ix, iy, w = ix[keep], iy[keep], w[keep]
        lo_x, lo_y = ix.min(), iy.min()
        span_y = iy.max() - lo_y + 1
        key = (ix - lo_x) * span_y + (iy - lo_y)
        acc = np.bincount(key, weights=w)
        nz = np.flatnonzero(acc > 0)
        px = (nz // span_y + lo_x + 0.5) * h
        py = (nz % span_y + lo_y + 0.5) * h
        out.append(AtomSet(np.column_stack([px, py]), acc[nz]))
    return tuple(out)


# ---------------------------------------------------------------------------
# transport distances
# ---------------------------------------------------------------------------

def _emd_cost(a, b, M) -> float:
    _, log = ot.emd(a, b, M, numItermax=50_000_000, log=True)
    if log.get("warning"):
        raise RuntimeError(f"network simplex did not converge: {log['warning']}")
    return float(log["cost"])


def w1_exact(mu: AtomSet, nu: AtomSet, max_atoms: int = MAX_EXACT_ATOMS) -> float:
    """Exact Wasserstein-1 distance between equal-mass atom sets."""
    ma, mb = mu.mass, nu.mass
    if abs(ma - mb) > 1e-12 * max(1.0, ma, mb):
        raise ValueError(f"unequal masses {ma!r} and {mb!r}; use bounded_lipschitz")
    if len(mu) + len(nu) > max_atoms:
        raise ValueError(f"{len(mu) + len(nu)} atoms exceed the exact-solver cap {max_atoms}; use w1()")
    if len(mu) == 0 or len(nu) == 0 or ma == 0:
        return 0.0
    a = mu.weights.copy()
    b = nu.weights * (ma / mb)
    return _emd_cost(a, b, cdist(mu.positions, nu.positions))


def _net(mu: AtomSet, nu: AtomSet, grid: int) -> tuple[AtomSet, AtomSet]:
    """Move atoms to lattice centres and cancel co-located mass."""
    h = 1.0 / grid
    pos = np.vstack([mu.positions, nu.positions])
    w = np.concatenate([mu.weights, -nu.weights])
    if len(w) == 0:
        return AtomSet.empty(), AtomSet.empty()
    ij = np.floor(pos / h).astype(np.int64)
    lo = ij.min(axis=0)
    span = ij.max(axis=0) - lo + 1
    key = (ij[:, 0] - lo[0]) * span[1] + (ij[:, 1] - lo[1])
    acc = np.bincount(key, weights=w)
    cx = (np.arange(len(acc)) // span[1] + lo[0] + 0.5) * h
    cy = (np.arange(len(acc)) % span[1] + lo[1] + 0.5) * h
    centres = np.column_stack([cx, cy])
    pos_mask = acc > 0
    neg_mask = acc < 0
    return AtomSet(centres[pos_mask], acc[pos_mask]), AtomSet(centres[neg_mask], -acc[neg_mask])


def _prepare(mu: AtomSet, nu: AtomSet, grid: int, max_atoms: int, extra: int = 0):
    if len(mu) + len(nu) + extra <= max_atoms:
        return mu, nu, 0.0
    a, b = _net(mu, nu, grid)
    if len(a) + len(b) + extra > max_atoms:
        raise ValueError(f"{len(a) + len(b)} netted lattice atoms at grid {grid} exceed the cap {max_atoms}; "
                         "use a coarser metric grid")
    return a, b, (mu.mass + nu.mass) / (grid * math.sqrt(2))


def w1(mu: AtomSet, nu: AtomSet, grid: int = 64, max_atoms: int = MAX_EXACT_ATOMS,
       return_error: bool = False):
    """W1 with lattice aggregation above the atom cap.

    With ``return_error`` the aggregation error bound is returned as well
    (zero when no aggregation took place).
    """
    if abs(mu.mass - nu.mass) > 1e-9 * max(1.0, mu.mass):
        raise ValueError("unequal masses; use bounded_lipschitz")
    a, b, err = _prepare(mu, nu, grid, max_atoms)
    if a.mass > 0 and b.mass > 0 and abs(a.mass - b.mass) > 1e-12:
        b = AtomSet(b.positions, b.weights * (a.mass / b.mass))
    d = w1_exact(a, b, max_atoms) if len(a) and len(b) else 0.0
    return (d, err) if return_error else d


def _unbalanced_cost(mu: AtomSet, nu: AtomSet) -> float:
    """Min over sub-couplings of transport cost plus unmatched mass (creation/destruction cost 1)."""
    ma, mb = mu.mass, nu.mass
    if len(mu) == 0 or len(nu) == 0:
        return ma + mb
    # one dummy sink absorbs destroyed mass, one dummy source supplies created mass
    a = np.concatenate([mu.weights, [mb]])
    b = np.concatenate([nu.weights, [ma]])
    M = np.empty((len(a), len(b)))
    M[:-1, :-1] = np.minimum(cdist(mu.positions, nu.positions), 2.0)
    M[:-1, -1] = 1.0
    M[-1, :-1] = 1.0
    M[-1, -1] = 0.0
    return _emd_cost(a, b, M)


def bounded_lipschitz(mu: AtomSet, nu: AtomSet, grid: int = 64, max_atoms: int = MAX_EXACT_ATOMS,
                      return_error: bool = False):
    """Flat (bounded-Lipschitz) distance; masses may differ."""
    a, b, err = _prepare(mu, nu, grid, max_atoms, extra=2)
    d = _unbalanced_cost(a, b)
    return (d, err) if return_error else d


def bounded_lipschitz_dual_lp(mu: AtomSet, nu: AtomSet) -> float:
    """The flat-metric supremum solved as an LP over values on the joint support.

    A function that is 1-Lipschitz and bounded by 1 on a finite set extends
    to the plane with the same bounds, so the finite LP is exact.  Quadratic
    in the number of atoms; meant for small cross-checks.
    """
    pts = np.vstack([mu.positions, nu.positions])
    c = np.concatenate([mu.weights, -nu.weights])
    m = len(pts)
    if m == 0:
        return 0.0
    D = cdist(pts, pts)
    iu, ju = np.where(~np.eye(m, dtype=bool))
    rows = np.repeat(np.arange(len(iu)), 2)
    cols = np.column_stack([iu, ju]).ravel()
    vals = np.tile([1.0, -1.0], len(iu))
    A = csr_matrix((vals, (rows, cols)), shape=(len(iu), m))
    res = optimize.linprog(-c, A_ub=A, b_ub=D[iu, ju], bounds=[(-1, 1)] * m, method="highs")
    if not res.success:
        raise RuntimeError(res.message)
    return float(-res.fun)


def distance_components(mu, nu, grid: int = 64, mass_tol: float = 1e-9) -> dict:
    """Per-compartment distances with the method used and the aggregation bound."""
    A3, B3 = _as_triple(mu), _as_triple(nu)
    values, methods, errors = [], [], []
    for a, b in zip(A3, B3):
        if abs(a.mass - b.mass) <= mass_tol:
            d, e = w1(a, b, grid=grid, return_error=True)
            methods.append("w1")
        else:
            d, e = bounded_lipschitz(a, b, grid=grid, return_error=True)
            methods.append("bl")
        values.append(d)
        errors.append(e)
    return {"values": np.array(values), "methods": methods, "aggregation_error": float(sum(errors))}


def w1_triple(mu, nu, grid: int = 64) -> float:
    """Sum over compartments of W1 (equal masses) or the flat distance (otherwise)."""
    return float(distance_components(mu, nu, grid)["values"].sum())


def bl_triple(mu, nu, grid: int = 64) -> float:
    """Sum over compartments of the flat distance."""
    return float(sum(bounded_lipschitz(a, b, grid=grid) for a, b in zip(_as_triple(mu), _as_triple(nu))))



# ---------------------------------------------------------------------------
# commutator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommutatorField:
    """Values of the commutator on an ``n x n`` grid of cell centres."""

    values: np.ndarray
    beta: float
    N: int

    @property
    def sup(self) -> float:
        return float(np.abs(self.values).max()) if self.values.size else 0.0


def commutator_field(pop: PopulationState, spec: Local, n: int = 64, backend: str | None = None) -> CommutatorField:
    """``(1/N) sum_{k in S} theta_N(x - x_k) rho^I(x_k) - rho^S(x) rho^I(x)`` on the grid."""
    if spec.kind != "local":
        raise ValueError("the commutator needs a local kernel")
    N = pop.N
    sus = pop.states == HealthState.S
    inf = pop.states == HealthState.I
    c = grid_centres(n)
    X, Y = np.meshgrid(c, c, indexing="ij")
    q = np.column_stack([X.ravel(), Y.ravel()])
    if not sus.any() or not inf.any():
        return CommutatorField(np.zeros((n, n)), spec.beta, N)
    xs, xi = pop.positions[sus], pop.positions[inf]
    rho_i_at_s = kernel_sum(xs, xi, np.full(len(xi), 1.0 / N), spec, N, backend)[:, 0]
    w = np.column_stack([rho_i_at_s / N, np.full(len(xs), 1.0 / N)])
    first, rho_s = kernel_sum(q, xs, w, spec, N, backend).T
    rho_i = kernel_sum(q, xi, np.full(len(xi), 1.0 / N), spec, N, backend)[:, 0]
    return CommutatorField((first - rho_s * rho_i).reshape(n, n), spec.beta, N)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def l2_distance(a: GridField, b: GridField) -> float:
    """``sqrt(sum_A int (a^A - b^A)^2)`` by the midpoint rule."""
    if a.n != b.n:
        raise ValueError("grids differ")
    return float(np.sqrt(((a.data - b.data) ** 2).sum() * a.h**2))


def slope_fit(points) -> tuple[float, float, float]:
    """Least-squares fit of ``log(value)`` against ``log(N)``: (slope, intercept, stderr)."""
    pts = np.asarray(list(points), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("need at least three (N, value) points")
    if np.any(pts <= 0):
        raise ValueError("N and values must be positive")
    res = stats.linregress(np.log(pts[:, 0]), np.log(pts[:, 1]))
    return float(res.slope), float(res.intercept), float(res.stderr)
