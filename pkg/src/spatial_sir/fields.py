"""Deterministic limit systems on a regular grid over the unit square.

Non-local system (mean-field limit)::

    dS = -q (Q_T f^I) f^S,   dI = q (Q_T f^I) f^S - p f^I,   dR = p f^I

with ``Q_T`` the midpoint quadrature of ``x -> int T(x, y) f^I(y) dy`` on the
same grid.  Local system: the same equations with ``Q_T f^I`` replaced by
``f^I`` itself, so every cell evolves on its own.

Explicit RK4 keeps all components non-negative as long as
``dt * (q * max(Q_T f^I) + p)`` stays well below 2; the integrator checks
and raises :class:`NumericalError` otherwise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .kernels import ConstantT, DotT, GaussianT

__all__ = [
    "NumericalError",
    "GridField",
    "grid_centres",
    "field_from_initial",
    "nonlocal_quadrature",
    "make_nonlocal_rhs",
    "make_local_rhs",
    "nonlocal_rhs",
    "local_rhs",
    "rk4_integrate",
    "classical_sir",
    "local_conserved_quantity",
    "weak_residual",
    "NEGATIVITY_TOL",
]

NEGATIVITY_TOL = 1e-9


class NumericalError(RuntimeError):
    """Negativity beyond tolerance or a non-finite value during integration."""


def grid_centres(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


@dataclass
class GridField:
    """Densities ``(f^S, f^I, f^R)`` at the centres of an ``n x n`` grid.

    ``data[A, ix, iy]`` is the density of compartment ``A`` in the cell with
    centre ``((ix + 1/2) h, (iy + 1/2) h)``.
    """

    data: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3 or self.data.shape[0] != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"field data must have shape (3, n, n), got {self.data.shape}")

    @property
    def n(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def S(self):
        return self.data[0]

    @property
    def I(self):  # noqa: E743
        return self.data[1]

    @property
    def R(self):
        return self.data[2]

    def centres(self) -> np.ndarray:
        """Cell centres, shape (n*n, 2), in ``ix``-major order."""
        c = grid_centres(self.n)
        X, Y = np.meshgrid(c, c, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()])

    def cell_masses(self) -> np.ndarray:
        return self.data * self.h**2

    def totals(self) -> np.ndarray:
        """Domain integrals of the three densities."""
        return self.data.sum(axis=(1, 2)) * self.h**2

    def cell_sum(self) -> np.ndarray:
        return self.data.sum(axis=0)

    def copy(self) -> "GridField":
        return GridField(self.data.copy(), self.t)

    def validate(self, tol: float = 1e-12) -> None:
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("field contains non-finite values")
        if self.data.min() < -tol:
            raise NumericalError(f"negative density {self.data.min():.3e}")

    # -- export -------------------------------------------------------------
    def write_csv(self, path) -> None:
        """Columns ``x, y, fS, fI, fR``."""
        xy = self.centres()
        flat = self.data.reshape(3, -1).T
        with open(path, "w") as fh:
            fh.write("x,y,fS,fI,fR\n")
            for (x, y), (s, i, r) in zip(xy.tolist(), flat.tolist()):
                fh.write(f"{x!r},{y!r},{s!r},{i!r},{r!r}\n")

    def write_raw(self, path) -> None:
        """One text header line ``n h t`` then the (3, n, n) block as little-endian float64."""
        with open(path, "wb") as fh:
            fh.write(f"{self.n} {float(self.h)!r} {float(self.t)!r}\n".encode())
            fh.write(self.data.astype("<f8").tobytes())

    @classmethod
    def read_raw(cls, path) -> "GridField":
        with open(path, "rb") as fh:
            header = fh.readline().decode().split()
            n, t = int(header[0]), float(header[2])
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != 3 * n * n:
            raise ValueError("raw field block has the wrong size")
        return cls(data.reshape(3, n, n).astype(float), t)


def field_from_initial(dist, n: int = 64, mode: str = "cell_average") -> GridField:
    """Grid field of an initial distribution: cell averages or centre values."""
    if mode == "cell_average":
        return GridField(dist.cell_average_field(n))
    if mode == "point":
        return GridField(dist.point_field(n))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# right-hand sides
# ---------------------------------------------------------------------------

def nonlocal_quadrature(T, fI: np.ndarray) -> np.ndarray:
    """Midpoint rule for ``x -> int T(x, y) f^I(y) dy`` at every cell centre."""
    n = fI.shape[0]
    h2 = 1.0 / n**2
    c = grid_centres(n)
    if isinstance(T, ConstantT):
        return np.full_like(fI, T.value * fI.sum() * h2)
    if isinstance(T, GaussianT):
        G = T.profile_1d(c[:, None] - c[None, :])
        return G @ fI @ G.T * h2
    if isinstance(T, DotT):
        X, Y = np.meshgrid(c, c, indexing="ij")
        m0 = fI.sum() * h2
        mx = (X * fI).sum() * h2
        my = (Y * fI).sum() * h2
        return m0 + 0.5 * (X * mx + Y * my)
    # generic bounded T: dense evaluation in row blocks
    X, Y = np.meshgrid(c, c, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])
    w = fI.ravel() * h2
    out = np.empty(n * n)
    block = max(1, 2_000_000 // (n * n))
    for s in range(0, n * n, block):
        out[s:s + block] = T(pts[s:s + block, None, :], pts[None, :, :]) @ w
    return out.reshape(n, n)


def _sir_rhs(data, force, p, q):
    out = np.empty_like(data)
    infection = q * force * data[0]
    recovery = p * data[1]
    out[0] = -infection
    out[1] = infection - recovery
    out[2] = recovery
    return out


def make_nonlocal_rhs(T, p: float, q: float) -> Callable[[np.ndarray, float], np.ndarray]:
    """``rhs(data, t)`` for the non-local system with kernel ``T``."""
    cache = {}

    def rhs(data, t=0.0):
        n = data.shape[1]
        if isinstance(T, GaussianT):
            G = cache.get(n)
            if G is None:
                c = grid_centres(n)
                G = cache[n] = T.profile_1d(c[:, None] - c[None, :])
            force = G @ data[1] @ G.T / n**2
        else:
            force = nonlocal_quadrature(T, data[1])
        return _sir_rhs(data, force, p, q)

    rhs.kind = "nonlocal"
    return rhs


def make_local_rhs(p: float, q: float) -> Callable[[np.ndarray, float], np.ndarray]:
    def rhs(data, t=0.0):
        return _sir_rhs(data, data[1], p, q)

    rhs.kind = "local"
    return rhs


def nonlocal_rhs(field: GridField, T, p: float, q: float) -> GridField:
    """Time derivative of the non-local system at ``field``."""
    return GridField(make_nonlocal_rhs(T, p, q)(field.data), field.t)


def local_rhs(field: GridField, p: float, q: float) -> GridField:
    """Time derivative of the pointwise SIR field at ``field``."""
    return GridField(_sir_rhs(field.data, field.data[1], p, q), field.t)


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def _check(data, t, tol=NEGATIVITY_TOL):
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value at t={t:.6g}")
    lo = data.min()
    if lo < -tol:
        raise NumericalError(f"negative density {lo:.3e} at t={t:.6g}; reduce dt")


def rk4_integrate(field0: GridField, rhs, dt: float, n_steps: int, save_every: int = 1,
                  save_times: Sequence[float] | None = None) -> list[GridField]:
    """Classical fixed-step RK4.

    Parameters
    ----------
    rhs : callable
        ``rhs(data, t) -> data`` as built by :func:`make_nonlocal_rhs` or
        :func:`make_local_rhs`.
    save_every : int
        Keep every ``save_every``-th step (the first and last are always kept).
    save_times : sequence of float, optional
        Keep the steps closest to these times instead.

    Returns
    -------
    list of GridField
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    y = field0.data.copy()
    t0 = field0.t
    _check(y, t0)
    keep = None
    if save_times is not None:
        keep = {int(round((s - t0) / dt)) for s in save_times}
    out = [GridField(y.copy(), t0)]
    for k in range(1, n_steps + 1):
        t = t0 + (k - 1) * dt
        k1 = rhs(y, t)
        k2 = rhs(y + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(y + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(y + dt * k3, t + dt)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check(y, t0 + k * dt)
        if (keep is not None and k in keep) or (keep is None and k % save_every == 0) or k == n_steps:
            if out[-1].t != t0 + k * dt:
                out.append(GridField(y.copy(), t0 + k * dt))
    return out


def classical_sir(state0, beta_c: float, gamma: float, dt: float, n_steps: int) -> np.ndarray:
    """RK4 trajectory of ``S' = -b S I, I' = b S I - g I, R' = g I``; shape (n_steps + 1, 3)."""
    y = np.asarray(state0, dtype=float).copy()
    if y.shape != (3,) or np.any(y < 0):
        raise ValueError("state0 must be three non-negative fractions")

    def f(v):
        inf = beta_c * v[0] * v[1]
        rec = gamma * v[1]
        return np.array([-inf, inf - rec, rec])

    out = np.empty((n_steps + 1, 3))
    out[0] = y
    for k in range(1, n_steps + 1):
        k1 = f(y)
        k2 = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2)
        k4 = f(y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check(y, k * dt)
        out[k] = y
    return out


def local_conserved_quantity(field: GridField, p: float, q: float, floor: float = 1e-12) -> np.ndarray:
    """``(f^S + f^I) - (p / q) ln f^S`` per cell; NaN where ``f^S <= floor``."""
    S, I = field.data[0], field.data[1]
    out = np.full(S.shape, np.nan)
    ok = S > floor
    out[ok] = S[ok] + I[ok] - (p / q) * np.log(S[ok])
    return out


# ---------------------------------------------------------------------------
# weak formulation
# ---------------------------------------------------------------------------

def weak_residual(traj, phi, T, p: float, q: float) -> float:
    """Residual of the weak identity of the non-local system at the final time.

    For a list of :class:`GridField` the measures are cell-mass atoms and the
    time integral uses the trapezoid rule over the stored times.  For an
    ``engine.Trajectory`` in the mean-field regime with the same ``T`` the
    drift is piecewise constant and integrated exactly; the residual is then
    ``|M_T|`` of the corresponding martingale.
    """
    from .engine import Trajectory, martingale_path

    if isinstance(traj, Trajectory):
        if traj.spec.kind != "meanfield" or traj.spec.T != T:
            raise ValueError("particle residual needs a mean-field trajectory with the same T")
        if traj.params.p != p or traj.params.q != q:
            raise ValueError("parameters differ from the trajectory's")
        t_end = float(traj.snapshot_times[-1]) if len(traj.snapshot_times) else float(traj.params.horizon)
        diag = martingale_path(traj, phi, times=[0.0, t_end])
        return float(abs(diag.martingale[-1, 0]))
    fields = list(traj)
    if len(fields) < 2:
        raise ValueError("need at least two time points")
    n = fields[0].n
    h2 = 1.0 / n**2
    vals = phi.values(fields[0].centres()).T.reshape(3, n, n)
    a = vals[1] - vals[0]
    b = vals[2] - vals[1]
    pair = np.array([(f.data * vals).sum() * h2 for f in fields])
    integrand = np.array([
        (q * (nonlocal_quadrature(T, f.data[1]) * f.data[0] * a).sum() + p * (f.data[1] * b).sum()) * h2
        for f in fields
    ])
    ts = np.array([f.t for f in fields])
    integral = float(np.sum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(ts)))
    return float(abs(pair[-1] - pair[0] - integral))
