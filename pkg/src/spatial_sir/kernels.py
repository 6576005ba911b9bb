"""Interaction kernels for the two scaling regimes and the cell-list index.

Mean-field regime: ``tau_N(i, j) = (q / N) T(x_i, x_j)`` with ``T`` a bounded,
continuous, non-negative function on the unit square.

Local regime: ``tau_N(i, j) = (q / N) theta_N(x_i - x_j)`` where
``theta_N(x) = N**beta * theta(N**(beta / d) * x)`` and ``theta`` is the
normalized standard bump on the unit disc.  With ``d = 2`` the rescaled
kernel keeps unit mass.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .model import HealthState, ModelParams, PopulationState

__all__ = [
    "BUMP_NORMALIZATION",
    "BUMP_MEAN_RADIUS",
    "bump",
    "ConstantT",
    "GaussianT",
    "DotT",
    "T_KERNELS",
    "make_T",
    "MeanField",
    "Local",
    "kernel_from_dict",
    "eval_tau",
    "theta_N",
    "mollifier_mass",
    "SpatialIndex",
    "build_spatial_index",
    "cell_list",
    "cells_for_radius",
    "infection_pressure",
    "brute_force_pressure",
    "core_params",
]

# 1 / integral over the unit disc of exp(-1 / (1 - |x|^2)); see
# scripts/derive_bump_constant.py (mpmath, 40 digits).
BUMP_NORMALIZATION = 2.1435657757922366
# first absolute moment of the normalized bump, same script
BUMP_MEAN_RADIUS = 0.47275152142420446

# kernel codes understood by the compiled and fallback cores
K_CONST, K_GAUSS, K_BUMP, K_PYTHON = 0, 1, 2, -1


def bump(r) -> np.ndarray:
    """Normalized bump ``c0 exp(-1 / (1 - r^2))`` for ``r < 1``, zero outside."""
    r = np.asarray(r, dtype=float)
    r2 = r * r
    out = np.zeros_like(r2)
    inside = r2 < 1.0
    out[inside] = BUMP_NORMALIZATION * np.exp(-1.0 / (1.0 - r2[inside]))
    return out


# ---------------------------------------------------------------------------
# mean-field interaction functions T(x, y)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantT:
    value: float = 1.0
    name = "constant"
    translation_invariant = True

    def __post_init__(self):
        if not (self.value >= 0 and math.isfinite(self.value)):
            raise ValueError("constant T must be finite and non-negative")

    def __call__(self, x, y) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return np.full(x.shape[:-1], self.value)

    def profile_1d(self, d):
        return np.full(np.shape(d), math.sqrt(self.value))

    @property
    def sup(self) -> float:
        return self.value

    def to_dict(self) -> dict:
        return {"T": "constant", "value": self.value}


@dataclass(frozen=True)
class GaussianT:
    """``T(x, y) = exp(-|x - y|^2 / (2 sigma^2))``; separable in the two axes."""

    sigma: float = 0.2
    name = "gaussian"
    translation_invariant = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def __call__(self, x, y) -> np.ndarray:
        d = np.asarray(x, float) - np.asarray(y, float)
        return np.exp(-(d**2).sum(axis=-1) / (2 * self.sigma**2))

    def profile_1d(self, d):
        return np.exp(-np.asarray(d, float) ** 2 / (2 * self.sigma**2))

    @property
    def sup(self) -> float:
        return 1.0

    def to_dict(self) -> dict:
        return {"T": "gaussian", "sigma": self.sigma}


@dataclass(frozen=True)
class DotT:
    """``T(x, y) = 1 + x . y / 2``: bounded, positive, not translation invariant."""

    name = "dot"
    translation_invariant = False

    def __call__(self, x, y) -> np.ndarray:
        x, y = np.asarray(x, float), np.asarray(y, float)
        return 1.0 + 0.5 * (x * y).sum(axis=-1)

    @property
    def sup(self) -> float:
        return 2.0

    def to_dict(self) -> dict:
        return {"T": "dot"}


T_KERNELS = {"constant": ConstantT, "gaussian": GaussianT, "dot": DotT}


def make_T(name: str, **kw):
    try:
        cls = T_KERNELS[name]
    except KeyError:
        raise ValueError(f"unknown interaction function {name!r}; known: {sorted(T_KERNELS)}") from None
    return cls(**kw)


# ---------------------------------------------------------------------------
# regimes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MeanField:
    T: object = ConstantT()
    kind = "meanfield"

    def support_radius(self, N: int) -> float:
        return math.inf

    def to_dict(self) -> dict:
        return {"kind": "meanfield", **self.T.to_dict()}


@dataclass(frozen=True)
class Local:
    """Moderately interacting regime with exponent ``beta`` in (0, 1/3).

    ``exponent_divisor`` is the ``d`` of ``N**(beta / d)``; it defaults to the
    spatial dimension 2 and is exposed only for sensitivity checks.
    """

    beta: float = 0.25
    exponent_divisor: float = 2.0
    kind = "local"

    def __post_init__(self):
        if not 0 < self.beta < 1.0 / 3.0:
            raise ValueError(f"local regime needs 0 < beta < 1/3, got {self.beta}")
        if not self.exponent_divisor > 0:
            raise ValueError("exponent_divisor must be positive")

    def scale(self, N: int) -> float:
        """Argument dilation ``N**(beta / d)``."""
        return float(N) ** (self.beta / self.exponent_divisor)

    def amplitude(self, N: int) -> float:
        return float(N) ** self.beta

    def support_radius(self, N: int) -> float:
        return 1.0 / self.scale(N)

    def to_dict(self) -> dict:
        return {"kind": "local", "beta": self.beta, "exponent_divisor": self.exponent_divisor}


def kernel_from_dict(d: dict):
    kind = d.get("kind", "meanfield")
    if kind == "meanfield":
        name = d.get("T", "constant")
        kw = {}
        if name == "constant" and "value" in d:
            kw["value"] = float(d["value"])
        if name == "gaussian" and "sigma" in d:
            kw["sigma"] = float(d["sigma"])
        return MeanField(make_T(name, **kw))
    if kind == "local":
        return Local(beta=float(d["beta"]), exponent_divisor=float(d.get("exponent_divisor", 2.0)))
    raise ValueError(f"unknown kernel kind {kind!r}")


def theta_N(spec: Local, N: int, x) -> np.ndarray:
    """Rescaled mollifier ``N^beta theta(N^(beta/d) x)`` at displacements ``x`` (..., 2)."""
    r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    return spec.amplitude(N) * bump(spec.scale(N) * r)


def eval_tau(spec, params: ModelParams, N: int, x_i, x_j) -> np.ndarray:
    """Pairwise infection rate ``tau_N(i, j)``; broadcasts over leading axes."""
    x_i, x_j = np.asarray(x_i, float), np.asarray(x_j, float)
    if spec.kind == "meanfield":
        return params.q / N * spec.T(x_i, x_j)
    return params.q / N * theta_N(spec, N, x_i - x_j)


def mollifier_mass(spec: Local, N: int = 1, resolution: int = 400) -> float:
    """Integral of ``theta_N`` over the plane by the 2-D midpoint rule.

    The rule runs over ``resolution**2`` cells covering the support square.
    For a smooth compactly supported integrand it converges faster than
    any power of the cell size, so doubling ``resolution`` is a sharp check.
    """
    R = spec.support_radius(N)
    h = 2 * R / resolution
    c = -R + (np.arange(resolution) + 0.5) * h
    X, Y = np.meshgrid(c, c, indexing="ij")
    vals = theta_N(spec, N, np.stack([X, Y], axis=-1))
    return float(vals.sum() * h * h)


def core_params(spec, q: float, N: int):
    """Pack a kernel into ``(code, prefactor, shape, cutoff^2)`` for the cores.

    ``tau(d2)`` is ``prefactor`` (constant), ``prefactor * exp(-d2 * shape)``
    (Gaussian) or ``prefactor * exp(-1 / (1 - d2 * shape))`` for
    ``d2 * shape < 1`` (bump).  Returns code ``K_PYTHON`` for interaction
    functions only the fallback core can evaluate.
    """
    if spec.kind == "local":
        s = spec.scale(N)
        return K_BUMP, q / N * spec.amplitude(N) * BUMP_NORMALIZATION, s * s, spec.support_radius(N) ** 2
    T = spec.T
    if isinstance(T, ConstantT):
        return K_CONST, q / N * T.value, 0.0, math.inf
    if isinstance(T, GaussianT):
        return K_GAUSS, q / N, 1.0 / (2 * T.sigma**2), math.inf
    return K_PYTHON, q / N, 0.0, math.inf


# ---------------------------------------------------------------------------
# spatial index
# ---------------------------------------------------------------------------

MIN_CELL_SIDE = 1.0 / 64


@dataclass(frozen=True)
class SpatialIndex:
    """Uniform cell list over the unit square.

    ``cell_items[cell_start[c]:cell_start[c + 1]]`` lists the individuals in
    cell ``c = ix * n_cells + iy``.  The cell side is at least the kernel
    support radius, so every point within that radius of a query lies in the
    query's 3 x 3 block of cells.
    """

    n_cells: int
    radius: float
    cell_of: np.ndarray
    cell_start: np.ndarray
    cell_items: np.ndarray
    infected_per_cell: np.ndarray

    @property
    def side(self) -> float:
        return 1.0 / self.n_cells

    def cell_coords(self, point) -> tuple[int, int]:
        ix = int(math.floor(point[0] * self.n_cells))
        iy = int(math.floor(point[1] * self.n_cells))
        return ix, iy

    def block(self, point) -> np.ndarray:
        """Indices in the 3 x 3 block of cells around ``point``."""
        ix, iy = self.cell_coords(point)
        n = self.n_cells
        parts = []
        for cx in range(max(ix - 1, 0), min(ix + 2, n)):
            for cy in range(max(iy - 1, 0), min(iy + 2, n)):
                c = cx * n + cy
                parts.append(self.cell_items[self.cell_start[c]:self.cell_start[c + 1]])
        if not parts:
            return np.empty(0, dtype=np.int32)
        return np.concatenate(parts)

    def query(self, positions: np.ndarray, point, radius: float | None = None) -> np.ndarray:
        """Sorted indices within ``radius`` (default: support radius) of ``point``."""
        radius = self.radius if radius is None else radius
        if radius > self.side * (1 + 1e-12) and self.n_cells > 1:
            raise ValueError("query radius exceeds the cell side")
        cand = self.block(point)
        d = np.linalg.norm(positions[cand] - np.asarray(point, float), axis=1)
        return np.sort(cand[d <= radius])


def _cell_ids(positions: np.ndarray, n: int) -> np.ndarray:
    ij = np.floor(positions * n).astype(np.int64)
    np.clip(ij, 0, n - 1, out=ij)
    return (ij[:, 0] * n + ij[:, 1]).astype(np.int32)


def cell_list(positions: np.ndarray, n: int):
    """CSR cell list ``(cell_of, cell_start, cell_items)``; stable in index order."""
    cell_of = _cell_ids(positions, n) if len(positions) else np.empty(0, dtype=np.int32)
    order = np.argsort(cell_of, kind="stable").astype(np.int32)
    counts = np.bincount(cell_of, minlength=n * n)
    start = np.zeros(n * n + 1, dtype=np.int32)
    np.cumsum(counts, out=start[1:])
    return cell_of, start, order


def cells_for_radius(radius: float) -> int:
    if not math.isfinite(radius):
        return 1
    side = max(radius, MIN_CELL_SIDE)
    if side > 1.0:
        warnings.warn(f"support radius {radius:.3g} exceeds the domain; using a single cell", stacklevel=3)
        return 1
    return max(1, int(math.floor(1.0 / side)))


def build_spatial_index(pop: PopulationState, spec, N: int | None = None) -> SpatialIndex:
    """Cell list for the local regime; construction is O(N)."""
    if spec.kind != "local":
        raise ValueError("the mean-field regime does not use a spatial index")
    N = pop.N if N is None else N
    radius = spec.support_radius(max(N, 1))
    n = cells_for_radius(radius)
    cell_of, start, items = cell_list(pop.positions, n)
    infected = np.bincount(cell_of[pop.states == HealthState.I], minlength=n * n) if pop.N else np.zeros(n * n, int)
    return SpatialIndex(n, radius, cell_of, start, items, infected)


def infection_pressure(pop: PopulationState, index: SpatialIndex | None, spec, params: ModelParams, i: int) -> float:
    """Total infection rate on susceptible ``i``.

    In the local regime only the 3 x 3 cell block around ``x_i`` is scanned.
    """
    if pop.states[i] != HealthState.S:
        raise ValueError(f"individual {i} is not susceptible")
    if spec.kind == "local":
        if index is None:
            raise ValueError("local regime needs a spatial index")
        cand = index.block(pop.positions[i])
    else:
        cand = np.arange(pop.N)
    cand = cand[pop.states[cand] == HealthState.I]
    if len(cand) == 0:
        return 0.0
    return float(eval_tau(spec, params, pop.N, pop.positions[i], pop.positions[cand]).sum())


def brute_force_pressure(pop: PopulationState, spec, params: ModelParams) -> np.ndarray:
    """O(N^2) recomputation of every susceptible's pressure (zero elsewhere)."""
    lam = np.zeros(pop.N)
    sus = np.flatnonzero(pop.states == HealthState.S)
    inf = np.flatnonzero(pop.states == HealthState.I)
    if len(sus) == 0 or len(inf) == 0:
        return lam
    for chunk in np.array_split(sus, max(1, len(sus) * len(inf) // 2_000_000 + 1)):
        tau = eval_tau(spec, params, pop.N, pop.positions[chunk][:, None, :], pop.positions[inf][None, :, :])
        lam[chunk] = tau.sum(axis=1)
    return lam
