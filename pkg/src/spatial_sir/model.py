"""Domain types shared by every other module: health states, parameters,
initial-condition families, population state and seeded sampling.

The spatial domain is the unit square ``[0, 1]^2``.  Initial conditions are
closed-form: a spatial density (uniform, truncated Gaussian or a mixture of
those) times position-dependent compartment probabilities, so every
component is smooth by construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "HealthState",
    "ModelParams",
    "Uniform",
    "TruncatedGaussian",
    "Plateau",
    "Mixture",
    "CompartmentProfile",
    "InitialDistribution",
    "PopulationState",
    "SamplingError",
    "sample_initial_population",
    "seed_sequence",
    "make_rng",
    "density_from_dict",
]

DOMAIN_SIDE = 1.0


class HealthState(IntEnum):
    """Compartments, ordered S < I < R for deterministic serialization."""

    S = 0
    I = 1  # noqa: E741
    R = 2


class SamplingError(RuntimeError):
    """Rejection sampling ran past its proposal budget."""


@dataclass(frozen=True)
class ModelParams:
    """Rates and horizon of the particle system.

    ``p`` is the recovery rate and ``q`` the contact-rate scale, both per unit
    time.  Zero rates are accepted: ``p = q = 0`` freezes the chain, which is
    how pure sampling error is isolated in convergence studies.
    """

    p: float
    q: float
    horizon: float

    def __post_init__(self):
        for name in ("p", "q", "horizon"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"{name} must be finite, got {v!r}")
        if self.p < 0 or self.q < 0:
            raise ValueError(f"rates must be non-negative (p={self.p}, q={self.q})")
        if self.horizon <= 0:
            raise ValueError(f"horizon must be positive, got {self.horizon}")


# ---------------------------------------------------------------------------
# spatial densities on the unit square
# ---------------------------------------------------------------------------

def _as_points(xy) -> np.ndarray:
    pts = np.asarray(xy, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    return pts


@dataclass(frozen=True)
class Uniform:
    kind = "uniform"

    def pdf(self, xy) -> np.ndarray:
        return np.ones(len(_as_points(xy)))

    def upper_bound(self) -> float:
        return 1.0

    def cell_masses(self, n: int) -> np.ndarray:
        return np.full((n, n), 1.0 / (n * n))

    def to_dict(self) -> dict:
        return {"spatial": "uniform"}


@dataclass(frozen=True)
class TruncatedGaussian:
    """Isotropic Gaussian restricted to the unit square and renormalized."""

    center: tuple[float, float] = (0.5, 0.5)
    sigma: float = 0.15
    kind = "gaussian"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def _axis_mass(self, lo, hi, c):
        s = self.sigma * math.sqrt(2.0)
        return self.sigma * math.sqrt(math.pi / 2.0) * (erf((hi - c) / s) - erf((lo - c) / s))

    @property
    def norm(self) -> float:
        cx, cy = self.center
        return self._axis_mass(0.0, 1.0, cx) * self._axis_mass(0.0, 1.0, cy)

    def pdf(self, xy) -> np.ndarray:
        pts = _as_points(xy)
        d2 = (pts[:, 0] - self.center[0]) ** 2 + (pts[:, 1] - self.center[1]) ** 2
        return np.exp(-d2 / (2 * self.sigma**2)) / self.norm

    def upper_bound(self) -> float:
        peak = np.clip(self.center, 0.0, 1.0)
        return float(self.pdf(peak)[0])

    def cell_masses(self, n: int) -> np.ndarray:
        edges = np.linspace(0.0, 1.0, n + 1)
        mx = self._axis_mass(edges[:-1], edges[1:], self.center[0])
        my = self._axis_mass(edges[:-1], edges[1:], self.center[1])
        return np.outer(mx, my) / self.norm

    def to_dict(self) -> dict:
        return {"spatial": "gaussian", "center": list(self.center), "sigma": self.sigma}


def _smootherstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


@dataclass(frozen=True)
class Plateau:
    """Flat interior with a C^2 taper to zero over ``margin`` at every edge.

    Extended by zero outside the unit square the density is C^2 on the
    plane.  The one-dimensional profile is the quintic smoothstep of
    ``min(u, 1 - u) / margin``.
    """

    margin: float = 0.2
    kind = "plateau"

    def __post_init__(self):
        if not 0 < self.margin <= 0.5:
            raise ValueError("margin must lie in (0, 1/2]")

    def _profile(self, u):
        return _smootherstep(np.minimum(u, 1.0 - u) / self.margin)

    def _cdf(self, u):
        m = self.margin
        u = np.clip(np.asarray(u, float), 0.0, 1.0)

        def left(v):
            t = np.clip(v / m, 0.0, 1.0)
            ramp = m * t**4 * (t * t - 3.0 * t + 2.5)
            return np.where(v <= m, ramp, m / 2 + (v - m))

        return np.where(u <= 0.5, left(u), (1.0 - m) - left(1.0 - u))

    @property
    def norm(self) -> float:
        return (1.0 - self.margin) ** 2

    def pdf(self, xy) -> np.ndarray:
        pts = _as_points(xy)
        return self._profile(pts[:, 0]) * self._profile(pts[:, 1]) / self.norm

    def upper_bound(self) -> float:
        return 1.0 / self.norm

    def cell_masses(self, n: int) -> np.ndarray:
        c = self._cdf(np.linspace(0.0, 1.0, n + 1))
        m1 = np.diff(c)
        return np.outer(m1, m1) / self.norm

    def to_dict(self) -> dict:
        return {"spatial": "plateau", "margin": self.margin}


@dataclass(frozen=True)
class Mixture:
    components: tuple = ()
    weights: tuple = ()
    kind = "mixture"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if len(self.components) == 0 or len(w) != len(self.components):
            raise ValueError("mixture needs one weight per component")
        if np.any(w < 0) or w.sum() <= 0:
            raise ValueError("mixture weights must be non-negative with positive sum")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", tuple(float(x) for x in w / w.sum()))

    def pdf(self, xy) -> np.ndarray:
        return sum(w * c.pdf(xy) for w, c in zip(self.weights, self.components))

    def upper_bound(self) -> float:
        return sum(w * c.upper_bound() for w, c in zip(self.weights, self.components))

    def cell_masses(self, n: int) -> np.ndarray:
        return sum(w * c.cell_masses(n) for w, c in zip(self.weights, self.components))

    def to_dict(self) -> dict:
        return {
            "spatial": "mixture",
            "weights": list(self.weights),
            "components": [c.to_dict() for c in self.components],
        }


def density_from_dict(d: dict):
    kind = d.get("spatial", "uniform")
    if kind == "uniform":
        return Uniform()
    if kind == "gaussian":
        return TruncatedGaussian(center=tuple(d.get("center", (0.5, 0.5))), sigma=float(d.get("sigma", 0.15)))
    if kind == "plateau":
        return Plateau(margin=float(d.get("margin", 0.2)))
    if kind == "mixture":
        return Mixture(tuple(density_from_dict(c) for c in d["components"]), tuple(d["weights"]))
    raise ValueError(f"unknown spatial density {kind!r}")


@dataclass(frozen=True)
class CompartmentProfile:
    """Position-dependent state probabilities.

    P(I | x) = infected_base + infected_amplitude * exp(-|x - c|^2 / (2 w^2)),
    P(R | x) = removed_base, P(S | x) = 1 - P(I | x) - P(R | x).
    """

    infected_base: float = 0.1
    infected_amplitude: float = 0.0
    infected_center: tuple[float, float] = (0.5, 0.5)
    infected_width: float = 0.1
    removed_base: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "infected_center", tuple(float(c) for c in self.infected_center))
        hi_i = self.infected_base + max(self.infected_amplitude, 0.0)
        lo_i = self.infected_base + min(self.infected_amplitude, 0.0)
        if self.infected_width <= 0:
            raise ValueError("infected_width must be positive")
        if lo_i < 0 or self.removed_base < 0 or hi_i + self.removed_base > 1 + 1e-15:
            raise ValueError("compartment probabilities must lie in [0, 1] everywhere")

    def probabilities(self, xy) -> np.ndarray:
        pts = _as_points(xy)
        d2 = (pts[:, 0] - self.infected_center[0]) ** 2 + (pts[:, 1] - self.infected_center[1]) ** 2
        pi = self.infected_base + self.infected_amplitude * np.exp(-d2 / (2 * self.infected_width**2))
        pr = np.full_like(pi, self.removed_base)
        ps = 1.0 - pi - pr
        return np.stack([ps, pi, pr], axis=1)

    def to_dict(self) -> dict:
        return {
            "infected_base": self.infected_base,
            "infected_amplitude": self.infected_amplitude,
            "infected_center": list(self.infected_center),
            "infected_width": self.infected_width,
            "removed_base": self.removed_base,
        }


@dataclass(frozen=True)
class InitialDistribution:
    """Law of one individual: a position density times state probabilities.

    Component ``A`` has density ``f0^A(x) = density(x) * P(A | x)``; the
    three components integrate to one in total.
    """

    spatial: object = field(default_factory=Uniform)
    profile: CompartmentProfile = field(default_factory=CompartmentProfile)

    def densities(self, xy) -> np.ndarray:
        """Per-compartment densities at points, shape ``(M, 3)``."""
        return self.spatial.pdf(xy)[:, None] * self.profile.probabilities(xy)

    def point_field(self, n: int) -> np.ndarray:
        """Densities sampled at the centres of an ``n x n`` grid, shape ``(3, n, n)``."""
        c = (np.arange(n) + 0.5) / n
        X, Y = np.meshgrid(c, c, indexing="ij")
        vals = self.densities(np.column_stack([X.ravel(), Y.ravel()]))
        return vals.T.reshape(3, n, n)

    def cell_average_field(self, n: int, order: int = 4) -> np.ndarray:
        """Cell averages of the densities by tensor Gauss-Legendre, shape ``(3, n, n)``."""
        g, w = np.polynomial.legendre.leggauss(order)
        g = (g + 1) / 2
        w = w / 2
        h = 1.0 / n
        out = np.zeros((3, n, n))
        base = np.arange(n) * h
        for gx, wx in zip(g, w):
            for gy, wy in zip(g, w):
                X, Y = np.meshgrid(base + gx * h, base + gy * h, indexing="ij")
                vals = self.densities(np.column_stack([X.ravel(), Y.ravel()]))
                out += wx * wy * vals.T.reshape(3, n, n)
        return out

    def total_mass(self, n: int = 64) -> float:
        return float(self.cell_average_field(n, order=8).sum() / n**2)

    def to_dict(self) -> dict:
        return {**self.spatial.to_dict(), **self.profile.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "InitialDistribution":
        prof_keys = {"infected_base", "infected_amplitude", "infected_center", "infected_width", "removed_base"}
        prof = CompartmentProfile(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in prof_keys})
        return cls(spatial=density_from_dict(d), profile=prof)


# ---------------------------------------------------------------------------
# population state
# ---------------------------------------------------------------------------

@dataclass
class PopulationState:
    """Positions, health states and per-individual infection pressure.

    ``pressure[i]`` is the total infection rate felt by susceptible ``i``;
    entries for non-susceptible individuals are kept at zero.
    """

    positions: np.ndarray
    states: np.ndarray
    pressure: np.ndarray | None = None
    clock: float = 0.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.states = np.ascontiguousarray(self.states, dtype=np.int8)
        if len(self.states) != len(self.positions):
            raise ValueError("positions and states differ in length")
        if self.pressure is not None:
            self.pressure = np.ascontiguousarray(self.pressure, dtype=np.float64)

    @property
    def N(self) -> int:
        return len(self.states)

    @property
    def counts(self) -> tuple[int, int, int]:
        c = np.bincount(self.states, minlength=3)
        return int(c[0]), int(c[1]), int(c[2])

    def copy(self) -> "PopulationState":
        return replace(
            self,
            positions=self.positions.copy(),
            states=self.states.copy(),
            pressure=None if self.pressure is None else self.pressure.copy(),
        )


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

def seed_sequence(master: int | np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Stream for ``key`` under a 64-bit master seed.

    The stream is ``SeedSequence(master, spawn_key=key)``: numpy hashes the
    pair into the generator state, so the stream of replica ``r`` can be
    rebuilt on its own without replaying replicas ``0..r-1``.
    """
    if isinstance(master, np.random.SeedSequence):
        return np.random.SeedSequence(master.entropy, spawn_key=tuple(master.spawn_key) + tuple(int(k) for k in key))
    master = int(master)
    if not 0 <= master < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {master}")
    return np.random.SeedSequence(master, spawn_key=tuple(int(k) for k in key))


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = seed_sequence(seed)
    return np.random.Generator(np.random.PCG64(seed))


def sample_initial_population(
    dist: InitialDistribution,
    N: int,
    seed,
    *,
    max_proposals_per_sample: int = 1000,
) -> PopulationState:
    """Draw ``N`` i.i.d. individuals from ``dist``.

    Positions come from rejection sampling against uniform proposals on the
    unit square with envelope ``dist.spatial.upper_bound()``; the state is
    then drawn from the compartment probabilities at the accepted position.
    The result is a pure function of ``(dist, N, seed)``.

    Raises
    ------
    ValueError
        If ``N < 1``.
    SamplingError
        If more than ``max_proposals_per_sample * N`` proposals are needed,
        which signals an envelope below the true density maximum.
    """
    N = int(N)
    if N < 1:
        raise ValueError(f"population size must be at least 1, got {N}")
    rng = make_rng(seed)
    bound = dist.spatial.upper_bound()
    if not (bound > 0 and math.isfinite(bound)):
        raise SamplingError(f"invalid density bound {bound}")
    accepted = []
    n_acc = 0
    used = 0
    budget = max_proposals_per_sample * N
    batch = max(1024, N)
    while n_acc < N:
        if used >= budget:
            raise SamplingError(f"rejection sampling exceeded {budget} proposals for N={N}")
        m = min(batch, budget - used)
        prop = rng.random((m, 2))
        u = rng.random(m)
        dens = dist.spatial.pdf(prop)
        if np.any(dens > bound * (1 + 1e-12)):
            raise SamplingError("density exceeds its declared upper bound")
        keep = prop[u * bound < dens]
        accepted.append(keep)
        n_acc += len(keep)
        used += m
    pos = np.concatenate(accepted)[:N]
    probs = dist.profile.probabilities(pos)
    u = rng.random(N)
    cum = np.cumsum(probs, axis=1)
    states = (u[:, None] >= cum[:, :2]).sum(axis=1).astype(np.int8)
    return PopulationState(positions=pos, states=states)


def counts_to_fractions(counts: Sequence[int]) -> np.ndarray:
    c = np.asarray(counts, dtype=float)
    return c / c.sum()
