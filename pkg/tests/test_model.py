import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from spatial_sir.kernels import MeanField, ConstantT, brute_force_pressure
from spatial_sir.model import (
    CompartmentProfile,
    HealthState,
    InitialDistribution,
    Mixture,
    ModelParams,
    Plateau,
    SamplingError,
    TruncatedGaussian,
    Uniform,
    counts_to_fractions,
    density_from_dict,
    make_rng,
    sample_initial_population,
    seed_sequence,
)


def test_health_states_are_ordered_triple():
    assert [int(s) for s in HealthState] == [0, 1, 2]
    assert HealthState.S < HealthState.I < HealthState.R


@pytest.mark.parametrize("kw", [dict(p=-1.0, q=1.0, horizon=1.0), dict(p=1.0, q=-0.1, horizon=1.0),
                                dict(p=1.0, q=1.0, horizon=0.0), dict(p=float("nan"), q=1.0, horizon=1.0)])
def test_model_params_rejects_invalid(kw):
    with pytest.raises(ValueError):
        ModelParams(**kw)


def test_model_params_accepts_frozen_chain():
    assert ModelParams(0.0, 0.0, 1.0).q == 0.0


def test_all_susceptible_population_has_zero_pressure():
    dist = InitialDistribution(Uniform(), CompartmentProfile(infected_base=0.0))
    pop = sample_initial_population(dist, 100, 3)
    assert pop.counts == (100, 0, 0)
    lam = brute_force_pressure(pop, MeanField(ConstantT()), ModelParams(1.0, 1.0, 1.0))
    assert np.all(lam == 0)


def test_all_infected_population():
    dist = InitialDistribution(Uniform(), CompartmentProfile(infected_base=1.0))
    pop = sample_initial_population(dist, 50, 3)
    assert pop.counts == (0, 50, 0)


def test_infected_fraction_binomial():
    dist = InitialDistribution(Uniform(), CompartmentProfile(infected_base=0.1))
    N, reps = 10_000, 200
    tol = 3 * np.sqrt(0.09 / N)
    hits = 0
    for r in range(reps):
        pop = sample_initial_population(dist, N, seed_sequence(99, r))
        hits += abs(pop.counts[1] / N - 0.1) <= tol
    assert hits >= 0.99 * reps


def test_sampling_is_pure_function_of_seed():
    dist = InitialDistribution(TruncatedGaussian((0.3, 0.6), 0.2), CompartmentProfile(0.2, 0.3, (0.4, 0.4), 0.1, 0.05))
    a = sample_initial_population(dist, 500, 17)
    b = sample_initial_population(dist, 500, 17)
    c = sample_initial_population(dist, 500, 18)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.states, b.states)
    assert not np.array_equal(a.positions, c.positions)


@pytest.mark.parametrize("density", [Uniform(), TruncatedGaussian((0.4, 0.55), 0.2), Plateau(0.25),
                                     Mixture((Uniform(), TruncatedGaussian((0.7, 0.3), 0.1)), (0.6, 0.4))])
def test_histogram_matches_cell_masses(density):
    N, n = 100_000, 32
    pop = sample_initial_population(InitialDistribution(density), N, 5)
    hist, _, _ = np.histogram2d(pop.positions[:, 0], pop.positions[:, 1], bins=n, range=[[0, 1], [0, 1]])
    masses = density.cell_masses(n)
    assert masses.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.abs(hist / N - masses).max() < 5 * np.sqrt(masses.max() / N)


@pytest.mark.parametrize("density", [Uniform(), TruncatedGaussian((0.2, 0.5), 0.3), Plateau(0.3), Plateau(0.5)])
def test_density_integrates_to_one(density):
    val, _ = integrate.dblquad(lambda y, x: density.pdf(np.array([x, y]))[0], 0, 1, 0, 1, epsabs=1e-11)
    assert val == pytest.approx(1.0, abs=1e-8)


def test_plateau_cell_masses_match_quadrature():
    d = Plateau(0.3)
    n = 5
    masses = d.cell_masses(n)
    e = np.linspace(0, 1, n + 1)
    for ix, iy in [(0, 0), (0, 2), (1, 3), (2, 2)]:
        ref, _ = integrate.dblquad(lambda y, x: d.pdf(np.array([x, y]))[0], e[ix], e[ix + 1], e[iy], e[iy + 1],
                                   epsabs=1e-13)
        assert masses[ix, iy] == pytest.approx(ref, abs=1e-11)


def test_plateau_vanishes_at_boundary_with_zero_slope():
    d = Plateau(0.2)
    edge = d.pdf(np.array([[0.0, 0.5], [0.5, 1.0]]))
    assert np.all(edge == 0)
    # C^2 taper: leading term 10 (u / margin)^3 of the quintic smoothstep
    u = 1e-4
    leading = 10 * (u / 0.2) ** 3 / (1 - 0.2) ** 2
    assert d.pdf(np.array([u, 0.5]))[0] == pytest.approx(leading, rel=1e-2)


def test_initial_distribution_total_mass():
    dist = InitialDistribution(TruncatedGaussian((0.5, 0.5), 0.15), CompartmentProfile(0.05, 0.2, (0.5, 0.5), 0.2, 0.1))
    assert dist.total_mass() == pytest.approx(1.0, abs=1e-8)


def test_sampling_errors():
    with pytest.raises(ValueError):
        sample_initial_population(InitialDistribution(), 0, 1)

    class Lying(Uniform):
        def upper_bound(self):
            return 0.5

    with pytest.raises(SamplingError):
        sample_initial_population(InitialDistribution(Lying()), 10, 1)


def test_profile_rejects_probabilities_outside_unit_interval():
    with pytest.raises(ValueError):
        CompartmentProfile(infected_base=0.8, removed_base=0.3)
    with pytest.raises(ValueError):
        CompartmentProfile(infected_base=0.1, infected_amplitude=-0.2)


def test_density_round_trip():
    for d in [Uniform(), TruncatedGaussian((0.1, 0.2), 0.3), Plateau(0.15),
              Mixture((Uniform(), Plateau(0.2)), (1.0, 3.0))]:
        assert density_from_dict(d.to_dict()) == d
    dist = InitialDistribution(Plateau(0.2), CompartmentProfile(0.1, 0.1, (0.2, 0.3), 0.05, 0.02))
    assert InitialDistribution.from_dict(dist.to_dict()) == dist


def test_seed_streams_are_independent_of_order():
    a = make_rng(seed_sequence(7, 100, 3)).random(4)
    b = make_rng(seed_sequence(7, 100, 3)).random(4)
    c = make_rng(seed_sequence(7, 100, 4)).random(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    with pytest.raises(ValueError):
        seed_sequence(2**64)


def test_counts_to_fractions():
    assert np.allclose(counts_to_fractions((1, 2, 1)), [0.25, 0.5, 0.25])


@given(N=st.integers(1, 400), seed=st.integers(0, 2**63), base=st.floats(0, 0.6), removed=st.floats(0, 0.3))
def test_counts_always_sum_to_N(N, seed, base, removed):
    dist = InitialDistribution(Uniform(), CompartmentProfile(infected_base=base, removed_base=removed))
    pop = sample_initial_population(dist, N, seed)
    assert sum(pop.counts) == N
    assert np.all((pop.positions >= 0) & (pop.positions < 1))
