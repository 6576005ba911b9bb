import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from spatial_sir.engine import TestFunctionTriple, martingale_path, simulate
from spatial_sir.fields import (
    GridField,
    NumericalError,
    classical_sir,
    field_from_initial,
    grid_centres,
    local_conserved_quantity,
    local_rhs,
    make_local_rhs,
    make_nonlocal_rhs,
    nonlocal_quadrature,
    nonlocal_rhs,
    rk4_integrate,
    weak_residual,
)
from spatial_sir.kernels import ConstantT, DotT, GaussianT, MeanField
from spatial_sir.model import CompartmentProfile, InitialDistribution, ModelParams, TruncatedGaussian, Uniform

from conftest import random_population

DIST = InitialDistribution(TruncatedGaussian((0.45, 0.55), 0.3), CompartmentProfile(0.05, 0.3, (0.5, 0.5), 0.15, 0.02))


class Opaque:
    """Wraps an interaction function so only the generic dense quadrature applies."""

    def __init__(self, T):
        self.T = T

    def __call__(self, x, y):
        return self.T(x, y)


def _phi(xy):
    x, y = xy[:, 0], xy[:, 1]
    return np.column_stack([np.cos(np.pi * x) * y, x * x - y, np.sin(2 * y) + x])


PHI = TestFunctionTriple(_phi, "phi")


def _field(n=16):
    return field_from_initial(DIST, n)


@pytest.mark.parametrize("rhs", [make_nonlocal_rhs(GaussianT(0.2), 1.0, 5.0), make_local_rhs(1.0, 5.0)])
def test_rhs_vanishes_without_infection(rhs):
    f = _field().data.copy()
    f[0] += f[1]
    f[1] = 0.0
    assert np.all(rhs(f) == 0.0)


def test_rhs_conserves_each_cell():
    f = _field(24)
    for d in (nonlocal_rhs(f, GaussianT(0.2), 1.0, 5.0), local_rhs(f, 1.0, 5.0)):
        assert np.abs(d.cell_sum()).max() < 1e-13 * max(1.0, np.abs(d.data).max())


def test_local_rhs_cells_are_independent():
    f = _field(12).data
    g = f.copy()
    g[:, 3, 4] += np.array([0.3, 0.7, 0.1])
    a, b = make_local_rhs(1.0, 4.0)(f), make_local_rhs(1.0, 4.0)(g)
    mask = np.ones((12, 12), bool)
    mask[3, 4] = False
    assert np.array_equal(a[:, mask], b[:, mask])
    assert not np.array_equal(a[:, 3, 4], b[:, 3, 4])


@pytest.mark.parametrize("T", [ConstantT(1.3), GaussianT(0.15), DotT()])
def test_quadrature_fast_paths_match_dense_evaluation(T):
    fI = _field(20).I
    assert np.allclose(nonlocal_quadrature(T, fI), nonlocal_quadrature(Opaque(T), fI), rtol=1e-12, atol=1e-15)


def test_quadrature_matches_double_loop():
    n = 6
    T = GaussianT(0.3)
    fI = np.random.default_rng(0).random((n, n))
    c = grid_centres(n)
    ref = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                for m in range(n):
                    ref[i, j] += T(np.array([c[i], c[j]]), np.array([c[k], c[m]])) * fI[k, m] / n**2
    assert np.allclose(nonlocal_quadrature(T, fI), ref, rtol=1e-13)


def test_zero_rhs_leaves_field_unchanged():
    f = _field()
    out = rk4_integrate(f, lambda y, t: np.zeros_like(y), 0.1, 10)
    assert np.array_equal(out[-1].data, f.data)
    assert out[-1].t == pytest.approx(1.0)


def test_rk4_converges_at_fourth_order():
    f = _field(12)
    rhs = make_nonlocal_rhs(GaussianT(0.2), 1.0, 8.0)
    ref = rk4_integrate(f, rhs, 1 / 1280, 1280)[-1].data
    errs = [np.abs(rk4_integrate(f, rhs, 1 / m, m)[-1].data - ref).max() for m in (10, 20, 40)]
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.7), orders


@pytest.mark.parametrize("kind", ["nonlocal", "local"])
def test_total_mass_is_conserved(kind):
    f = _field(32)
    rhs = make_nonlocal_rhs(GaussianT(0.2), 1.0, 8.0) if kind == "nonlocal" else make_local_rhs(1.0, 8.0)
    traj = rk4_integrate(f, rhs, 1e-3, 2000, save_every=500)
    m0 = f.data.sum(axis=0)
    for g in traj:
        assert np.abs(g.data.sum(axis=0) - m0).max() < 1e-10
        assert g.totals().sum() == pytest.approx(f.totals().sum(), abs=1e-12)


def test_compartments_are_monotone():
    traj = rk4_integrate(_field(16), make_nonlocal_rhs(GaussianT(0.2), 1.0, 8.0), 1e-2, 300, save_every=10)
    S = np.array([g.S for g in traj])
    R = np.array([g.R for g in traj])
    assert np.all(np.diff(S, axis=0) <= 1e-15) and np.all(np.diff(R, axis=0) >= -1e-15)
    assert min(g.data.min() for g in traj) >= 0


def test_local_conserved_quantity_is_constant():
    p, q = 1.0, 4.0
    traj = rk4_integrate(_field(16), make_local_rhs(p, q), 1e-3, 2000, save_every=1000)
    c0 = local_conserved_quantity(traj[0], p, q)
    for g in traj[1:]:
        assert np.nanmax(np.abs(local_conserved_quantity(g, p, q) - c0)) < 1e-10


def test_classical_sir_matches_adaptive_solver():
    b, g = 3.0, 1.0
    y0 = [0.95, 0.05, 0.0]
    ours = classical_sir(y0, b, g, 1e-3, 5000)[-1]
    sol = solve_ivp(lambda t, v: [-b * v[0] * v[1], b * v[0] * v[1] - g * v[1], g * v[1]], (0, 5), y0,
                    rtol=1e-12, atol=1e-14)
    assert np.allclose(ours, sol.y[:, -1], atol=1e-10)


def test_constant_kernel_aggregates_to_classical_sir():
    p, q = 1.0, 6.0
    f = _field(16)
    traj = rk4_integrate(f, make_nonlocal_rhs(ConstantT(1.0), p, q), 1e-3, 2000, save_every=2000)
    ref = classical_sir(f.totals(), q, p, 1e-3, 2000)[-1]
    assert np.allclose(traj[-1].totals(), ref, atol=1e-12)


def test_local_solution_is_pointwise_classical_sir():
    p, q = 1.0, 6.0
    f = _field(8)
    final = rk4_integrate(f, make_local_rhs(p, q), 1e-3, 1500)[-1]
    for ix, iy in [(0, 0), (3, 5), (7, 2)]:
        ref = classical_sir(f.data[:, ix, iy], q, p, 1e-3, 1500)[-1]
        assert np.allclose(final.data[:, ix, iy], ref, atol=1e-13)


def test_solution_depends_lipschitz_on_initial_data():
    rhs = make_nonlocal_rhs(GaussianT(0.2), 1.0, 6.0)
    f = _field(12)
    bump = np.zeros_like(f.data)
    bump[1, 5, 5] = 1.0
    bump[0, 5, 5] = -1.0
    base = rk4_integrate(f, rhs, 1e-2, 100)[-1].data
    again = rk4_integrate(f, rhs, 1e-2, 100)[-1].data
    assert np.array_equal(base, again)
    diffs = [np.abs(rk4_integrate(GridField(f.data + e * bump), rhs, 1e-2, 100)[-1].data - base).max()
             for e in (1e-6, 2e-6)]
    assert diffs[1] / diffs[0] == pytest.approx(2.0, rel=1e-3)


def test_oversized_step_raises():
    with pytest.raises(NumericalError):
        rk4_integrate(_field(8), make_nonlocal_rhs(ConstantT(1.0), 1.0, 50.0), 5.0, 3)
    bad = _field(8)
    bad.data[1, 0, 0] = np.nan
    with pytest.raises(NumericalError):
        rk4_integrate(bad, make_local_rhs(1.0, 1.0), 0.1, 1)


def test_grid_field_rejects_bad_shape():
    with pytest.raises(ValueError):
        GridField(np.zeros((2, 4, 4)))
    with pytest.raises(ValueError):
        GridField(np.zeros((3, 4, 5)))


def test_raw_and_csv_round_trip(tmp_path):
    f = _field(9)
    f.t = 1.25
    f.write_raw(tmp_path / "f.bin")
    g = GridField.read_raw(tmp_path / "f.bin")
    assert np.array_equal(f.data, g.data) and g.t == 1.25
    f.write_csv(tmp_path / "f.csv")
    rows = list(csv.DictReader(open(tmp_path / "f.csv")))
    assert len(rows) == 81
    flat = f.data.reshape(3, -1)
    assert [float(rows[10][k]) for k in ("fS", "fI", "fR")] == list(flat[:, 10])
    assert (float(rows[10]["x"]), float(rows[10]["y"])) == tuple(f.centres()[10])


def test_weak_residual_vanishes_for_constant_test_function():
    traj = rk4_integrate(_field(16), make_nonlocal_rhs(GaussianT(0.2), 1.0, 6.0), 1e-2, 100, save_every=10)
    assert weak_residual(traj, TestFunctionTriple.constant(1.0), GaussianT(0.2), 1.0, 6.0) < 1e-14


def test_weak_residual_is_small_and_shrinks_with_time_refinement():
    T, p, q = GaussianT(0.2), 1.0, 6.0
    traj = rk4_integrate(_field(16), make_nonlocal_rhs(T, p, q), 1e-3, 1000)
    coarse = weak_residual(traj[::20], PHI, T, p, q)
    fine = weak_residual(traj[::10], PHI, T, p, q)
    assert fine < 1e-3
    assert coarse / fine == pytest.approx(4.0, rel=0.05)


def test_particle_weak_residual_is_martingale_value():
    pop = random_population(200, 4)
    params = ModelParams(1.0, 3.0, 1.0)
    traj = simulate(pop, params, MeanField(GaussianT(0.3)), [1.0], 3)
    res = weak_residual(traj, PHI, GaussianT(0.3), 1.0, 3.0)
    assert res == pytest.approx(abs(martingale_path(traj, PHI, times=[0.0, 1.0]).martingale[-1, 0]), abs=0)
    with pytest.raises(ValueError):
        weak_residual(traj, PHI, GaussianT(0.2), 1.0, 3.0)


def test_cell_average_and_point_fields_agree_for_smooth_data():
    a = field_from_initial(InitialDistribution(Uniform()), 16, "cell_average")
    b = field_from_initial(InitialDistribution(Uniform()), 16, "point")
    assert np.allclose(a.data, b.data)
    with pytest.raises(ValueError):
        field_from_initial(DIST, 8, "spline")


@settings(max_examples=40)
@given(seed=st.integers(0, 2**32), p=st.floats(0, 3), q=st.floats(0, 10), local=st.booleans())
def test_random_fields_stay_nonnegative_and_conserve_mass(seed, p, q, local):
    f = GridField(np.random.default_rng(seed).random((3, 6, 6)))
    rhs = make_local_rhs(p, q) if local else make_nonlocal_rhs(GaussianT(0.3), p, q)
    out = rk4_integrate(f, rhs, 1e-2, 50)[-1]
    assert out.data.min() >= -1e-12
    assert np.abs(out.data.sum(axis=0) - f.data.sum(axis=0)).max() < 1e-12
