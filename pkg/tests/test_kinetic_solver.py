import math
import struct

import numpy as np
import pytest

from oracles import bimodal_state, gaussian_on_nodes, homogeneous_error

from bgklab.kinetic_solver import (
    DegenerateDensityError,
    InstabilityError,
    KineticState,
    OutOfRangeError,
    PhaseGrid,
    discrete_maxwellian,
    moments,
    read_checkpoint,
    smear_fields,
    solve,
    state_from_law,
    step,
    transport,
    write_checkpoint,
)
from bgklab.particle_system import InitialLaw
from bgklab.torus_kernel import InvalidInputError, kernel_build


@pytest.fixture
def grid():
    return PhaseGrid(16, 24, 6.0, 2)


def smooth_state(grid, seed=0):
    """Smooth non-Maxwellian state: a modulated Gaussian times a mild odd skew in v1."""
    rng = np.random.default_rng(seed)
    x = grid.spatial_points()
    sp = grid.spatial_shape + (1, 1)
    rho = 1 + 0.3 * np.cos(2 * np.pi * x[..., 0]) + 0.2 * np.sin(2 * np.pi * x[..., 1])
    u0 = 0.4 * np.sin(2 * np.pi * x[..., 1])
    u1 = 0.4 * np.cos(2 * np.pi * x[..., 0])
    T = (1 + 0.3 * np.cos(2 * np.pi * (x[..., 0] + x[..., 1]))).reshape(sp)
    v0, v1 = grid.velocity_axis_array(0), grid.velocity_axis_array(1)
    r2 = (v0 - u0.reshape(sp)) ** 2 + (v1 - u1.reshape(sp)) ** 2
    M = np.exp(-r2 / (2 * T)) / (2 * np.pi * T)
    skew = 1 + 0.1 * rng.uniform(-1, 1) * np.tanh(v0)
    return KineticState(grid, rho.reshape(sp) * M * skew)


class TestGrid:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            PhaseGrid(15, 16, 6.0)
        with pytest.raises(InvalidInputError):
            PhaseGrid(16, 16, -1.0)
        with pytest.raises(InvalidInputError):
            PhaseGrid(16, 16, 6.0, dim=4)

    def test_nodes(self, grid):
        assert grid.x[0] == -0.5 and grid.dx == 1 / 16
        assert grid.v[0] == pytest.approx(-6 + grid.dv / 2)
        assert np.allclose(grid.v, -grid.v[::-1])


class TestMoments:
    def test_equilibrium_fields(self, grid):
        f = moments(state_from_law(grid, InitialLaw()))
        assert np.max(np.abs(f.rho - 1)) < 1e-8
        assert np.max(np.abs(f.u)) < 1e-8
        assert np.max(np.abs(f.T - 1)) < 1e-8

    def test_sampled_gaussian_truncation(self):
        g = PhaseGrid(8, 32, 8.0, 2)
        f = moments(KineticState(g, gaussian_on_nodes(g, np.zeros(2), 1.0)))
        assert np.max(np.abs(f.rho - 1)) < 1e-8
        assert np.max(np.abs(f.T - 1)) < 1e-8

    def test_shifted(self):
        g = PhaseGrid(8, 48, 10.0, 2)
        f = moments(KineticState(g, gaussian_on_nodes(g, np.array([1.0, 0.0]), 2.0)))
        assert np.max(np.abs(f.u - [1, 0])) < 1e-8
        assert np.max(np.abs(f.T - 2)) < 1e-8

    def test_refined_velocity_grid(self):
        g1, g4 = PhaseGrid(8, 24, 8.0, 2), PhaseGrid(8, 96, 8.0, 2)
        f1, f4 = moments(smooth_state(g1)), moments(smooth_state(g4))
        for a, b in ((f1.rho, f4.rho), (f1.T, f4.T)):
            assert np.max(np.abs(a - b) / np.abs(b)) < 1e-4
        assert np.max(np.abs(f1.u - f4.u)) < 1e-4

    def test_vacuum_raises(self, grid):
        with pytest.raises(DegenerateDensityError):
            moments(KineticState(grid, np.zeros(grid.shape)))

    def test_discrete_maxwellian_exact_moments(self, grid):
        x = grid.spatial_points()
        rho = 1 + 0.5 * np.cos(2 * np.pi * x[..., 0])
        u = np.stack([0.3 + 0 * rho, -0.2 + 0 * rho], -1)
        T = 0.7 + 0.2 * np.sin(2 * np.pi * x[..., 1])
        f = moments(KineticState(grid, discrete_maxwellian(grid, rho, u, T)))
        assert np.max(np.abs(f.rho - rho)) < 1e-13
        assert np.max(np.abs(f.u - u)) < 1e-12
        assert np.max(np.abs(f.T - T)) < 1e-12


class TestSmearing:
    def test_uniform_state_unchanged(self, grid):
        s = KineticState(grid, gaussian_on_nodes(grid, np.array([0.2, 0.0]), 1.3))
        a, b = moments(s), smear_fields(s, kernel_build(0.5, 2))
        assert np.max(np.abs(a.rho - b.rho)) < 1e-13
        assert np.max(np.abs(a.u - b.u)) < 1e-13
        assert np.max(np.abs(a.T - b.T)) < 1e-12

    def test_mass_preserved(self):
        g = PhaseGrid(32, 16, 6.0, 2)
        s = smooth_state(g)
        a, b = moments(s), smear_fields(s, kernel_build(0.25, 2))
        assert abs(a.rho.sum() - b.rho.sum()) * g.dx**2 < 1e-12

    def test_second_order_in_epsilon(self):
        g = PhaseGrid(128, 8, 6.0, 2)
        x = g.spatial_points()[..., 0]
        rho = 1 + 0.5 * np.cos(2 * np.pi * x)
        s = KineticState(g, discrete_maxwellian(g, rho, np.zeros(x.shape + (2,)), np.ones(x.shape)))
        errs = []
        for eps in (0.2, 0.1):
            k = kernel_build(eps, 2)
            sm = smear_fields(s, k)
            # Taylor: phi * rho - rho ~ (m2 / 2d) Laplacian rho with m2 = int |y|^2 phi
            r = np.linspace(0, k.support_radius, 4001)
            m2 = np.trapezoid(2 * np.pi * r**3 * k.radial(r), r)
            lap = -0.5 * (2 * np.pi) ** 2 * np.cos(2 * np.pi * x)
            assert np.max(np.abs(sm.rho - rho - m2 / 4 * lap)) < 0.05 * m2
            errs.append(np.max(np.abs(sm.rho - rho)))
        assert errs[1] / errs[0] == pytest.approx(0.25, rel=0.05)


class TestStep:
    def test_equilibrium_fixed_point(self, grid):
        s = state_from_law(grid, InitialLaw())
        for k in (None, kernel_build(0.5, 2)):
            out = step(s, k, 0.01)
            assert np.max(np.abs(out.values - s.values)) < 1e-10

    def test_transport_single_mode(self):
        g = PhaseGrid(16, 12, 4.0, 2)
        x = g.spatial_points()
        mode = (2, -1)
        phase = 2 * np.pi * (mode[0] * x[..., 0] + mode[1] * x[..., 1])
        M = gaussian_on_nodes(g, np.zeros(2), 1.0)
        s = KineticState(g, (1 + 0.3 * np.cos(phase)).reshape(g.spatial_shape + (1, 1)) * M)
        dt = 0.137
        v0, v1 = g.velocity_axis_array(0), g.velocity_axis_array(1)
        shifted = phase.reshape(g.spatial_shape + (1, 1)) - 2 * np.pi * dt * (mode[0] * v0 + mode[1] * v1)
        exact = (1 + 0.3 * np.cos(shifted)) * M
        assert np.max(np.abs(transport(s, dt) - exact)) < 1e-10

    def test_homogeneous_relaxation(self):
        assert homogeneous_error(0.01) < 1e-3

    def test_instability_detected(self):
        g = PhaseGrid(16, 8, 4.0, 2)
        vals = np.zeros(g.shape)
        vals[0, 0] = 1.0  # a spike is not resolved by the spectral shift
        vals += 1e-3
        with pytest.raises(InstabilityError):
            step(KineticState(g, vals), None, 0.013)

    def test_bad_dt(self, grid):
        with pytest.raises(InvalidInputError):
            step(state_from_law(grid, InitialLaw()), None, 0.0)


class TestSolve:
    def test_zero_horizon(self, grid):
        s0 = state_from_law(grid, InitialLaw(a=0.3))
        res = solve(s0, None, 0.0, 0.01)
        np.testing.assert_array_equal(res.state.values, s0.values)
        assert len(res.fields.times) == 1

    @pytest.mark.parametrize("eps", [None, 0.5])
    def test_conservation(self, eps):
        g = PhaseGrid(16, 24, 8.0, 2)
        law = InitialLaw(a=0.5, u0=(0.3, -0.1))
        k = None if eps is None else kernel_build(eps, 2)
        res = solve(state_from_law(g, law), k, 0.3, 0.01, C2=law.C2)
        rates = res.bounds.max_drift_rates()
        assert rates["mass"] < 1e-10
        assert rates["momentum"] < 1e-8
        assert rates["energy"] < 1e-8
        assert res.bounds.density_floor_ok()
        assert min(res.bounds.min_T) > 0

    def test_keep_states_at_off_grid_times(self, grid):
        res = solve(state_from_law(grid, InitialLaw(a=0.5)), None, 0.05, 0.02, keep_states_at=[0.0, 0.013, 0.05])
        assert [round(s.t, 12) for s in res.states] == [0.0, 0.013, 0.05]
        assert res.state.t == pytest.approx(0.05)

    def test_field_series_interpolation(self, grid):
        res = solve(state_from_law(grid, InitialLaw(a=0.5)), kernel_build(0.5, 2), 0.04, 0.02)
        fs = res.fields
        node = grid.spatial_points()[3, 5]
        rho, u, T = fs.at(node[None, :], 0.02)
        assert rho[0] == pytest.approx(fs.rho[1, 3, 5], rel=1e-12)
        mid = 0.5 * (grid.spatial_points()[3, 5] + grid.spatial_points()[4, 5])
        rho_mid, _, _ = fs.at(mid[None, :], 0.03)
        expected = 0.25 * (fs.rho[1, 3, 5] + fs.rho[1, 4, 5] + fs.rho[2, 3, 5] + fs.rho[2, 4, 5])
        assert rho_mid[0] == pytest.approx(expected, rel=1e-12)
        with pytest.raises(OutOfRangeError):
            fs.at(node[None, :], 0.05)

    def test_fields_csv_header(self, grid):
        res = solve(state_from_law(grid, InitialLaw()), None, 0.01, 0.01)
        lines = res.fields.to_csv().splitlines()
        assert lines[0] == "t,x1_index,x2_index,rho,u1,u2,T"
        assert len(lines) == 1 + 2 * 16 * 16

    def test_density_floor_report(self):
        g = PhaseGrid(16, 24, 8.0, 2)
        law = InitialLaw(a=0.5)
        res = solve(state_from_law(g, law), kernel_build(0.5, 2), 0.5, 0.05, C2=law.C2)
        b = res.bounds
        assert all(r >= law.C2 * math.exp(-t) - 1e-6 for t, r in zip(b.times, b.min_rho))
        assert all(r >= law.C2 * math.exp(-t) - 1e-6 for t, r in zip(b.times, b.min_rho_phi))
        assert b.fitted_A() == sorted(b.fitted_A(), reverse=True)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, grid):
        s = state_from_law(grid, InitialLaw(a=0.4))
        s.t = 0.75
        path = tmp_path / "s.bin"
        write_checkpoint(s, path)
        s2 = read_checkpoint(path)
        assert s2.t == 0.75 and s2.grid == grid
        np.testing.assert_array_equal(s2.values, s.values)

    def test_byte_layout(self, tmp_path, grid):
        s = state_from_law(grid, InitialLaw())
        path = tmp_path / "s.bin"
        write_checkpoint(s, path)
        raw = path.read_bytes()
        head = struct.unpack("<8sIIIIdddd", raw[:56])
        assert head[:5] == (b"BGKSTATE", 1, 2, 16, 24)
        assert len(raw) == 56 + 8 * s.values.size
        assert np.frombuffer(raw[56:64], "<f8")[0] == s.values.flat[0]

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"X" * 80)
        with pytest.raises(InvalidInputError):
            read_checkpoint(p)


def test_bimodal_oracle_is_uniform(grid):
    s = bimodal_state(grid)
    assert np.allclose(s.values, s.values[0, 0])
