import copy
import time

import numpy as np
import pytest
from scipy.special import ndtr

from picrom.fem import FemGrid, hamiltonian
from picrom.fom import (
    BenchmarkSpec,
    EnsembleState,
    hammersley,
    parameter_grid,
    radical_inverse_base2,
    run_fom,
    sample_ensemble,
    sample_initial,
    sv_step,
)


def small_spec(**over):
    base = dict(kind="nlld", wavenumber=0.5, amp_range=(0.46, 0.5),
                sd_range=(0.96, 1.0), n_particles=50, n_x=8, n_params=4,
                t_final=1.0, dt=0.01)
    base.update(over)
    return BenchmarkSpec(**base)


class TestHammersley:
    def test_radical_inverse_values(self):
        assert radical_inverse_base2([1, 2, 3]).tolist() == [0.5, 0.25, 0.75]

    def test_first_coordinates(self):
        pts = hammersley(4)
        assert pts[:, 0].tolist() == [0.125, 0.375, 0.625, 0.875]

    def test_dyadic_equidistribution(self):
        pts = hammersley(1024)
        cells = np.floor(pts * 8).astype(int)
        counts = np.zeros((8, 8), dtype=int)
        np.add.at(counts, (cells[:, 0], cells[:, 1]), 1)
        assert counts.min() >= 14 and counts.max() <= 18

    def test_open_interval(self):
        pts = hammersley(64)
        assert pts.min() > 0.0 and pts.max() < 1.0


class TestSampleInitial:
    def test_unperturbed_positions_exact(self):
        spec = small_spec()
        x, _ = sample_initial(spec, (0.0, 1.0))
        u = hammersley(spec.n_particles)[:, 0]
        assert np.array_equal(x, spec.ell_x * u)

    def test_gaussian_median_is_zero(self):
        spec = small_spec(n_particles=2)
        # w = phi_2(1) = 0.5 and phi_2(2) = 0.25: the first sample hits the median
        _, v = sample_initial(spec, (0.2, 1.0))
        assert v[0] == 0.0

    def test_positions_satisfy_cdf(self):
        spec = small_spec(n_particles=200)
        amp, k = 0.5, spec.wavenumber
        x, _ = sample_initial(spec, (amp, 1.0))
        u = hammersley(200)[:, 0]
        cdf = (x + amp / k * np.sin(k * x)) / spec.ell_x
        assert np.max(np.abs(cdf - u)) <= 1e-12

    def test_velocities_satisfy_cdf(self):
        spec = small_spec(n_particles=200, kind="tsi")
        sd = 1.01
        _, v = sample_initial(spec, (0.01, sd))
        w = hammersley(200)[:, 1]
        cdf = 0.5 * (ndtr((v - 3) / sd) + ndtr((v + 3) / sd))
        assert np.max(np.abs(cdf - w)) <= 1e-12
        assert np.all(np.abs(v) <= 10.0)

    def test_tsi_moments(self):
        spec = small_spec(kind="tsi", n_particles=100000)
        _, v = sample_initial(spec, (0.01, 1.0))
        assert abs(v.mean()) <= 1e-2
        assert abs(np.mean(v * v) - 10.0) <= 2e-2

    def test_rejects_overdriven_amplitude(self):
        with pytest.raises(ValueError):
            sample_initial(small_spec(), (1.0, 1.0))


class TestParameterGrid:
    def test_tensor_grid_covers_box(self):
        params = parameter_grid((0.46, 0.5), (0.96, 1.0), 20)
        assert len(params) == 20
        amps = sorted({a for a, _ in params})
        sds = sorted({s for _, s in params})
        assert amps[0] == 0.46 and amps[-1] == 0.5
        assert sds[0] == 0.96 and sds[-1] == 1.0

    def test_prime_count_falls_back(self):
        params = parameter_grid((0.0, 1.0), (0.0, 1.0), 7)
        assert len(params) == 7
        assert len({p for p in params}) == 7


class TestSvStep:
    def test_free_streaming(self):
        # dyadic domain and node-multiple drifts keep the field exactly zero
        grid = FemGrid(2.0, 8)
        dt = 0.01
        x = np.tile(np.arange(8) * grid.dx, 2)[:, None] * np.ones((1, 3))
        v = np.ones((16, 1)) * np.array([[grid.dx / dt, 2 * grid.dx / dt,
                                          -grid.dx / dt]])
        state = EnsembleState(x=x.copy(), v=v.copy(), params=[None] * 3)
        new, _ = sv_step(grid, state, dt)
        assert np.array_equal(new.x, x + dt * v)
        assert np.array_equal(new.v, v)

    def test_time_reversibility(self):
        spec = small_spec()
        grid = spec.make_grid()
        state = sample_ensemble(spec)
        x0, v0 = state.x.copy(), state.v.copy()
        fwd, _ = sv_step(grid, state, spec.dt)
        fwd.v = -fwd.v
        back, _ = sv_step(grid, fwd, spec.dt)
        assert np.max(np.abs(back.x - x0)) <= 1e-12
        assert np.max(np.abs(-back.v - v0)) <= 1e-12

    def test_hamiltonian_drift_100_steps(self):
        # drift after 100 steps at frozen parameter instances; at N=50 the
        # sampling noise is parameter dependent because node crossings make
        # the discrete force only piecewise smooth
        spec = small_spec(n_particles=50, n_x=8, n_params=2)
        grid = spec.make_grid()
        state = sample_ensemble(spec)
        for s, param in enumerate([(0.46, 0.96), (0.5, 1.0)]):
            state.x[:, s], state.v[:, s] = sample_initial(spec, param)
        h0 = hamiltonian(grid, state.x, state.v)
        e = None
        for _ in range(100):
            state, e = sv_step(grid, state, 0.01, e)
        h = hamiltonian(grid, state.x, state.v)
        assert np.max(np.abs(h - h0) / np.abs(h0)) <= 1e-4


class TestRunFom:
    def test_zero_steps_returns_initial(self):
        spec = small_spec(t_final=0.004, dt=0.01)  # rounds to zero steps
        grid = spec.make_grid()
        traj, state = run_fom(grid, spec)
        assert len(traj.times) == 1 and traj.times[0] == 0.0
        assert state.time == 0.0

    def test_determinism(self):
        spec = small_spec(n_params=3, t_final=0.2)
        grid = spec.make_grid()
        traj1, s1 = run_fom(grid, spec)
        traj2, s2 = run_fom(grid, spec)
        assert np.array_equal(s1.x, s2.x) and np.array_equal(s1.v, s2.v)
        assert np.array_equal(traj1.snaps[-1][0], traj2.snaps[-1][0])

    def test_momentum_with_flat_profile(self):
        # amp = 0 with an equispaced profile keeps the configuration neutral,
        # so the field stays at machine zero and total momentum is constant.
        # (With independently sampled velocities the lattice disperses and
        # grid granularity exerts a small net force; that regime breaks the
        # zero-field premise and is not what this invariant asserts.)
        spec = small_spec(amp_range=(-1e-9, 1e-9), n_particles=64, n_x=8,
                          n_params=2, t_final=1.0)
        grid = spec.make_grid()
        state = sample_ensemble(spec)
        state.x[:, :] = np.tile(spec.ell_x * (np.arange(64) + 0.5) / 64, (2, 1)).T
        state.v[:, 0] = 0.7
        state.v[:, 1] = -1.3
        total0 = state.v.sum(axis=0)
        e = None
        for _ in range(100):
            state, e = sv_step(grid, state, spec.dt, e)
        assert np.max(np.abs(state.v.sum(axis=0) - total0)) <= 1e-10

    def test_stride_and_final_snapshot(self):
        spec = small_spec(t_final=0.55, dt=0.01)
        grid = spec.make_grid()
        traj, state = run_fom(grid, spec, store_every=20)
        assert traj.times[0] == 0.0
        assert traj.times[-1] == pytest.approx(state.time)
        assert len(traj.times) == 1 + len([s for s in range(1, 56)
                                           if s % 20 == 0 or s == 55])

    def test_cost_scales_linearly_in_particles(self):
        spec1 = small_spec(n_particles=20000, n_x=32, n_params=4, t_final=0.1)
        spec2 = small_spec(n_particles=40000, n_x=32, n_params=4, t_final=0.1)
        times = []
        for spec in (spec1, spec2):
            grid = spec.make_grid()
            state = sample_ensemble(spec)
            e = None
            best = np.inf
            for _ in range(3):
                t0 = time.perf_counter()
                for _ in range(5):
                    state, e = sv_step(grid, state, spec.dt, e)
                best = min(best, time.perf_counter() - t0)
            times.append(best)
        assert 1.6 <= times[1] / times[0] <= 2.6


class TestDeskScaleShapes:
    def test_nlld_energy_damps_then_grows(self, nlld_desk_runs):
        series = nlld_desk_runs["fom"].series
        energy = series.electric_energy.mean(axis=1)
        imin = int(np.argmin(energy))
        assert 0 < imin < energy.size - 1
        assert energy[0] / energy[imin] > 10.0
        assert energy[-1] / energy[imin] > 10.0

    def test_tsi_energy_grows_two_decades(self, tsi_desk_runs):
        series = tsi_desk_runs["fom"].series
        energy = series.electric_energy.mean(axis=1)
        assert energy.max() / energy[0] >= 100.0
        # saturation: the maximum is reached well before the final time
        assert np.argmax(energy) < energy.size - 1
