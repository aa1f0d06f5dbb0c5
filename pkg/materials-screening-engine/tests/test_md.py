import numpy as np
import pytest
from scipy.stats import linregress

import config as cfg
from conftest import dimer, fcc
from utils._elements import atomic_mass
from utils._errors import MDError
from utils._md import (
    Mobility,
    Trajectory,
    classify_mobility,
    einstein_diffusivity,
    msd_fft,
    run_nvt,
)
from utils._potential import HarmonicPair, ZeroPotential
from utils._structure import make_supercell


def _free_gas(repeat=(2, 2, 2)):
    return make_supercell(fcc(5.0), repeat).structure


def _ballistic(n_frames=101, speed=0.01):
    t = np.arange(n_frames, dtype=float)
    positions = np.zeros((n_frames, 2, 3))
    positions[:, 0, 0] = speed * t
    positions[:, 1, 1] = -speed * t
    zeros = np.zeros(n_frames)
    return Trajectory(("Ar", "Ar"), np.eye(3) * 10.0, np.full(2, atomic_mass("Ar")), 1.0, 1,
                      positions, np.zeros_like(positions), zeros, zeros)


class TestRunNVT:
    def test_energy_is_conserved_without_friction(self):
        spring = HarmonicPair(k=1.0, r0=2.0, cutoff=3.0)
        traj = run_nvt(dimer(2.1), spring, T=0.0, dt=1.0, steps=5000, friction=0.0, stride=10)
        drift = linregress(traj.times, traj.total_energy).slope * 1000.0
        assert abs(drift) < 1e-6
        assert traj.thermostat["kind"] == "nve"

    @pytest.mark.slow
    def test_thermostat_holds_the_temperature(self):
        traj = run_nvt(_free_gas(), ZeroPotential(), T=300.0, dt=1.0, steps=20000, friction=0.1, seed=1, stride=10)
        assert traj.temperature().mean() == pytest.approx(300.0, rel=0.05)

    def test_frames_and_stride(self, lj, lj_fcc):
        traj = run_nvt(lj_fcc, lj, T=0.01, dt=1.0, steps=20, stride=5)
        assert traj.n_frames == 5
        assert traj.times.tolist() == [0.0, 5.0, 10.0, 15.0, 20.0]
        assert len(traj.frames()) == 5

    def test_same_seed_same_trajectory(self, lj, lj_fcc):
        a = run_nvt(lj_fcc, lj, T=0.05, dt=1.0, steps=30, seed=9)
        b = run_nvt(lj_fcc, lj, T=0.05, dt=1.0, steps=30, seed=9)
        c = run_nvt(lj_fcc, lj, T=0.05, dt=1.0, steps=30, seed=10)
        assert np.array_equal(a.positions, b.positions)
        assert np.array_equal(a.velocities, b.velocities)
        assert not np.array_equal(a.positions, c.positions)

    def test_timestep_limit(self, lj, lj_fcc):
        with pytest.raises(MDError, match="timestep"):
            run_nvt(lj_fcc, lj, T=300.0, dt=3.0, steps=10)

    def test_blowup_is_reported(self, lj):
        with pytest.raises(MDError, match="exceeded") as e:
            run_nvt(dimer(0.8), lj, T=1.0, dt=1.0, steps=50)
        assert e.value.step >= 1


def test_msd_fft_matches_the_direct_average():
    rng = np.random.default_rng(4)
    x = np.cumsum(rng.normal(size=(60, 3, 3)), axis=0)
    direct = np.zeros((60, 3))
    for m in range(1, 60):
        direct[m] = np.mean(np.sum((x[m:] - x[:-m]) ** 2, axis=2), axis=0)
    assert np.allclose(msd_fft(x), direct)


class TestEinsteinDiffusivity:
    def test_frozen_atoms_are_inert(self):
        traj = run_nvt(_free_gas((1, 1, 1)), ZeroPotential(), T=0.0, steps=400, stride=4)
        report = einstein_diffusivity(traj)
        assert report.diffusivity["Ar"] == 0.0
        assert classify_mobility(report.diffusivity["Ar"]) == Mobility.inert

    @pytest.mark.slow
    def test_free_langevin_particles(self):
        gas = _free_gas((4, 4, 4))
        T, friction = 300.0, 0.1
        traj = run_nvt(gas, ZeroPotential(), T=T, dt=1.0, steps=4000, friction=friction, seed=2, stride=5)
        report = einstein_diffusivity(traj)
        kT_over_m = cfg.KB_EV * T / atomic_mass("Ar") / cfg.AMU_A2_FS2_TO_EV
        expected = kT_over_m / friction * cfg.A2_FS_TO_CM2_S
        assert report.diffusivity["Ar"] == pytest.approx(expected, rel=0.15)
        assert classify_mobility(report.diffusivity["Ar"]) == Mobility.mobile

    def test_ballistic_motion_is_not_diffusive(self):
        report = einstein_diffusivity(_ballistic())
        assert np.allclose(report.msd, 1.0e-4 * np.array(report.lag_times) ** 2)
        assert report.r_squared_all < 0.99
        assert not report.diffusive

    def test_reduced_dimension(self):
        report = einstein_diffusivity(_ballistic(), d=1)
        assert report.dimension == 1
        assert report.msd_by_species["Ar"] == report.msd

    def test_bad_dimension(self):
        with pytest.raises(MDError, match="dimensionality"):
            einstein_diffusivity(_ballistic(), d=4)

    def test_missing_species(self):
        with pytest.raises(MDError, match="Kr"):
            einstein_diffusivity(_ballistic(), species=["Kr"])

    def test_window_beyond_the_trajectory(self):
        with pytest.raises(MDError, match="beyond"):
            einstein_diffusivity(_ballistic(), window=(10.0, 500.0))


def test_mobility_threshold():
    assert classify_mobility(5e-8) == Mobility.inert
    assert classify_mobility(1e-7) == Mobility.mobile
    assert classify_mobility(1e-6) == Mobility.mobile
