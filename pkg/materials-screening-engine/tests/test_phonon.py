import dataclasses

import numpy as np
import pytest
from scipy.integrate import trapezoid

import config as cfg
from conftest import chain, fcc
from utils._elements import atomic_mass
from utils._errors import PhononError, QHABoundaryError
from utils._phonon import (
    PhononResult,
    band_structure,
    dispersion,
    dispersion_table,
    dos,
    dynamical_matrix,
    entropy,
    force_constants,
    gibbs_qha,
    heat_capacity,
    helmholtz_free_energy,
    kappa_crta,
    mode_heat_capacities,
    monkhorst_pack,
    reciprocal_lattice,
    thermal_table,
)
from utils._potential import HarmonicPair, LennardJones

# springs held at 1.0 with rest length 0.9: longitudinal k = 1, transverse k = 0.1
SPRING = HarmonicPair(k=1.0, r0=0.9, cutoff=1.5)


@pytest.fixture(scope="module")
def chain_fc():
    # tiny amplitude keeps the transverse anharmonic error below 1e-8
    return force_constants(chain(1.0), SPRING, repeat=(4, 1, 1), amplitude=1.0e-5, max_workers=2)


def _chain_frequency(k, q):
    return 2.0 * np.sqrt(k / atomic_mass("Ar")) * abs(np.sin(np.pi * q)) * cfg.EV_A2_AMU_TO_THZ


def _single_mode(nu_thz):
    return PhononResult(qpoints=np.zeros((1, 3)), frequencies=np.array([[nu_thz]]), n_atoms=1, volume=1.0)


class TestForceConstants:
    def test_nearest_neighbor_springs(self, chain_fc):
        assert chain_fc.phi.shape == (1, 4, 3, 3)
        assert np.allclose(sorted(chain_fc.phi[0, :, 0, 0]), [-1.0, -1.0, 0.0, 2.0], atol=1e-8)
        assert np.allclose(sorted(chain_fc.phi[0, :, 1, 1]), [-0.1, -0.1, 0.0, 0.2], atol=1e-8)

    def test_acoustic_sum_rule(self, chain_fc):
        assert np.allclose(chain_fc.phi.sum(axis=1), 0.0, atol=1e-12)

    def test_amplitude_independence(self):
        argon = LennardJones(epsilon=0.0104, sigma=3.4)
        crystal = fcc(2.0 ** (1.0 / 6.0) * 3.4 * np.sqrt(2.0))
        q = [[0.5, 0.0, 0.0], [0.25, 0.25, 0.0]]
        small = dispersion(force_constants(crystal, argon, amplitude=0.005), qpoints=q).frequencies
        large = dispersion(force_constants(crystal, argon, amplitude=0.01), qpoints=q).frequencies
        assert np.allclose(small, large, rtol=1e-3)

    def test_dynamical_matrix_is_hermitian(self, chain_fc):
        q_cart = 0.3 * reciprocal_lattice(chain(1.0).lattice)[0]
        D = dynamical_matrix(chain_fc, q_cart)
        assert np.allclose(D, D.conj().T, atol=1e-14)

    def test_asymmetric_force_constants_are_rejected(self, chain_fc):
        phi = chain_fc.phi.copy()
        neighbor = int(np.argmin(phi[0, :, 0, 0]))
        phi[0, neighbor, 0, 1] += 1.0
        broken = dataclasses.replace(chain_fc, phi=phi)
        q_cart = 0.5 * reciprocal_lattice(chain(1.0).lattice)[0]
        with pytest.raises(PhononError, match="not Hermitian") as e:
            dynamical_matrix(broken, q_cart)
        assert e.value.qpoints[0] == pytest.approx((0.5, 0.0, 0.0))


class TestDispersion:
    def test_chain_branches(self, chain_fc):
        q = np.array([[x, 0.0, 0.0] for x in (0.1, 0.25, 0.37, 0.5)])
        ph = dispersion(chain_fc, qpoints=q)
        for row, x in zip(ph.frequencies, q[:, 0]):
            assert row[2] == pytest.approx(_chain_frequency(1.0, x), rel=1e-6)
            assert row[:2] == pytest.approx([_chain_frequency(0.1, x)] * 2, rel=1e-6)

    def test_gamma_has_three_zero_modes(self, chain_fc):
        ph = dispersion(chain_fc, qpoints=[[0.0, 0.0, 0.0]])
        assert np.allclose(ph.frequencies, 0.0, atol=1e-6)
        assert not ph.has_imaginary

    def test_time_reversal(self, chain_fc):
        plus = dispersion(chain_fc, qpoints=[[0.2, 0.1, 0.0]]).frequencies
        minus = dispersion(chain_fc, qpoints=[[-0.2, -0.1, 0.0]]).frequencies
        assert np.allclose(plus, minus, atol=1e-10)

    def test_sound_velocity(self, chain_fc):
        ph = dispersion(chain_fc, qpoints=[[0.1, 0.0, 0.0]], velocities=True)
        omega0 = 2.0 * np.pi * 1.0e-3 * cfg.EV_A2_AMU_TO_THZ * np.sqrt(1.0 / atomic_mass("Ar"))
        assert ph.group_velocities[0, 2, 0] == pytest.approx(omega0 * np.cos(0.1 * np.pi), rel=1e-4)
        assert np.allclose(ph.group_velocities[0, :, 1:], 0.0, atol=1e-8)

    def test_compressed_chain_is_unstable(self):
        fc = force_constants(chain(1.0), HarmonicPair(k=1.0, r0=1.2, cutoff=1.5), repeat=(4, 1, 1))
        ph = dispersion(fc, mesh=(4, 1, 1))
        assert ph.has_imaginary
        with pytest.raises(PhononError) as e:
            helmholtz_free_energy(ph, 300.0)
        assert len(e.value.qpoints) > 0

    def test_band_structure_distances(self, chain_fc):
        ph = band_structure(chain_fc, [[0, 0, 0], [0.5, 0, 0]], n_per_segment=10)
        assert ph.n_qpoints == 11
        assert ph.distances[-1] == pytest.approx(0.5)
        table = dispersion_table(ph)
        assert list(table.columns[-3:]) == ["branch_0_THz", "branch_1_THz", "branch_2_THz"]
        assert "distance" in table.columns

    def test_monkhorst_pack(self):
        grid = monkhorst_pack((4, 1, 1))
        assert sorted(grid[:, 0]) == [-0.5, -0.25, 0.0, 0.25]


class TestThermodynamics:
    def test_single_mode_free_energy(self):
        nu = cfg.KB_EV * 300.0 / cfg.H_EV_S / 1.0e12
        expected = 0.5 * cfg.KB_EV * 300.0 + cfg.KB_EV * 300.0 * np.log(1.0 - np.exp(-1.0))
        assert helmholtz_free_energy(_single_mode(nu), 300.0) == pytest.approx(expected, rel=1e-12)

    def test_zero_temperature_is_the_zero_point_energy(self):
        nu = 5.0
        assert helmholtz_free_energy(_single_mode(nu), 0.0) == pytest.approx(0.5 * cfg.H_EV_S * nu * 1.0e12)
        assert entropy(_single_mode(nu), 0.0) == 0.0
        assert heat_capacity(_single_mode(nu), 0.0) == 0.0

    def test_negative_temperature(self):
        with pytest.raises(PhononError):
            helmholtz_free_energy(_single_mode(5.0), -1.0)

    def test_dulong_petit(self, chain_fc):
        ph = dispersion(chain_fc, mesh=(400, 1, 1))
        assert heat_capacity(ph, 1.0e5) == pytest.approx(3.0 * cfg.KB_EV, rel=5e-3)

    def test_entropy_is_minus_the_temperature_derivative(self, chain_fc):
        ph = dispersion(chain_fc, mesh=(8, 1, 1))
        T, h = 300.0, 0.01
        numerical = -(helmholtz_free_energy(ph, T + h) - helmholtz_free_energy(ph, T - h)) / (2.0 * h)
        assert entropy(ph, T) == pytest.approx(numerical, rel=1e-6)

    def test_free_energy_decreases_with_temperature(self, chain_fc):
        ph = dispersion(chain_fc, mesh=(8, 1, 1))
        table = thermal_table(ph, [0.0, 100.0, 300.0, 1000.0])
        values = table["free_energy_eV_per_cell"].to_numpy()
        assert np.all(np.diff(values) <= 0.0)
        assert table["free_energy_eV_per_atom"].tolist() == table["free_energy_eV_per_cell"].tolist()

    def test_dos_integrates_to_three_modes_per_atom(self, chain_fc):
        ph = dispersion(chain_fc, mesh=(8, 1, 1))
        df = dos(ph)
        assert trapezoid(df["dos_states_per_THz"], df["frequency_THz"]) == pytest.approx(3.0, rel=1e-6)


class TestGibbsQHA:
    @staticmethod
    def _scan(energy):
        return [(v, energy(v), None) for v in (96.0, 98.0, 100.0, 102.0, 104.0)]

    def test_parabola(self):
        G, V = gibbs_qha(self._scan(lambda v: (v - 100.0) ** 2), T=300.0)
        assert V == pytest.approx(100.0, abs=1e-6)
        assert G == pytest.approx(0.0, abs=1e-8)

    def test_pressure_shifts_the_minimum(self):
        G, V = gibbs_qha(self._scan(lambda v: (v - 100.0) ** 2), T=300.0, p=2.0)
        assert V == pytest.approx(99.0, abs=1e-6)
        assert G == pytest.approx(199.0, abs=1e-6)

    def test_minimum_at_the_edge(self):
        with pytest.raises(QHABoundaryError) as e:
            gibbs_qha(self._scan(lambda v: -v), T=300.0)
        assert e.value.volume == pytest.approx(104.0)

    def test_too_few_points(self):
        with pytest.raises(PhononError, match="at least 5"):
            gibbs_qha(self._scan(lambda v: (v - 100.0) ** 2)[:4], T=300.0)


class TestKappa:
    @pytest.fixture
    def chain_ph(self, chain_fc):
        return dispersion(chain_fc, mesh=(8, 1, 1), velocities=True)

    def test_zero_lifetime(self, chain_ph):
        C = mode_heat_capacities(chain_ph, 300.0)
        assert np.allclose(kappa_crta(chain_ph, C, 0.0), 0.0)

    def test_linear_in_lifetime(self, chain_ph):
        C = mode_heat_capacities(chain_ph, 300.0)
        assert np.allclose(kappa_crta(chain_ph, C, 20.0), 2.0 * kappa_crta(chain_ph, C, 10.0))

    def test_matches_mode_sum(self, chain_ph):
        C = mode_heat_capacities(chain_ph, 300.0)
        tau = np.linspace(5.0, 15.0, C.size).reshape(C.shape)
        v = chain_ph.group_velocities
        brute = np.zeros((3, 3))
        for q in range(chain_ph.n_qpoints):
            for m in range(C.shape[1]):
                brute += C[q, m] * np.outer(v[q, m], v[q, m]) * tau[q, m]
        brute *= cfg.EV_K_A_FS_TO_W_MK / (chain_ph.n_qpoints * chain_ph.volume)
        assert np.allclose(kappa_crta(chain_ph, C, tau), brute)
        assert kappa_crta(chain_ph, C, 10.0)[0, 0] > 0.0

    def test_lifetimes_required(self, chain_ph):
        with pytest.raises(PhononError, match="lifetimes"):
            kappa_crta(chain_ph, mode_heat_capacities(chain_ph, 300.0), None)

    def test_velocities_required(self, chain_fc):
        ph = dispersion(chain_fc, mesh=(4, 1, 1))
        with pytest.raises(PhononError, match="group velocities"):
            kappa_crta(ph, mode_heat_capacities(ph, 300.0), 10.0)
