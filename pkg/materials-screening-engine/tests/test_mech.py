import numpy as np
import pytest
from scipy.spatial.transform import Rotation

import config as cfg
from utils._errors import MechanicsError
from utils._mech import (
    elastic_tensor,
    ideal_shear,
    shear_curve,
    shear_deformation,
    stress_to_voigt,
    voigt_to_strain,
)
from utils._structure import Structure


def test_voigt_convention():
    eps = voigt_to_strain([0.1, 0.2, 0.3, 0.04, 0.06, 0.08])
    assert np.allclose(np.diag(eps), [0.1, 0.2, 0.3])
    assert eps[1, 2] == eps[2, 1] == pytest.approx(0.02)
    assert eps[0, 2] == pytest.approx(0.03)
    assert eps[0, 1] == pytest.approx(0.04)
    sigma = np.array([[1.0, 6.0, 5.0], [6.0, 2.0, 4.0], [5.0, 4.0, 3.0]])
    assert stress_to_voigt(sigma).tolist() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]


class TestElasticTensor:
    def test_spring_crystal(self, spring_fcc):
        s, p, a = spring_fcc
        C = elastic_tensor(s, p, max_workers=2).C
        assert C[0, 0] == pytest.approx(2.0 / a, rel=1e-3)
        assert C[0, 1] == pytest.approx(1.0 / a, rel=1e-3)
        assert C[3, 3] == pytest.approx(1.0 / a, rel=1e-3)

    def test_cubic_symmetry(self, spring_fcc):
        s, p, _ = spring_fcc
        C = elastic_tensor(s, p).C
        assert C[0, 0] == pytest.approx(C[1, 1], rel=1e-6) == pytest.approx(C[2, 2], rel=1e-6)
        assert C[0, 1] == pytest.approx(C[0, 2], rel=1e-6) == pytest.approx(C[1, 2], rel=1e-6)
        assert C[3, 3] == pytest.approx(C[4, 4], rel=1e-6) == pytest.approx(C[5, 5], rel=1e-6)
        assert np.allclose(C[:3, 3:], 0.0, atol=1e-6)
        assert np.allclose(C[3:, 3:] - np.diag(np.diag(C[3:, 3:])), 0.0, atol=1e-6)

    def test_energy_and_stress_routes_agree(self, spring_fcc):
        s, p, _ = spring_fcc
        by_energy = elastic_tensor(s, p, method="energy")
        by_stress = elastic_tensor(s, p, method="stress")
        big = np.abs(by_energy.C) > 0.1
        assert np.allclose(by_stress.C[big], by_energy.C[big], rtol=0.02)
        assert by_stress.asymmetry < 0.02

    def test_stability_and_moduli(self, spring_fcc):
        s, p, a = spring_fcc
        tensor = elastic_tensor(s, p)
        assert tensor.is_stable
        assert tensor.voigt_bulk_gpa == pytest.approx(4.0 / (3.0 * a) * cfg.EV_PER_A3_TO_GPA, rel=1e-3)
        assert tensor.to_dict()["mechanically_stable"] is True
        assert list(tensor.to_frame().columns) == ["row", "C1", "C2", "C3", "C4", "C5", "C6"]

    def test_bulk_modulus_is_rotation_invariant(self, spring_fcc):
        s, p, _ = spring_fcc
        R = Rotation.from_euler("zyx", [20.0, 35.0, -10.0], degrees=True).as_matrix()
        rotated = Structure(s.species, s.frac_coords, s.lattice @ R.T)
        assert elastic_tensor(rotated, p).voigt_bulk_gpa == pytest.approx(elastic_tensor(s, p).voigt_bulk_gpa, rel=1e-3)

    def test_relaxed_ions_match_for_a_centrosymmetric_crystal(self, spring_fcc):
        s, p, _ = spring_fcc
        clamped = elastic_tensor(s, p)
        relaxed = elastic_tensor(s, p, relax_ions=True, f_tol=1e-6)
        assert np.allclose(relaxed.C, clamped.C, atol=1e-5)
        assert relaxed.relaxed_ions

    def test_bad_arguments(self, spring_fcc):
        s, p, _ = spring_fcc
        with pytest.raises(MechanicsError):
            elastic_tensor(s, p, delta=0.0)
        with pytest.raises(MechanicsError, match="unknown method"):
            elastic_tensor(s, p, method="virial")


class TestShearCurve:
    def test_sine_has_its_maximum_at_a_quarter(self):
        gamma = 0.01 * np.arange(-1, 51)
        volume, amplitude = 10.0, 0.05
        energy = volume * amplitude * (1.0 - np.cos(2.0 * np.pi * gamma)) / (2.0 * np.pi)
        tau, instability, tau_max, gamma_max = shear_curve(gamma, energy, volume)
        assert instability
        assert gamma_max == pytest.approx(0.25)
        assert tau_max == pytest.approx(amplitude, rel=1e-3)
        assert tau[1] == pytest.approx(0.0, abs=1e-6)

    def test_quadratic_has_no_instability(self):
        gamma = 0.02 * np.arange(-1, 11)
        tau, instability, tau_max, gamma_max = shear_curve(gamma, 3.0 * 0.5 * 2.0 * gamma ** 2, 3.0)
        assert np.allclose(tau, 2.0 * gamma)
        assert not instability
        assert tau_max is None and gamma_max is None

    def test_shear_deformation(self):
        F = shear_deformation([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], 0.1)
        assert np.allclose(np.array([0.0, 0.0, 2.0]) @ F, [0.2, 0.0, 2.0])


class TestIdealShear:
    def test_small_strain_slope_is_the_shear_modulus(self, spring_fcc):
        s, p, a = spring_fcc
        curve = ideal_shear(s, p, step=0.01, gamma_max=0.1, relax_ions=False)
        assert curve.gamma[0] == pytest.approx(-0.01)
        assert curve.gamma[-1] == pytest.approx(0.1)
        assert curve.tau[1] == pytest.approx(0.0, abs=1e-8)
        assert curve.tau[2] / curve.gamma[2] == pytest.approx(1.0 / a, rel=0.05)

    def test_step_outside_the_allowed_range(self, spring_fcc):
        s, p, _ = spring_fcc
        with pytest.raises(MechanicsError, match="outside"):
            ideal_shear(s, p, step=0.2)

    def test_direction_must_lie_in_the_plane(self, spring_fcc):
        s, p, _ = spring_fcc
        with pytest.raises(MechanicsError, match="shear plane"):
            ideal_shear(s, p, normal=(0, 0, 1), direction=(0, 0, 1))
