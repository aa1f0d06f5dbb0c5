import numpy as np
import pytest

from conftest import fcc
from utils._errors import StructureError
from utils._structure import (
    Structure,
    build_neighbor_list,
    frac_to_cart,
    make_supercell,
    min_image_distance,
    wrap_fractional,
)


class TestStructure:
    def test_coordinates_are_wrapped(self):
        s = Structure(["Ar"], [[1.25, -0.25, 3.0]], np.eye(3) * 2.0)
        assert np.allclose(s.frac_coords, [[0.25, 0.75, 0.0]])
        assert np.all((s.frac_coords >= 0.0) & (s.frac_coords < 1.0))

    def test_wrap_is_idempotent(self):
        frac = np.array([[0.999999999, -1e-17, 0.5], [2.5, -3.75, 1.0]])
        once = wrap_fractional(frac)
        assert np.array_equal(wrap_fractional(once), once)

    def test_left_handed_lattice_is_rejected(self):
        with pytest.raises(StructureError, match="right-handed"):
            Structure(["Ar"], [[0, 0, 0]], np.diag([1.0, 1.0, -1.0]))

    def test_unknown_element_is_rejected(self):
        with pytest.raises(StructureError, match="unknown element"):
            Structure(["Xx"], [[0, 0, 0]], np.eye(3))

    def test_species_count_must_match(self):
        with pytest.raises(StructureError):
            Structure(["Ar", "Ar"], [[0, 0, 0]], np.eye(3))

    def test_composition_and_volume(self):
        s = Structure(["Ca", "Ca", "O"], [[0, 0, 0], [0.5, 0.5, 0.5], [0.5, 0, 0]], np.eye(3) * 3.0)
        assert s.composition == {"Ca": 2, "O": 1}
        assert s.volume == pytest.approx(27.0)
        assert s.n_atoms == 3

    def test_content_hash_ignores_tags(self):
        s = fcc(4.0)
        assert s.content_hash() == s.with_tags(comment="x").content_hash()
        assert s.content_hash() != fcc(4.01).content_hash()


class TestFracToCart:
    def test_diagonal_lattice(self):
        s = Structure(["Ar"], [[0.5, 0.5, 0.5]], np.eye(3) * 2.0)
        assert np.allclose(frac_to_cart(s, 0), [1.0, 1.0, 1.0])

    def test_origin(self):
        s = Structure(["Ar"], [[0.0, 0.0, 0.0]], [[2, 0, 0], [1, 2, 0], [0.3, 0.2, 3]])
        assert np.allclose(frac_to_cart(s, 0), 0.0)

    def test_triclinic(self):
        s = Structure(["Ar"], [[0.5, 0.5, 0.0]], [[2, 0, 0], [1, 2, 0], [0, 0, 3]])
        assert np.allclose(frac_to_cart(s, 0), [1.5, 1.0, 0.0])

    def test_index_out_of_range(self):
        with pytest.raises(StructureError):
            frac_to_cart(fcc(4.0), 4)


class TestMinImageDistance:
    def test_periodic_wrap(self):
        s = Structure(["Ar", "Ar"], [[0.1, 0, 0], [0.9, 0, 0]], np.eye(3) * 10.0)
        assert min_image_distance(s, 0, 1) == pytest.approx(2.0)

    def test_same_atom(self):
        assert min_image_distance(fcc(4.0), 2, 2) == 0.0

    def test_body_diagonal(self):
        s = Structure(["Ar", "Ar"], [[0, 0, 0], [0.5, 0.5, 0.5]], np.eye(3) * 4.0)
        assert min_image_distance(s, 0, 1) == pytest.approx(2.0 * np.sqrt(3.0))

    def test_skewed_cell_matches_brute_force(self):
        lattice = np.array([[3.0, 0.0, 0.0], [2.9, 0.5, 0.0], [2.8, 0.3, 0.6]])
        s = Structure(["Ar", "Ar"], [[0.1, 0.2, 0.3], [0.8, 0.55, 0.9]], lattice)
        shifts = np.array([[i, j, k] for i in range(-6, 7) for j in range(-6, 7) for k in range(-6, 7)])
        delta = s.frac_coords[1] - s.frac_coords[0]
        brute = np.min(np.linalg.norm((delta + shifts) @ lattice, axis=1))
        assert min_image_distance(s, 0, 1) == pytest.approx(brute)


class TestNeighborList:
    def test_single_atom_cubic(self):
        s = Structure(["Ar"], [[0, 0, 0]], np.eye(3) * 3.0)
        nl = build_neighbor_list(s, 3.1)
        assert len(nl) == 6
        assert np.allclose(nl.distances, 3.0)
        assert sorted(tuple(o) for o in nl.offsets) == sorted(
            [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        )

    def test_cutoff_below_shortest_distance(self):
        assert len(build_neighbor_list(fcc(4.0), 2.0)) == 0

    def test_fcc_has_twelve_neighbors(self):
        nl = build_neighbor_list(fcc(4.0), 2.9)
        counts = np.bincount(nl.i, minlength=4)
        assert np.all(counts == 12)
        assert np.allclose(nl.distances, 4.0 / np.sqrt(2.0))

    def test_pairs_are_symmetric(self):
        nl = build_neighbor_list(fcc(4.0), 4.5)
        forward = {(a, b, o) for a, b, o, _, _ in nl.pairs}
        assert all((b, a, tuple(-x for x in o)) in forward for a, b, o in forward)

    def test_nonpositive_cutoff(self):
        with pytest.raises(StructureError):
            build_neighbor_list(fcc(4.0), 0.0)


class TestSupercell:
    def test_identity_repeat(self):
        s = fcc(4.0)
        sc = make_supercell(s, (1, 1, 1))
        assert np.allclose(sc.structure.frac_coords, s.frac_coords)
        assert np.allclose(sc.structure.lattice, s.lattice)

    def test_atom_count(self):
        s = Structure(["Ca", "O"], [[0, 0, 0], [0.5, 0.5, 0.5]], np.eye(3) * 3.0)
        sc = make_supercell(s, (2, 2, 2))
        assert sc.structure.n_atoms == 16
        assert sc.structure.composition == {"Ca": 8, "O": 8}
        assert sc.structure.volume == pytest.approx(8.0 * s.volume)
        assert sc.map.shape == (16, 4)

    def test_energy_per_atom_is_intensive(self, lj, lj_fcc):
        sc = make_supercell(lj_fcc, (2, 1, 3)).structure
        assert lj.energy(sc) / sc.n_atoms == pytest.approx(lj.energy(lj_fcc) / lj_fcc.n_atoms, rel=1e-10)

    def test_size_limit(self):
        with pytest.raises(StructureError, match="exceeds"):
            make_supercell(fcc(4.0), (3, 3, 3), max_atoms=100)
