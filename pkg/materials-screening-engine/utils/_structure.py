"""
Periodic crystal data model M = (species, fractional coordinates, lattice)

Lattice vectors are stored as rows; Cartesian positions are frac_coords @ lattice.
Structures are immutable values: every geometry change builds a new Structure.
"""

from dataclasses import dataclass, field
from itertools import product
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

import config as cfg
from utils._elements import atomic_mass, check_element
from utils._errors import StructureError
from utils._helper import content_hash

_SNAP_TOL = 1.0e-12


def wrap_fractional(frac):
    """Map fractional coordinates into [0, 1); idempotent."""
    wrapped = np.asarray(frac, dtype=float) - np.floor(frac)
    wrapped[wrapped >= 1.0] = 0.0
    return wrapped


def perpendicular_widths(lattice):
    """Distances between opposite cell faces, one per lattice vector."""
    lattice = np.asarray(lattice, dtype=float)
    volume = abs(np.linalg.det(lattice))
    widths = np.empty(3)
    for a in range(3):
        b, c = lattice[(a + 1) % 3], lattice[(a + 2) % 3]
        widths[a] = volume / np.linalg.norm(np.cross(b, c))
    return widths


def lattice_parameters(lattice):
    """(a, b, c, alpha, beta, gamma) in Angstrom and degrees."""
    lattice = np.asarray(lattice, dtype=float)
    lengths = np.linalg.norm(lattice, axis=1)

    def angle(u, v):
        cosine = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
        return float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))

    return (
        float(lengths[0]), float(lengths[1]), float(lengths[2]),
        angle(lattice[1], lattice[2]), angle(lattice[0], lattice[2]), angle(lattice[0], lattice[1]),
    )


@dataclass(frozen=True, eq=False)
class Structure:
    species: tuple
    frac_coords: np.ndarray
    lattice: np.ndarray
    tags: dict = field(default_factory=dict)
    # exact Cartesian input, kept only when no atom had to be wrapped
    _cart: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        species = tuple(str(x) for x in self.species)
        for symbol in species:
            check_element(symbol)
        frac = np.array(self.frac_coords, dtype=float).reshape(-1, 3)
        lattice = np.array(self.lattice, dtype=float)
        if lattice.shape != (3, 3):
            raise StructureError(f"lattice must be 3x3, got shape {lattice.shape}")
        if len(species) < 1 or len(species) != len(frac):
            raise StructureError(f"species count {len(species)} does not match {len(frac)} coordinate rows")
        if not np.all(np.isfinite(frac)) or not np.all(np.isfinite(lattice)):
            raise StructureError("non-finite coordinates or lattice")
        if np.linalg.det(lattice) <= 0.0:
            raise StructureError("lattice must be right-handed with nonzero volume (det(L) > 0)")
        frac = wrap_fractional(frac)
        frac.setflags(write=False)
        lattice.setflags(write=False)
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "frac_coords", frac)
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "tags", dict(self.tags))
        if self._cart is not None:
            cart = np.array(self._cart, dtype=float)
            cart.setflags(write=False)
            object.__setattr__(self, "_cart", cart)

    @classmethod
    def from_cartesian(cls, species, cart_coords, lattice, tags=None):
        cart = np.asarray(cart_coords, dtype=float).reshape(-1, 3)
        lattice = np.asarray(lattice, dtype=float)
        if lattice.shape != (3, 3) or np.linalg.det(lattice) <= 0.0:
            raise StructureError("lattice must be right-handed with nonzero volume (det(L) > 0)")
        frac = np.linalg.solve(lattice.T, cart.T).T
        # coordinates within rounding noise of a cell face stay in the home cell
        shift = np.floor(frac + _SNAP_TOL)
        frac = frac - shift
        frac[(frac < 0.0) & (frac > -_SNAP_TOL)] = 0.0
        exact = cart if not np.any(shift) else None
        return cls(species, frac, lattice, tags or {}, exact)

    @property
    def n_atoms(self):
        return len(self.species)

    @property
    def volume(self):
        return float(np.linalg.det(self.lattice))

    @property
    def cart_coords(self):
        if self._cart is not None:
            return self._cart
        return self.frac_coords @ self.lattice

    @property
    def masses(self):
        return np.array([atomic_mass(x) for x in self.species])

    @property
    def composition(self):
        counts = {}
        for symbol in self.species:
            counts[symbol] = counts.get(symbol, 0) + 1
        return counts

    def with_cartesian(self, cart_coords, tags=None):
        return Structure.from_cartesian(self.species, cart_coords, self.lattice, self.tags if tags is None else tags)

    def with_species(self, species, tags=None):
        return Structure(species, self.frac_coords, self.lattice, self.tags if tags is None else tags)

    def with_tags(self, **tags):
        merged = dict(self.tags)
        merged.update(tags)
        return Structure(self.species, self.frac_coords, self.lattice, merged, self._cart)

    def deformed(self, deformation):
        """Affine deformation: L -> L F, fractional coordinates unchanged."""
        return Structure(self.species, self.frac_coords, self.lattice @ np.asarray(deformation, dtype=float), self.tags)

    def content_hash(self):
        return content_hash(" ".join(self.species), self.frac_coords, self.lattice)

    def lattice_parameters(self):
        return lattice_parameters(self.lattice)


@dataclass(frozen=True)
class NeighborList:
    cutoff: float
    i: np.ndarray
    j: np.ndarray
    offsets: np.ndarray
    distances: np.ndarray
    vectors: np.ndarray

    def __len__(self):
        return len(self.i)

    @property
    def pairs(self):
        return [
            (int(a), int(b), tuple(int(x) for x in o), float(d), v.copy())
            for a, b, o, d, v in zip(self.i, self.j, self.offsets, self.distances, self.vectors)
        ]


@dataclass(frozen=True)
class Supercell:
    base: Structure
    repeat: tuple
    structure: Structure
    # rows: (base index, cell offset n1, n2, n3)
    map: np.ndarray


def frac_to_cart(s, i):
    if not 0 <= i < s.n_atoms:
        raise StructureError(f"atom index {i} out of range for {s.n_atoms} atoms")
    return s.frac_coords[i] @ s.lattice


def min_image_distance(s, i, j):
    """
    Shortest periodic distance between atoms i and j.

    The search starts from the wrapped difference vector and enumerates every lattice
    translation that could still be shorter, so it stays exact for strongly skewed
    or small cells where a plain 27-image search is not.
    """
    for k in (i, j):
        if not 0 <= k < s.n_atoms:
            raise StructureError(f"atom index {k} out of range for {s.n_atoms} atoms")
    if i == j:
        return 0.0
    delta = s.frac_coords[j] - s.frac_coords[i]
    delta = delta - np.round(delta)
    d0 = float(np.linalg.norm(delta @ s.lattice))
    reach = np.ceil(d0 / perpendicular_widths(s.lattice)).astype(int)
    ranges = [range(-int(r), int(r) + 1) for r in reach]
    images = np.array(list(product(*ranges)), dtype=float)
    vectors = (delta + images) @ s.lattice
    return float(np.min(np.linalg.norm(vectors, axis=1)))


def _image_offsets(lattice, cutoff):
    reach = np.ceil(cutoff / perpendicular_widths(lattice)).astype(int)
    ranges = [range(-int(r), int(r) + 1) for r in reach]
    return np.array(list(product(*ranges)), dtype=int)


def build_neighbor_list(s, cutoff):
    """
    All periodic pairs (i, j, image offset) with |r_j + offset @ L - r_i| <= cutoff.

    Periodic images are replicated as far as the cutoff reaches through each face and a
    KD-tree answers the range query, so small cells (any lattice vector < 2 cutoff) are
    handled by the same path as large ones.
    """
    if cutoff <= 0.0:
        raise StructureError("cutoff must be positive")
    cart = s.frac_coords @ s.lattice
    offsets = _image_offsets(s.lattice, cutoff)
    n = s.n_atoms
    shifts = offsets @ s.lattice
    extended = (cart[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
    ext_index = np.tile(np.arange(n), len(offsets))
    ext_offset = np.repeat(offsets, n, axis=0)

    tree_center = cKDTree(cart)
    tree_ext = cKDTree(extended)
    found = tree_center.sparse_distance_matrix(tree_ext, cutoff, output_type="ndarray")
    i = np.asarray(found["i"], dtype=int)
    k = np.asarray(found["j"], dtype=int)
    j = ext_index[k]
    off = ext_offset[k]
    vectors = extended[k] - cart[i]
    distances = np.linalg.norm(vectors, axis=1)
    keep = (distances > 1.0e-10) & (distances <= cutoff + 1.0e-9)
    i, j, off, vectors, distances = i[keep], j[keep], off[keep], vectors[keep], distances[keep]

    order = np.lexsort((off[:, 2], off[:, 1], off[:, 0], j, i))
    return NeighborList(
        cutoff=float(cutoff),
        i=i[order],
        j=j[order],
        offsets=off[order],
        distances=distances[order],
        vectors=vectors[order],
    )


def make_supercell(s, repeat, max_atoms=None):
    repeat = tuple(int(x) for x in repeat)
    if len(repeat) != 3 or min(repeat) < 1:
        raise StructureError(f"repeat must be three integers >= 1, got {repeat}")
    max_atoms = cfg.max_supercell_atoms if max_atoms is None else max_atoms
    total = s.n_atoms * repeat[0] * repeat[1] * repeat[2]
    if total > max_atoms:
        raise StructureError(f"supercell of {total} atoms exceeds the configured maximum of {max_atoms}")

    cells = np.array(list(product(range(repeat[0]), range(repeat[1]), range(repeat[2]))), dtype=int)
    n = s.n_atoms
    frac = (s.frac_coords[None, :, :] + cells[:, None, :]) / np.array(repeat, dtype=float)
    frac = frac.reshape(-1, 3)
    species = tuple(s.species) * len(cells)
    mapping = np.column_stack([np.tile(np.arange(n), len(cells)), np.repeat(cells, n, axis=0)])
    lattice = s.lattice * np.array(repeat, dtype=float)[:, None]
    tags = dict(s.tags)
    tags["supercell"] = list(repeat)
    return Supercell(base=s, repeat=repeat, structure=Structure(species, frac, lattice, tags), map=mapping)
