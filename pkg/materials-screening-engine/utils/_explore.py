"""
Candidate generation

- generate_candidates: random crystals of a fixed stoichiometry by rejection sampling
  (lattice from sampled lengths/angles scaled to a sampled volume, atoms placed one by one
  under a per-pair minimum distance)
- enumerate_substitutions: distinct dopant occupations of a host's target sites
- rank_stabilization: best-occupation change in formation energy per dopant x site
"""

from concurrent.futures import ThreadPoolExecutor
from itertools import combinations, product
from math import comb
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

import config as cfg
from utils._elements import covalent_radius, element_info
from utils._errors import GenerationError, SubstitutionError
from utils._helper import get_logger
from utils._structure import Structure, perpendicular_widths

logger = get_logger("explore")

# placements of one atom before the whole trial structure is discarded
_ATOM_TRIES = 200


def formula(composition):
    return "".join(f"{x}{n if n != 1 else ''}" for x, n in composition.items())


class GeneratorSpec(BaseModel):
    composition: Dict[str, int] = Field(..., description="Element -> count per cell, kept exactly")
    max_atoms: int = Field(30, ge=1)
    volume_per_atom: Tuple[float, float] = Field((8.0, 25.0), description="A^3, sampled uniformly")
    length_ratio_max: float = Field(2.0, ge=1.0, description="Longest / shortest lattice vector")
    angle_range: Tuple[float, float] = Field((60.0, 120.0), description="Cell angles, degrees")
    min_distance_scale: float = Field(0.7, gt=0, description="Multiple of summed covalent radii")
    min_distances: Dict[str, float] = Field(default_factory=dict, description="Overrides keyed 'A-B', A")
    max_attempts: int = Field(2000, ge=1, description="Trial structures per accepted structure")
    seed: int = Field(0, ge=0)

    @field_validator("composition")
    @classmethod
    def _composition(cls, value):
        if not value:
            raise ValueError("composition is empty")
        unknown = sorted(set(value) - set(element_info))
        if unknown:
            raise ValueError(f"unknown element symbol(s): {', '.join(unknown)}")
        if any(n < 1 for n in value.values()):
            raise ValueError("composition counts must be >= 1")
        return value

    @model_validator(mode="after")
    def _ranges(self):
        if sum(self.composition.values()) > self.max_atoms:
            raise ValueError(f"{sum(self.composition.values())} atoms exceed max_atoms {self.max_atoms}")
        lo, hi = self.volume_per_atom
        if not 0 < lo <= hi:
            raise ValueError("volume_per_atom must be a positive ascending range")
        lo, hi = self.angle_range
        if not 0 < lo <= hi < 180:
            raise ValueError("angle_range must lie inside (0, 180) degrees")
        if any(d <= 0 for d in self.min_distances.values()):
            raise ValueError("minimum distances must be positive")
        return self

    @property
    def species(self):
        return [x for x, n in self.composition.items() for _ in range(n)]

    def min_distance(self, a, b):
        for key in (f"{a}-{b}", f"{b}-{a}"):
            if key in self.min_distances:
                return self.min_distances[key]
        return self.min_distance_scale * (covalent_radius(a) + covalent_radius(b))

    def distance_matrix(self):
        symbols = list(self.composition)
        return {(a, b): self.min_distance(a, b) for a in symbols for b in symbols}


def lattice_from_parameters(a, b, c, alpha, beta, gamma):
    """Rows: a along x, b in the xy plane. None when the angles admit no cell."""
    alpha, beta, gamma = np.radians([alpha, beta, gamma])
    cx = np.cos(beta)
    cy = (np.cos(alpha) - np.cos(beta) * np.cos(gamma)) / np.sin(gamma)
    cz_sq = 1.0 - cx * cx - cy * cy
    if cz_sq <= 1.0e-6:
        return None
    return np.array([
        [a, 0.0, 0.0],
        [b * np.cos(gamma), b * np.sin(gamma), 0.0],
        [c * cx, c * cy, c * np.sqrt(cz_sq)],
    ])


def _sample_lattice(spec, rng, n_atoms):
    lo, hi = spec.angle_range
    lattice = None
    while lattice is None:
        angles = rng.uniform(lo, hi, 3)
        lengths = rng.uniform(1.0, spec.length_ratio_max, 3)
        lattice = lattice_from_parameters(*lengths, *angles)
    volume = rng.uniform(*spec.volume_per_atom) * n_atoms
    return lattice * (volume / np.linalg.det(lattice)) ** (1.0 / 3.0)


def _images(lattice, reach_distance):
    reach = np.ceil(reach_distance / perpendicular_widths(lattice) + 0.5).astype(int)
    return np.array(list(product(*(range(-r, r + 1) for r in reach))), dtype=float)


def _fits(frac, placed, placed_species, symbol, lattice, images, spec):
    if not placed:
        return True
    delta = np.asarray(placed) - frac
    delta -= np.round(delta)
    vectors = (delta[:, None, :] + images[None, :, :]) @ lattice
    shortest = np.min(np.linalg.norm(vectors, axis=2), axis=1)
    limits = np.array([spec.min_distance(symbol, other) for other in placed_species])
    return bool(np.all(shortest >= limits))


def _self_images_ok(lattice, spec, images):
    vectors = images[np.any(images != 0, axis=1)] @ lattice
    shortest = float(np.min(np.linalg.norm(vectors, axis=1)))
    return all(shortest >= spec.min_distance(x, x) for x in spec.composition)


def _trial(spec, rng, species):
    lattice = _sample_lattice(spec, rng, len(species))
    longest = max(spec.min_distance(a, b) for a in spec.composition for b in spec.composition)
    images = _images(lattice, longest)
    if not _self_images_ok(lattice, spec, images):
        return None
    placed, placed_species = [], []
    for symbol in species:
        for _ in range(_ATOM_TRIES):
            frac = rng.random(3)
            if _fits(frac, placed, placed_species, symbol, lattice, images, spec):
                placed.append(frac)
                placed_species.append(symbol)
                break
        else:
            return None
    return Structure(species, np.array(placed), lattice)


def _generate_one(spec, index):
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    species = spec.species
    for attempt in range(1, spec.max_attempts + 1):
        s = _trial(spec, rng, species)
        if s is not None:
            return s.with_tags(formula=formula(spec.composition), generator_seed=spec.seed, generator_index=index), attempt
    raise GenerationError(
        f"no valid {formula(spec.composition)} structure after {spec.max_attempts} attempts "
        f"(acceptance rate 0/{spec.max_attempts})",
        acceptance_rate=0.0,
    )


def generate_candidates(spec, count, start=0, max_workers=None):
    """
    Structure k is drawn from its own stream SeedSequence([seed, start + k]), so the pool
    is identical whatever the worker count.
    """
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers
    indices = list(range(start, start + count))
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        results = list(executor.map(lambda k: _generate_one(spec, k), indices))
    structures = [s for s, _ in results]
    attempts = sum(a for _, a in results)
    rate = count / attempts if attempts else 1.0
    logger.info(f"generate_candidates() - {count} x {formula(spec.composition)}, acceptance rate {rate:.3f}")

    hashes = [s.content_hash() for s in structures]
    if len(set(hashes)) != len(hashes):
        raise GenerationError("duplicate structures in the generated pool", acceptance_rate=rate)
    return structures


class SubstitutionSpec(BaseModel):
    host: Any = Field(..., description="Host Structure")
    dopant: str
    site: str = Field(..., description="Host species whose sites are substituted")
    concentration: float = Field(0.10, gt=0, le=1, description="Fraction of the target sites")
    occupations: int = Field(3, ge=1, description="Distinct site subsets requested")
    seed: int = Field(0, ge=0)

    @field_validator("host")
    @classmethod
    def _host(cls, value):
        if not isinstance(value, Structure):
            raise ValueError("host must be a Structure")
        return value

    @field_validator("dopant", "site")
    @classmethod
    def _element(cls, value):
        if value not in element_info:
            raise ValueError(f"unknown element symbol '{value}'")
        return value


# exhaustive enumeration below this many subsets, rejection sampling above
_EXHAUSTIVE_LIMIT = 20000


def substitution_count(n_sites, concentration):
    return int(np.floor(concentration * n_sites + 0.5))


def enumerate_substitutions(spec):
    host = spec.host
    if spec.dopant == spec.site:
        raise SubstitutionError(f"dopant {spec.dopant} is the target species itself")
    sites = [k for k, x in enumerate(host.species) if x == spec.site]
    if not sites:
        raise SubstitutionError(f"host has no {spec.site} sites")
    n_sub = substitution_count(len(sites), spec.concentration)
    if n_sub < 1:
        raise SubstitutionError(
            f"concentration {spec.concentration} of {len(sites)} {spec.site} sites rounds to no substitution"
        )
    available = comb(len(sites), n_sub)
    if spec.occupations > available:
        raise SubstitutionError(
            f"{spec.occupations} occupations requested but only {available} distinct subsets of "
            f"{n_sub} out of {len(sites)} {spec.site} sites exist"
        )

    rng = np.random.default_rng(spec.seed)
    if available <= _EXHAUSTIVE_LIMIT:
        subsets = list(combinations(sites, n_sub))
        picked = rng.choice(len(subsets), size=spec.occupations, replace=False)
        chosen = [subsets[k] for k in picked]
    else:
        seen = set()
        chosen = []
        while len(chosen) < spec.occupations:
            subset = tuple(sorted(rng.choice(sites, size=n_sub, replace=False).tolist()))
            if subset not in seen:
                seen.add(subset)
                chosen.append(subset)

    doped = []
    for subset in sorted(chosen):
        species = list(host.species)
        for k in subset:
            species[k] = spec.dopant
        label = f"{spec.dopant}@{spec.site}:" + ",".join(str(k) for k in subset)
        doped.append(host.with_species(species, tags={**host.tags, "substitution": label}))
    return doped


class FormationEnergy(BaseModel):
    value: float = Field(..., description="Delta G_form, eV/atom")
    temperature: float = Field(..., description="K")
    pressure: float = Field(0.0, description="eV/A^3")
    dopant: Optional[str] = None
    site: Optional[str] = None
    occupation: Optional[str] = None


def stabilization_bucket(ddg):
    if ddg < 0:
        return "blue"
    if ddg > 0:
        return "red"
    return "neutral"


def rank_stabilization(host, doped):
    """
    Rows (dopant, site, ddG = min over occupations of G_doped - G_host, best occupation, bucket).
    Negative ddG is stabilizing and lands in the "blue" bucket.
    """
    groups = {}
    for entry in doped:
        if entry.temperature != host.temperature or entry.pressure != host.pressure:
            raise SubstitutionError(
                f"doped entry at T={entry.temperature} K, p={entry.pressure} does not match the host "
                f"at T={host.temperature} K, p={host.pressure}"
            )
        groups.setdefault((entry.dopant, entry.site), []).append(entry)

    rows = []
    for (dopant, site), entries in sorted(groups.items()):
        best = min(entries, key=lambda x: (x.value, x.occupation or ""))
        ddg = best.value - host.value
        rows.append({
            "dopant": dopant,
            "site": site,
            "temperature_K": host.temperature,
            "ddG_eV_per_atom": ddg,
            "best_occupation": best.occupation,
            "occupations": len(entries),
            "bucket": stabilization_bucket(ddg),
        })
    return rows


def heatmap_frame(rows):
    """dopant x site matrix of ddG, one block per temperature (and per host when rows carry one)."""
    df = pd.DataFrame(rows)
    if df.empty:
        return df
    index = [c for c in ("host", "temperature_K", "dopant") if c in df.columns]
    return df.pivot_table(index=index, columns="site", values="ddG_eV_per_atom").reset_index()
