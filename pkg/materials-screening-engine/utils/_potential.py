"""
Interatomic potentials

Every potential answers evaluate(structure) -> EvalResult(energy eV, forces eV/A, stress eV/A^3).

Stress convention: sigma = (1/V) dE/d(epsilon) for a homogeneous strain r -> r (I + epsilon),
so a compressed crystal has negative diagonal stress and pressure = -trace(sigma) / 3.
For pair terms this is the virial (1/2V) sum_ij phi'(r_ij) r_ij (x) r_ij / r_ij.

- PairPotential family (numpy, analytic derivatives): LennardJones, Morse, HarmonicPair, ZeroPotential
- TorchPotential family (autograd): OraclePotential (synthetic ground truth), DescriptorPotential (trainable)
- EnsemblePotential: arithmetic mean of members, spread used as uncertainty
"""

import json
import math
from dataclasses import dataclass
from itertools import combinations
from typing import NamedTuple, Optional

import numpy as np
import torch
from pydantic import BaseModel, Field

import config as cfg
from utils._elements import atomic_number, covalent_radius
from utils._errors import PotentialError
from utils._helper import get_logger
from utils._structure import build_neighbor_list

logger = get_logger("potential")

torch.set_default_dtype(torch.float64)


@dataclass(frozen=True, eq=False)
class EvalResult:
    energy: float
    forces: np.ndarray
    stress: np.ndarray
    # per-atom energy decomposition when the model has one
    energies: Optional[np.ndarray] = None

    @property
    def max_force(self):
        return float(np.max(np.linalg.norm(self.forces, axis=1))) if len(self.forces) else 0.0

    @property
    def pressure(self):
        return float(-np.trace(self.stress) / 3.0)


class Potential:
    """Base class. `species` is None when the model covers every element."""

    kind = "potential"
    species = None
    cutoff = 0.0

    def missing_species(self, symbols):
        if self.species is None:
            return []
        return sorted(set(symbols) - set(self.species))

    def check_species(self, s):
        missing = self.missing_species(s.species)
        if missing:
            raise PotentialError(f"{self.kind} potential does not cover species: {', '.join(missing)}")

    def evaluate(self, s):
        self.check_species(s)
        return self._evaluate(s)

    def energy(self, s):
        return self.evaluate(s).energy

    def _evaluate(self, s):
        raise NotImplementedError


# ---------------------------------------------------------------- analytic pair models

def _smooth_switch(r, r_on, r_off):
    """Quintic switch: 1 below r_on, 0 above r_off, C2 in between. Returns (S, dS/dr)."""
    if r_off <= r_on:
        return np.ones_like(r), np.zeros_like(r)
    x = np.clip((r - r_on) / (r_off - r_on), 0.0, 1.0)
    s = 1.0 - x ** 3 * (10.0 - 15.0 * x + 6.0 * x ** 2)
    ds = -30.0 * x ** 2 * (1.0 - x) ** 2 / (r_off - r_on)
    return s, ds


class PairPotential(Potential):
    kind = "pair"

    def __init__(self, cutoff, switch_width=0.0, species=None):
        self.cutoff = float(cutoff)
        self.switch_width = float(switch_width)
        self.species = None if species is None else tuple(sorted(species))

    def pair_energy(self, r):
        """phi(r) and phi'(r) for an array of distances."""
        raise NotImplementedError

    def _evaluate(self, s):
        n = s.n_atoms
        nl = build_neighbor_list(s, self.cutoff)
        energies = np.zeros(n)
        forces = np.zeros((n, 3))
        stress = np.zeros((3, 3))
        if len(nl):
            r = nl.distances
            phi, dphi = self.pair_energy(r)
            sw, dsw = _smooth_switch(r, self.cutoff - self.switch_width, self.cutoff)
            dphi = dphi * sw + phi * dsw
            phi = phi * sw
            # every unordered pair appears twice in the full list
            np.add.at(energies, nl.i, 0.5 * phi)
            unit = nl.vectors / r[:, None]
            np.add.at(forces, nl.i, dphi[:, None] * unit)
            stress = 0.5 * np.einsum("p,pa,pb->ab", dphi / r, nl.vectors, nl.vectors) / s.volume
        return EvalResult(float(energies.sum()), forces, 0.5 * (stress + stress.T), energies)


class LennardJones(PairPotential):
    kind = "lennard-jones"

    def __init__(self, epsilon=1.0, sigma=1.0, cutoff=None, switch_width=None, species=None):
        cutoff = 2.5 * sigma if cutoff is None else cutoff
        switch_width = 0.5 * sigma if switch_width is None else switch_width
        super().__init__(cutoff, switch_width, species)
        self.epsilon = float(epsilon)
        self.sigma = float(sigma)

    def pair_energy(self, r):
        sr6 = (self.sigma / r) ** 6
        phi = 4.0 * self.epsilon * (sr6 * sr6 - sr6)
        dphi = 4.0 * self.epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r
        return phi, dphi


class Morse(PairPotential):
    kind = "morse"

    def __init__(self, depth=1.0, stiffness=1.5, r0=2.5, cutoff=6.0, switch_width=1.0, species=None):
        super().__init__(cutoff, switch_width, species)
        self.depth = float(depth)
        self.stiffness = float(stiffness)
        self.r0 = float(r0)

    def pair_energy(self, r):
        x = np.exp(-self.stiffness * (r - self.r0))
        phi = self.depth * (x * x - 2.0 * x)
        dphi = self.depth * (-2.0 * self.stiffness * x * x + 2.0 * self.stiffness * x)
        return phi, dphi


class HarmonicPair(PairPotential):
    """Springs phi = k/2 (r - r0)^2 between every pair inside the cutoff."""

    kind = "harmonic"

    def __init__(self, k=1.0, r0=1.0, cutoff=1.5, species=None):
        super().__init__(cutoff, 0.0, species)
        self.k = float(k)
        self.r0 = float(r0)

    def pair_energy(self, r):
        return 0.5 * self.k * (r - self.r0) ** 2, self.k * (r - self.r0)


class ZeroPotential(Potential):
    kind = "zero"

    def _evaluate(self, s):
        return EvalResult(0.0, np.zeros((s.n_atoms, 3)), np.zeros((3, 3)), np.zeros(s.n_atoms))


# ---------------------------------------------------------------- autograd models

@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several structures flattened into one disjoint graph for batched autograd evaluation."""

    symbols: np.ndarray
    positions: np.ndarray
    atom_frame: np.ndarray
    i: np.ndarray
    j: np.ndarray
    shifts: np.ndarray
    pair_frame: np.ndarray
    volumes: np.ndarray
    n_atoms: np.ndarray

    @property
    def n_frames(self):
        return len(self.volumes)


def make_graph_batch(structures, cutoff):
    symbols, positions, atom_frame = [], [], []
    i, j, shifts, pair_frame = [], [], [], []
    volumes, n_atoms = [], []
    offset = 0
    for f, s in enumerate(structures):
        nl = build_neighbor_list(s, cutoff)
        symbols.extend(s.species)
        positions.append(s.cart_coords)
        atom_frame.append(np.full(s.n_atoms, f))
        i.append(nl.i + offset)
        j.append(nl.j + offset)
        shifts.append(nl.offsets @ s.lattice)
        pair_frame.append(np.full(len(nl), f))
        volumes.append(s.volume)
        n_atoms.append(s.n_atoms)
        offset += s.n_atoms
    return GraphBatch(
        symbols=np.array(symbols),
        positions=np.concatenate(positions),
        atom_frame=np.concatenate(atom_frame).astype(int),
        i=np.concatenate(i).astype(int),
        j=np.concatenate(j).astype(int),
        shifts=np.concatenate(shifts).reshape(-1, 3),
        pair_frame=np.concatenate(pair_frame).astype(int),
        volumes=np.array(volumes, dtype=float),
        n_atoms=np.array(n_atoms, dtype=int),
    )


def _cosine_cutoff(r, rc):
    return torch.where(r < rc, 0.5 * (torch.cos(math.pi * r / rc) + 1.0), torch.zeros_like(r))


class TorchPotential(Potential):
    """
    Models defined by per-atom energies of pair vectors; forces and stress come from autograd.

    Pair vectors are built as (r_j - r_i + shift) (I + epsilon_f) with one zero strain tensor
    per frame, so dE/d(epsilon_f) / V_f is the stress of frame f.
    """

    def atomic_energies(self, batch, vectors):
        raise NotImplementedError

    def predict_batch(self, batch, create_graph=False):
        with torch.enable_grad():
            pos = torch.tensor(batch.positions, requires_grad=True)
            strain = torch.zeros((batch.n_frames, 3, 3), requires_grad=True)
            deform = torch.eye(3) + strain
            i = torch.as_tensor(batch.i)
            j = torch.as_tensor(batch.j)
            base = pos[j] - pos[i] + torch.as_tensor(batch.shifts)
            vectors = torch.einsum("pa,pab->pb", base, deform[torch.as_tensor(batch.pair_frame)])
            atomic = self.atomic_energies(batch, vectors)
            energy = torch.zeros(batch.n_frames).index_add(0, torch.as_tensor(batch.atom_frame), atomic)
            grad_pos = grad_strain = None
            if energy.requires_grad:
                grad_pos, grad_strain = torch.autograd.grad(
                    energy.sum(), [pos, strain], create_graph=create_graph, allow_unused=True
                )
        if grad_pos is None:
            grad_pos = torch.zeros_like(pos)
        if grad_strain is None:
            grad_strain = torch.zeros_like(strain)
        stress = 0.5 * (grad_strain + grad_strain.transpose(1, 2)) / torch.as_tensor(batch.volumes)[:, None, None]
        return energy, -grad_pos, stress, atomic

    def evaluate_batch(self, batch):
        """One EvalResult for a single-frame batch."""
        energy, forces, stress, atomic = self.predict_batch(batch)
        return EvalResult(
            float(energy[0].detach()),
            forces.detach().numpy().copy(),
            stress[0].detach().numpy().copy(),
            atomic.detach().numpy().copy(),
        )

    def _evaluate(self, s):
        return self.evaluate_batch(make_graph_batch([s], self.cutoff))


class OracleSpec(BaseModel):
    seed: int = Field(0, description="Seed from which every pair parameter is derived")
    cutoff: float = Field(6.0, gt=0, description="Pair cutoff, Angstrom")
    three_body_cutoff: float = Field(3.2, gt=0, description="Angular term cutoff, Angstrom")
    three_body_strength: float = Field(0.3, ge=0, description="Angular term prefactor, eV")
    depth_range: tuple[float, float] = Field((0.3, 1.0), description="Morse well depth range, eV")
    stiffness_range: tuple[float, float] = Field((1.2, 1.8), description="Morse stiffness range, 1/Angstrom")
    radius_scale_range: tuple[float, float] = Field(
        (1.0, 1.2), description="Morse equilibrium distance range as multiples of summed covalent radii"
    )
    onsite: dict[str, float] = Field(default_factory=dict, description="Per-element onsite energies, eV")


class OraclePotential(TorchPotential):
    """
    Synthetic ground truth: seeded Morse pairs under a cosine cutoff, a bond-angle penalty
    around the tetrahedral angle and per-element onsite energies. Pair parameters depend
    only on (seed, Z_a, Z_b), so the oracle covers every element.
    """

    kind = "oracle"

    def __init__(self, spec):
        self.spec = spec
        self.cutoff = float(max(spec.cutoff, spec.three_body_cutoff))
        self._cache = {}

    def pair_parameters(self, a, b):
        key = tuple(sorted((atomic_number(a), atomic_number(b))))
        if key not in self._cache:
            rng = np.random.default_rng(np.random.SeedSequence([self.spec.seed, key[0], key[1]]))
            depth = rng.uniform(*self.spec.depth_range)
            stiffness = rng.uniform(*self.spec.stiffness_range)
            r0 = (covalent_radius(a) + covalent_radius(b)) * rng.uniform(*self.spec.radius_scale_range)
            self._cache[key] = (depth, stiffness, r0)
        return self._cache[key]

    def atomic_energies(self, batch, vectors):
        n = len(batch.symbols)
        onsite = torch.tensor([self.spec.onsite.get(x, 0.0) for x in batch.symbols])
        if len(batch.i) == 0:
            return onsite
        params = np.array([self.pair_parameters(a, b) for a, b in zip(batch.symbols[batch.i], batch.symbols[batch.j])])
        depth, stiffness, r0 = (torch.as_tensor(params[:, k]) for k in range(3))
        r = torch.linalg.norm(vectors, dim=1)
        x = torch.exp(-stiffness * (r - r0))
        pair = depth * (x * x - 2.0 * x) * _cosine_cutoff(r, self.spec.cutoff)
        energies = onsite.index_add(0, torch.as_tensor(batch.i), 0.5 * pair)

        triplets = self._triplets(batch)
        if self.spec.three_body_strength > 0.0 and len(triplets):
            p, q = torch.as_tensor(triplets[:, 0]), torch.as_tensor(triplets[:, 1])
            cosine = (vectors[p] * vectors[q]).sum(dim=1) / (r[p] * r[q])
            weight = _cosine_cutoff(r[p], self.spec.three_body_cutoff) * _cosine_cutoff(r[q], self.spec.three_body_cutoff)
            angular = self.spec.three_body_strength * weight * (cosine + 1.0 / 3.0) ** 2
            energies = energies.index_add(0, torch.as_tensor(batch.i[triplets[:, 0]]), angular)
        return energies

    def _triplets(self, batch):
        # pairs of neighbor entries sharing the same center atom, both inside the angular cutoff
        d = np.linalg.norm(batch.positions[batch.j] - batch.positions[batch.i] + batch.shifts, axis=1)
        inside = np.flatnonzero(d < self.spec.three_body_cutoff)
        rows = []
        for center in np.unique(batch.i[inside]):
            entries = inside[batch.i[inside] == center]
            rows.extend(combinations(entries.tolist(), 2))
        return np.array(rows, dtype=int).reshape(-1, 2)


def oracle_potential(spec=None, **kwargs):
    spec = OracleSpec(**kwargs) if spec is None else spec
    logger.debug(f"oracle_potential() - seed {spec.seed}, cutoff {spec.cutoff}")
    return OraclePotential(spec)


def _mlp(n_in, hidden):
    layers = []
    width = n_in
    for h in hidden:
        layers += [torch.nn.Linear(width, h), torch.nn.Tanh()]
        width = h
    layers.append(torch.nn.Linear(width, 1))
    return torch.nn.Sequential(*layers)


class DescriptorPotential(torch.nn.Module, TorchPotential):
    """
    E = sum_i [shift(a_i) + scale * MLP_{a_i}((d_i - mean) / std)]

    d_i stacks, for every neighbor species b, Gaussian radial functions
    sum_{j of species b} exp(-eta (r_ij - mu_k)^2) fc(r_ij) with a cosine cutoff fc.
    """

    kind = "descriptor"

    def __init__(self, species, n_centers=None, center_min=None, eta=None, cutoff=None, hidden=None, seed=0,
                 alpha=(1.0, 10.0, 0.1)):
        torch.nn.Module.__init__(self)
        d = cfg.descriptor_defaults
        self.species = tuple(sorted(set(species)))
        self.n_centers = int(d["n_centers"] if n_centers is None else n_centers)
        self.center_min = float(d["center_min"] if center_min is None else center_min)
        self.eta = float(d["eta"] if eta is None else eta)
        self.cutoff = float(d["cutoff"] if cutoff is None else cutoff)
        self.hidden = tuple(int(h) for h in (d["hidden"] if hidden is None else hidden))
        self.seed = int(seed)
        self.alpha = tuple(float(a) for a in alpha)
        self._index = {x: k for k, x in enumerate(self.species)}

        n_features = len(self.species) * self.n_centers
        self.networks = torch.nn.ModuleDict({x: _mlp(n_features, self.hidden) for x in self.species})
        self.register_buffer("centers", torch.linspace(self.center_min, self.cutoff, self.n_centers))
        self.register_buffer("feature_mean", torch.zeros(n_features))
        self.register_buffer("feature_std", torch.ones(n_features))
        self.register_buffer("energy_shift", torch.zeros(len(self.species)))
        self.register_buffer("energy_scale", torch.tensor(1.0))
        self.to(torch.float64)
        self.reset_parameters(self.seed)

    @property
    def n_features(self):
        return len(self.species) * self.n_centers

    def reset_parameters(self, seed):
        generator = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for x in self.species:
                for layer in self.networks[x]:
                    if isinstance(layer, torch.nn.Linear):
                        std = 1.0 / math.sqrt(layer.in_features)
                        layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator) * std)
                        layer.bias.zero_()

    def codes(self, symbols):
        return np.array([self._index[x] for x in symbols], dtype=int)

    def descriptors(self, batch, vectors):
        n = len(batch.symbols)
        if len(batch.i) == 0:
            return torch.zeros((n, self.n_features))
        r = torch.linalg.norm(vectors, dim=1)
        radial = torch.exp(-self.eta * (r[:, None] - self.centers[None, :]) ** 2) * _cosine_cutoff(r, self.cutoff)[:, None]
        neighbor_code = torch.as_tensor(self.codes(batch.symbols[batch.j]))
        features = torch.zeros((n, len(self.species), self.n_centers))
        features = features.index_put((torch.as_tensor(batch.i), neighbor_code), radial, accumulate=True)
        return features.reshape(n, -1)

    def atomic_energies(self, batch, vectors):
        features = (self.descriptors(batch, vectors) - self.feature_mean) / self.feature_std
        codes = self.codes(batch.symbols)
        energies = self.energy_shift[torch.as_tensor(codes)]
        for k, x in enumerate(self.species):
            rows = np.flatnonzero(codes == k)
            if len(rows) == 0:
                continue
            rows = torch.as_tensor(rows)
            out = self.networks[x](features[rows]).squeeze(-1)
            energies = energies.index_add(0, rows, self.energy_scale * out)
        return energies

    def to_checkpoint(self):
        networks = {}
        for x in self.species:
            networks[x] = [
                {"weight": layer.weight.detach().tolist(), "bias": layer.bias.detach().tolist()}
                for layer in self.networks[x] if isinstance(layer, torch.nn.Linear)
            ]
        return {
            "kind": self.kind,
            "species": list(self.species),
            "descriptor": {
                "n_centers": self.n_centers,
                "center_min": self.center_min,
                "eta": self.eta,
                "cutoff": self.cutoff,
                "cutoff_function": "cosine",
            },
            "hidden": list(self.hidden),
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "energy_shift": dict(zip(self.species, self.energy_shift.tolist())),
            "energy_scale": float(self.energy_scale),
            "networks": networks,
            "metadata": {"seed": self.seed, "alpha": list(self.alpha)},
        }

    @classmethod
    def from_checkpoint(cls, data):
        d = data["descriptor"]
        model = cls(
            data["species"], d["n_centers"], d["center_min"], d["eta"], d["cutoff"], data["hidden"],
            data["metadata"]["seed"], data["metadata"]["alpha"],
        )
        with torch.no_grad():
            model.feature_mean.copy_(torch.tensor(data["feature_mean"]))
            model.feature_std.copy_(torch.tensor(data["feature_std"]))
            model.energy_shift.copy_(torch.tensor([data["energy_shift"][x] for x in model.species]))
            model.energy_scale.fill_(data["energy_scale"])
            for x in model.species:
                linear = [layer for layer in model.networks[x] if isinstance(layer, torch.nn.Linear)]
                for layer, values in zip(linear, data["networks"][x]):
                    layer.weight.copy_(torch.tensor(values["weight"]))
                    layer.bias.copy_(torch.tensor(values["bias"]))
        return model


class EnsemblePotential(Potential):
    kind = "ensemble"

    def __init__(self, members):
        members = list(members)
        if len(members) < 2:
            raise PotentialError(f"an ensemble needs at least 2 members, got {len(members)}")
        self.members = members
        self.reports = []
        self.cutoff = max(m.cutoff for m in members)
        covered = [set(m.species) for m in members if m.species is not None]
        self.species = tuple(sorted(set.intersection(*covered))) if covered else None

    def member_results(self, s):
        self.check_species(s)
        if all(isinstance(m, TorchPotential) and m.cutoff == self.cutoff for m in self.members):
            # shared neighbor graph
            batch = make_graph_batch([s], self.cutoff)
            return [m.evaluate_batch(batch) for m in self.members]
        return [m.evaluate(s) for m in self.members]

    def _evaluate(self, s):
        return _mean_result(self.member_results(s))

    def to_checkpoint(self):
        return {"kind": self.kind, "members": [m.to_checkpoint() for m in self.members]}


def _mean_result(results):
    energies = None
    if all(r.energies is not None for r in results):
        energies = np.mean([r.energies for r in results], axis=0)
    return EvalResult(
        float(np.mean([r.energy for r in results])),
        np.mean([r.forces for r in results], axis=0),
        np.mean([r.stress for r in results], axis=0),
        energies,
    )


class EnsembleStats(NamedTuple):
    mean: EvalResult
    energy_std: float
    force_std: float
    stress_std: float


def ensemble_stats(e, s):
    """
    energy_std: population std of per-atom member energies (eV/atom)
    force_std: max over atoms of the std of the member force magnitudes (eV/A)
    stress_std: max over components of the std of member stresses (eV/A^3)
    """
    results = e.member_results(s)
    per_atom = np.array([r.energy for r in results]) / s.n_atoms
    magnitudes = np.array([np.linalg.norm(r.forces, axis=1) for r in results])
    stresses = np.array([r.stress for r in results])
    return EnsembleStats(
        mean=_mean_result(results),
        energy_std=float(np.std(per_atom)),
        force_std=float(np.max(np.std(magnitudes, axis=0))),
        stress_std=float(np.max(np.std(stresses, axis=0))),
    )


def compute_formation_energy(E_total, s, refs):
    """(E_total - sum_e n_e mu_e) / n in eV/atom."""
    missing = sorted(set(s.species) - set(refs))
    if missing:
        raise PotentialError(f"missing reference energy for: {', '.join(missing)}")
    reference = sum(count * refs[x] for x, count in s.composition.items())
    return (E_total - reference) / s.n_atoms


# ---------------------------------------------------------------- checkpoints

def checkpoint_text(p):
    data = {"format": cfg.checkpoint_format, "version": cfg.checkpoint_version}
    data.update(p.to_checkpoint())
    return json.dumps(data, sort_keys=True, indent=1) + "\n"


def save_potential(p, file_path):
    with open(file_path, "w") as f:
        f.write(checkpoint_text(p))
    logger.info(f"save_potential() - wrote {p.kind} checkpoint to {file_path}")
    return file_path


def potential_from_checkpoint(data):
    if data.get("format") not in (None, cfg.checkpoint_format):
        raise PotentialError(f"not a potential checkpoint: format {data.get('format')!r}")
    if data.get("version", cfg.checkpoint_version) != cfg.checkpoint_version:
        raise PotentialError(f"unsupported checkpoint version {data.get('version')}")
    if data["kind"] == DescriptorPotential.kind:
        return DescriptorPotential.from_checkpoint(data)
    if data["kind"] == EnsemblePotential.kind:
        return EnsemblePotential([DescriptorPotential.from_checkpoint(m) for m in data["members"]])
    raise PotentialError(f"unknown checkpoint kind {data['kind']!r}")


def load_potential(file_path):
    with open(file_path, "r") as f:
        data = json.load(f)
    return potential_from_checkpoint(data)
