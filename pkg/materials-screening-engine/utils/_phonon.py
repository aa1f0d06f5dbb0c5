"""
Finite-displacement lattice dynamics

Force constants Phi(b alpha, j beta) = -dF_{j beta} / du_{b alpha} from +/- displacements of the
atoms of the home cell inside a supercell. Dynamical matrix

    D_{b alpha, b' beta}(q) = sum_{j -> b'} Phi(b alpha, j beta) sum_images w exp(i q . d_bj) / sqrt(m_b m_b')

with d_bj every shortest supercell image of r_j - r_b (tied images share weight 1/multiplicity).
Frequencies are ordinary frequencies in THz; imaginary modes are stored as negative numbers.
Thermodynamic functions are per primitive cell, normalized by the number of q-points.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np
import pandas as pd
from scipy.linalg import eigh

import config as cfg
from utils._errors import PhononError, QHABoundaryError
from utils._helper import get_logger
from utils._structure import make_supercell

logger = get_logger("phonon")


@dataclass(frozen=True, eq=False)
class ForceConstants:
    base: object
    supercell: object
    amplitude: float
    # (n_base, n_supercell, 3, 3)
    phi: np.ndarray
    # flat list of minimum images: pair rows (b, j), vectors and weights
    image_pairs: np.ndarray
    image_vectors: np.ndarray
    image_weights: np.ndarray

    @property
    def n_atoms(self):
        return self.base.n_atoms


@dataclass(frozen=True, eq=False)
class PhononResult:
    qpoints: np.ndarray
    frequencies: np.ndarray
    n_atoms: int
    volume: float
    eigenvectors: Optional[np.ndarray] = None
    group_velocities: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    distances: Optional[np.ndarray] = None

    @property
    def n_qpoints(self):
        return len(self.qpoints)

    def imaginary_qpoints(self, tolerance=None):
        tolerance = cfg.phonon_defaults["zero_tolerance_thz"] if tolerance is None else tolerance
        rows = np.any(self.frequencies < -tolerance, axis=1)
        return [tuple(float(x) for x in q) for q in self.qpoints[rows]]

    @property
    def has_imaginary(self):
        return len(self.imaginary_qpoints()) > 0


def reciprocal_lattice(lattice):
    """Rows b_i with a_i . b_j = 2 pi delta_ij."""
    return 2.0 * np.pi * np.linalg.inv(np.asarray(lattice, dtype=float)).T


def _minimum_images(supercell_lattice, delta, tol=1.0e-5):
    shifts = np.array(list(product(range(-2, 3), repeat=3)), dtype=float) @ supercell_lattice
    candidates = delta[None, :] + shifts
    lengths = np.linalg.norm(candidates, axis=1)
    closest = candidates[lengths < lengths.min() + tol]
    return closest, np.full(len(closest), 1.0 / len(closest))


def force_constants(s, p, repeat=(2, 2, 2), amplitude=None, max_workers=None):
    amplitude = cfg.phonon_defaults["amplitude"] if amplitude is None else amplitude
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers
    sc = make_supercell(s, repeat)
    sup = sc.structure
    reference = p.evaluate(sup)
    if reference.max_force >= cfg.relax_defaults["f_tol"]:
        logger.warning(f"force_constants() - input not relaxed, max force {reference.max_force:.4g} eV/A")

    n, m = s.n_atoms, sup.n_atoms
    cart = sup.cart_coords

    def _displaced_forces(job):
        b, alpha, sign = job
        moved = cart.copy()
        moved[b, alpha] += sign * amplitude
        forces = p.evaluate(sup.with_cartesian(moved)).forces
        if not np.all(np.isfinite(forces)):
            raise PhononError(f"non-finite forces displacing atom {b} along {'xyz'[alpha]}")
        return forces

    jobs = [(b, alpha, sign) for b in range(n) for alpha in range(3) for sign in (1.0, -1.0)]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        results = list(executor.map(_displaced_forces, jobs))

    phi = np.zeros((n, m, 3, 3))
    for k, (b, alpha, sign) in enumerate(jobs):
        if sign < 0:
            continue
        plus, minus = results[k], results[k + 1]
        phi[b, :, alpha, :] = -(plus - minus) / (2.0 * amplitude)
    # acoustic sum rule: the self term absorbs the residual row sum
    for b in range(n):
        phi[b, b] -= phi[b].sum(axis=0)

    pairs, vectors, weights = [], [], []
    for b in range(n):
        for j in range(m):
            v, w = _minimum_images(sup.lattice, cart[j] - cart[b])
            pairs.extend([(b, j)] * len(v))
            vectors.append(v)
            weights.append(w)
    return ForceConstants(
        s, sc, float(amplitude), phi, np.array(pairs, dtype=int), np.concatenate(vectors), np.concatenate(weights)
    )


def dynamical_matrix(fc, q_cart):
    n, m = fc.phi.shape[:2]
    phases = np.zeros((n, m), dtype=complex)
    np.add.at(phases, (fc.image_pairs[:, 0], fc.image_pairs[:, 1]), fc.image_weights * np.exp(1j * (fc.image_vectors @ q_cart)))
    # fold supercell atoms onto their home-cell images
    fold = np.zeros((m, n))
    fold[np.arange(m), fc.supercell.map[:, 0]] = 1.0
    D = np.einsum("bjxy,bj,jc->bcxy", fc.phi, phases, fold)
    masses = fc.base.masses
    D = D / np.sqrt(np.outer(masses, masses))[:, :, None, None]
    D = D.transpose(0, 2, 1, 3).reshape(3 * n, 3 * n)
    # q-independent scale: the ASR makes D vanish at Gamma
    scale = max(float(np.max(np.abs(fc.phi))) / float(np.min(masses)), 1.0e-300)
    asymmetry = float(np.max(np.abs(D - D.conj().T)))
    if asymmetry > cfg.phonon_defaults["hermitian_rtol"] * scale:
        q_frac = fc.base.lattice @ np.asarray(q_cart, dtype=float) / (2.0 * np.pi)
        raise PhononError(
            f"dynamical matrix is not Hermitian: max|D - D^H| = {asymmetry:.3g}, max|phi|/m = {scale:.3g}",
            qpoints=[q_frac],
        )
    if asymmetry > 1.0e-10 * scale:
        logger.debug(f"dynamical_matrix() - symmetrizing finite-difference residual {asymmetry:.3g}")
    return 0.5 * (D + D.conj().T)


def _to_thz(eigenvalues):
    return np.sign(eigenvalues) * np.sqrt(np.abs(eigenvalues)) * cfg.EV_A2_AMU_TO_THZ


def _solve(fc, q_cart, with_vectors=False):
    if with_vectors:
        values, vectors = eigh(dynamical_matrix(fc, q_cart))
        return _to_thz(values), vectors
    return _to_thz(eigh(dynamical_matrix(fc, q_cart), eigvals_only=True)), None


def monkhorst_pack(mesh):
    """Gamma-centered regular grid, fractional coordinates in [-0.5, 0.5)."""
    mesh = [int(x) for x in mesh]
    grid = np.array(list(product(*(range(k) for k in mesh))), dtype=float) / np.array(mesh, dtype=float)
    return grid - np.floor(grid + 0.5)


def qpath(points, n_per_segment=40):
    """Straight segments through fractional q-points; returns (qpoints, cumulative distance in fractional units)."""
    points = np.asarray(points, dtype=float)
    path = [points[0]]
    for a, b in zip(points[:-1], points[1:]):
        for t in np.linspace(0.0, 1.0, n_per_segment + 1)[1:]:
            path.append(a + t * (b - a))
    path = np.array(path)
    distance = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])
    return path, distance


def dispersion(fc, qpoints=None, mesh=None, eigenvectors=False, velocities=False, dq=1.0e-4, max_workers=None,
               distances=None):
    """
    qpoints: fractional coordinates in the reciprocal basis of the primitive cell
    (or mesh for a Gamma-centered grid). Group velocities in A/fs by central differences.
    """
    if qpoints is None:
        qpoints = monkhorst_pack(cfg.phonon_defaults["qgrid"] if mesh is None else mesh)
    qpoints = np.atleast_2d(np.asarray(qpoints, dtype=float))
    B = reciprocal_lattice(fc.base.lattice)
    q_cart = qpoints @ B
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers

    def _point(q):
        freqs, vecs = _solve(fc, q, eigenvectors)
        vel = None
        if velocities:
            vel = np.zeros((len(freqs), 3))
            for k in range(3):
                step = np.zeros(3)
                step[k] = dq
                up, _ = _solve(fc, q + step)
                down, _ = _solve(fc, q - step)
                # omega = 2 pi nu, 1 THz = 1e-3 / fs
                vel[:, k] = 2.0 * np.pi * 1.0e-3 * (up - down) / (2.0 * dq)
        return freqs, vecs, vel

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        results = list(executor.map(_point, q_cart))

    frequencies = np.array([r[0] for r in results])
    result = PhononResult(
        qpoints=qpoints,
        frequencies=frequencies,
        n_atoms=fc.n_atoms,
        volume=fc.base.volume,
        eigenvectors=np.array([r[1] for r in results]) if eigenvectors else None,
        group_velocities=np.array([r[2] for r in results]) if velocities else None,
        weights=np.full(len(qpoints), 1.0 / len(qpoints)),
        distances=distances,
    )
    imaginary = result.imaginary_qpoints()
    if imaginary:
        logger.warning(f"dispersion() - imaginary modes at {len(imaginary)} q-points")
    return result


def band_structure(fc, points, n_per_segment=40):
    qpoints, distance = qpath(points, n_per_segment)
    return dispersion(fc, qpoints=qpoints, distances=distance)


# ---------------------------------------------------------------- thermodynamics

def _check_temperature(T):
    if T < 0:
        raise PhononError(f"temperature must be >= 0 K, got {T}")


def _mode_energies(ph, allow_imaginary=False):
    """Mode energies h nu in eV with (near-)zero modes masked out."""
    if not allow_imaginary:
        imaginary = ph.imaginary_qpoints()
        if imaginary:
            raise PhononError(f"imaginary modes at {len(imaginary)} q-points: {imaginary[:5]}", qpoints=imaginary)
    nu = ph.frequencies
    active = np.abs(nu) >= cfg.phonon_defaults["zero_tolerance_thz"]
    return np.where(active, cfg.H_EV_S * nu * 1.0e12, 0.0), active


def helmholtz_free_energy(ph, T):
    """F_vib(T) in eV per primitive cell."""
    _check_temperature(T)
    energy, active = _mode_energies(ph)
    zero_point = 0.5 * energy[active].sum()
    if T == 0:
        return float(zero_point / ph.n_qpoints)
    x = energy[active] / (cfg.KB_EV * T)
    thermal = cfg.KB_EV * T * np.sum(np.log(-np.expm1(-x)))
    return float((zero_point + thermal) / ph.n_qpoints)


def mode_heat_capacities(ph, T):
    """k_B x^2 e^x / (e^x - 1)^2 per mode (eV/K), not divided by the q-point count."""
    _check_temperature(T)
    energy, active = _mode_energies(ph)
    out = np.zeros_like(energy)
    if T == 0:
        return out
    x = energy[active] / (cfg.KB_EV * T)
    out[active] = cfg.KB_EV * x * x * np.exp(-x) / np.expm1(-x) ** 2
    return out


def heat_capacity(ph, T):
    """C_V in eV/K per primitive cell."""
    return float(mode_heat_capacities(ph, T).sum() / ph.n_qpoints)


def entropy(ph, T):
    """S_vib in eV/K per primitive cell."""
    _check_temperature(T)
    energy, active = _mode_energies(ph)
    if T == 0:
        return 0.0
    x = energy[active] / (cfg.KB_EV * T)
    occupation = np.exp(-x) / -np.expm1(-x)
    s = cfg.KB_EV * np.sum(x * occupation - np.log(-np.expm1(-x)))
    return float(s / ph.n_qpoints)


def thermal_table(ph, temperatures):
    rows = []
    for T in temperatures:
        F, S, C = helmholtz_free_energy(ph, T), entropy(ph, T), heat_capacity(ph, T)
        rows.append({
            "temperature_K": float(T),
            "free_energy_eV_per_cell": F,
            "entropy_eV_per_K_per_cell": S,
            "heat_capacity_eV_per_K_per_cell": C,
            "free_energy_eV_per_atom": F / ph.n_atoms,
            "entropy_eV_per_K_per_atom": S / ph.n_atoms,
            "heat_capacity_eV_per_K_per_atom": C / ph.n_atoms,
        })
    return pd.DataFrame(rows)


def dos(ph, smearing=None, n_points=None):
    """
    Gaussian-smeared density of states per primitive cell on a uniform THz grid,
    normalized to 3n. The default width is twice the grid spacing.
    """
    _mode_energies(ph)
    n_points = cfg.phonon_defaults["dos_points"] if n_points is None else n_points
    tails = cfg.phonon_defaults["dos_tail_sigmas"]
    nu = ph.frequencies.ravel()
    lo, hi = float(nu.min()), float(nu.max())
    span = max(hi - lo, 1.0e-3)
    if smearing is None:
        spacing = span / (n_points - 1 - 4.0 * tails)
        sigma = 2.0 * spacing
    else:
        sigma = float(smearing)
    grid = np.linspace(lo - tails * sigma, hi + tails * sigma, n_points)
    weights = np.repeat(ph.weights if ph.weights is not None else np.full(ph.n_qpoints, 1.0 / ph.n_qpoints),
                        ph.frequencies.shape[1])
    gauss = np.exp(-0.5 * ((grid[:, None] - nu[None, :]) / sigma) ** 2) / (sigma * np.sqrt(2.0 * np.pi))
    density = gauss @ weights
    return pd.DataFrame({"frequency_THz": grid, "dos_states_per_THz": density})


def dispersion_table(ph):
    columns = {
        "q_index": np.arange(ph.n_qpoints),
        "qa": ph.qpoints[:, 0],
        "qb": ph.qpoints[:, 1],
        "qc": ph.qpoints[:, 2],
    }
    if ph.distances is not None:
        columns["distance"] = ph.distances
    for k in range(ph.frequencies.shape[1]):
        columns[f"branch_{k}_THz"] = ph.frequencies[:, k]
    return pd.DataFrame(columns)


# ---------------------------------------------------------------- quasi-harmonic

def gibbs_qha(volumes, T, p=0.0):
    """
    volumes: (V, E_ref(V), PhononResult or None) with at least 5 points.
    Phi(V) = E_ref + F_vib(V, T) + pV is fitted with a quartic and minimized on the data interval.
    Returns (G eV, V* A^3).
    """
    if len(volumes) < 5:
        raise PhononError(f"quasi-harmonic fit needs at least 5 volume points, got {len(volumes)}")
    V = np.array([float(v) for v, _, _ in volumes])
    values = np.array([
        float(e) + (helmholtz_free_energy(ph, T) if ph is not None else 0.0) + p * float(v)
        for v, e, ph in volumes
    ])
    order = np.argsort(V)
    V, values = V[order], values[order]
    poly = np.polynomial.Polynomial.fit(V, values, 4)
    slope = poly.deriv()
    # drop round-off leading terms so an exact lower-order fit keeps accurate roots
    slope = slope.trim(1.0e-10 * np.max(np.abs(slope.coef)))
    candidates = [V[0], V[-1]]
    for root in slope.roots():
        if abs(root.imag) < 1.0e-12 and V[0] <= root.real <= V[-1]:
            candidates.append(float(root.real))
    candidates = np.array(candidates)
    energies = poly(candidates)
    best = int(np.argmin(energies))
    v_star = float(candidates[best])
    if best < 2:
        raise QHABoundaryError(f"free-energy minimum at the edge of the volume scan (V = {v_star:.4f} A^3)", volume=v_star)
    return float(energies[best]), v_star


def kappa_crta(ph, heat_capacities, tau):
    """
    kappa = 1 / (N V_c) sum_modes C v (x) v tau in W/(m K); tau in fs, scalar or per mode.
    heat_capacities: per-mode C in eV/K, as from mode_heat_capacities.
    """
    if tau is None:
        raise PhononError("phonon lifetimes are required for the relaxation-time conductivity")
    if ph.group_velocities is None:
        raise PhononError("group velocities are required; compute the dispersion with velocities=True")
    tau = np.broadcast_to(np.asarray(tau, dtype=float), ph.frequencies.shape)
    C = np.asarray(heat_capacities, dtype=float)
    v = ph.group_velocities
    kappa = np.einsum("qm,qma,qmb,qm->ab", C, v, v, tau) / (ph.n_qpoints * ph.volume)
    return kappa * cfg.EV_K_A_FS_TO_W_MK
