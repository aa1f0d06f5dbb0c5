"""
Elastic constants and ideal shear strength from finite deformations

Voigt order: 1=xx 2=yy 3=zz 4=yz 5=xz 6=xy. A Voigt strain e maps to the symmetric tensor
eps with eps_ii = e_i and engineering shears eps_23 = e_4 / 2 (etc.); the cell is deformed as
L -> L (I + eps). Ideal shear instead applies the simple shear F = I + gamma n (x) d, so
gamma is the full engineering strain of that one plane.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

import config as cfg
from utils._errors import MechanicsError, RelaxationError
from utils._helper import get_logger
from utils._relax import relax_positions
from utils._structure import Structure

logger = get_logger("mech")

VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))


def voigt_to_strain(e):
    eps = np.zeros((3, 3))
    for k, (a, b) in enumerate(VOIGT_PAIRS):
        if a == b:
            eps[a, a] = e[k]
        else:
            eps[a, b] = eps[b, a] = 0.5 * e[k]
    return eps


def stress_to_voigt(sigma):
    return np.array([sigma[a, b] for a, b in VOIGT_PAIRS])


@dataclass(frozen=True, eq=False)
class ElasticTensor:
    C: np.ndarray
    volume: float
    delta: float
    method: str
    relaxed_ions: bool

    @property
    def C_gpa(self):
        return self.C * cfg.EV_PER_A3_TO_GPA

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(0.5 * (self.C + self.C.T))

    @property
    def is_stable(self):
        return bool(np.all(self.eigenvalues > 0.0))

    @property
    def asymmetry(self):
        """Largest |C_ij - C_ji| relative to the largest |C_ij|."""
        return float(np.max(np.abs(self.C - self.C.T)) / np.max(np.abs(self.C)))

    @property
    def voigt_bulk_gpa(self):
        C = self.C_gpa
        return float((C[0, 0] + C[1, 1] + C[2, 2] + 2.0 * (C[0, 1] + C[0, 2] + C[1, 2])) / 9.0)

    @property
    def voigt_shear_gpa(self):
        C = self.C_gpa
        return float(
            (C[0, 0] + C[1, 1] + C[2, 2] - (C[0, 1] + C[0, 2] + C[1, 2]) + 3.0 * (C[3, 3] + C[4, 4] + C[5, 5])) / 15.0
        )

    def to_dict(self):
        return {
            "C_eV_per_A3": self.C,
            "C_GPa": self.C_gpa,
            "volume": self.volume,
            "delta": self.delta,
            "method": self.method,
            "relaxed_ions": self.relaxed_ions,
            "eigenvalues_GPa": self.eigenvalues * cfg.EV_PER_A3_TO_GPA,
            "mechanically_stable": self.is_stable,
            "voigt_bulk_GPa": self.voigt_bulk_gpa,
            "voigt_shear_GPa": self.voigt_shear_gpa,
        }

    def to_frame(self):
        labels = [f"C{k + 1}" for k in range(6)]
        df = pd.DataFrame(self.C_gpa, columns=labels)
        df.insert(0, "row", labels)
        return df


def _strained(s, p, e, relax_ions, f_tol, max_iter):
    strained = s.deformed(np.eye(3) + voigt_to_strain(e))
    if not relax_ions:
        return p.evaluate(strained)
    result = relax_positions(strained, p, f_tol, max_iter, keep_trajectory=False)
    if not result.converged:
        label = ", ".join(f"{x:+.4f}" for x in e)
        raise RelaxationError(f"ionic relaxation did not converge at Voigt strain ({label})")
    return result.result


def _evaluate_points(s, p, points, relax_ions, f_tol, max_iter, max_workers):
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers
    keys = sorted(points)

    def _point(key):
        try:
            return _strained(s, p, np.array(key), relax_ions, f_tol, max_iter)
        except RelaxationError as e:
            raise RelaxationError(f"strain point {key}: {e}")

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        results = list(executor.map(_point, keys))
    return dict(zip(keys, results))


def _unit(k, h):
    e = [0.0] * 6
    e[k] = h
    return e


def _pair(i, hi, j, hj):
    e = [0.0] * 6
    e[i] += hi
    e[j] += hj
    return tuple(e)


def elastic_tensor(s, p, delta=0.005, relax_ions=False, method="energy", f_tol=1.0e-4, max_iter=500, max_workers=None):
    """
    energy: C_ij = (1/V0) d2E / de_i de_j with the 4-point central stencil
            [E(+i,+j) - E(+i,-j) - E(-i,+j) + E(-i,-j)] / (4 d^2), which for i == j is the
            second difference with step 2d.
    stress: C_ij = d sigma_i / d e_j by central differences.
    """
    if delta <= 0:
        raise MechanicsError("strain step must be positive")
    V0 = s.volume
    C = np.zeros((6, 6))
    if method == "energy":
        points = set()
        for i in range(6):
            for j in range(i, 6):
                for si in (1, -1):
                    for sj in (1, -1):
                        points.add(_pair(i, si * delta, j, sj * delta))
        results = _evaluate_points(s, p, points, relax_ions, f_tol, max_iter, max_workers)
        E = {key: r.energy for key, r in results.items()}
        for i in range(6):
            for j in range(i, 6):
                value = (
                    E[_pair(i, delta, j, delta)] - E[_pair(i, delta, j, -delta)]
                    - E[_pair(i, -delta, j, delta)] + E[_pair(i, -delta, j, -delta)]
                ) / (4.0 * delta * delta * V0)
                C[i, j] = C[j, i] = value
    elif method == "stress":
        points = {tuple(_unit(j, h)) for j in range(6) for h in (delta, -delta)}
        results = _evaluate_points(s, p, points, relax_ions, f_tol, max_iter, max_workers)
        for j in range(6):
            plus = stress_to_voigt(results[tuple(_unit(j, delta))].stress)
            minus = stress_to_voigt(results[tuple(_unit(j, -delta))].stress)
            C[:, j] = (plus - minus) / (2.0 * delta)
    else:
        raise MechanicsError(f"unknown method '{method}', expected 'energy' or 'stress'")

    tensor = ElasticTensor(C, V0, float(delta), method, bool(relax_ions))
    if not tensor.is_stable:
        logger.warning(f"elastic_tensor() - not positive definite, eigenvalues {tensor.eigenvalues * cfg.EV_PER_A3_TO_GPA} GPa")
    return tensor


@dataclass(frozen=True, eq=False)
class ShearCurve:
    gamma: np.ndarray
    energy: np.ndarray
    tau: np.ndarray
    volume: float
    normal: np.ndarray
    direction: np.ndarray
    relaxed_ions: bool
    instability: bool
    tau_max: Optional[float]
    gamma_max: Optional[float]

    @property
    def tau_gpa(self):
        return self.tau * cfg.EV_PER_A3_TO_GPA

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "energy_eV": self.energy,
            "tau_eV_per_A3": self.tau,
            "volume": self.volume,
            "normal": self.normal,
            "direction": self.direction,
            "relaxed_ions": self.relaxed_ions,
            "instability": self.instability,
            "tau_max_eV_per_A3": self.tau_max,
            "tau_max_GPa": None if self.tau_max is None else self.tau_max * cfg.EV_PER_A3_TO_GPA,
            "gamma_max": self.gamma_max,
        }

    def to_frame(self):
        return pd.DataFrame({"gamma": self.gamma, "energy_eV": self.energy, "tau_GPa": self.tau_gpa})


def shear_deformation(normal, direction, gamma):
    """Row-vector form of x -> x + gamma (x . n) d."""
    return np.eye(3) + gamma * np.outer(normal, direction)


def shear_curve(gamma, energy, volume):
    """tau = (1/V0) dE/dgamma by second-order differences; first maximum over gamma >= 0."""
    gamma = np.asarray(gamma, dtype=float)
    energy = np.asarray(energy, dtype=float)
    tau = np.gradient(energy, gamma, edge_order=2) / volume
    slope = np.gradient(tau, gamma, edge_order=2)
    forward = np.flatnonzero(gamma >= -1.0e-12)
    tau_max = gamma_max = None
    instability = False
    for k in forward[1:]:
        if slope[k] <= 0.0:
            head = forward[forward <= k]
            best = head[np.argmax(tau[head])]
            tau_max, gamma_max = float(tau[best]), float(gamma[best])
            instability = True
            break
    return tau, instability, tau_max, gamma_max


def ideal_shear(s, p, normal=(0.0, 0.0, 1.0), direction=(1.0, 0.0, 0.0), step=0.01, gamma_max=0.3,
                relax_ions=True, f_tol=1.0e-3, max_iter=500):
    """
    Incremental simple shear on the gamma grid {-step, 0, step, ..., gamma_max}; the extra
    negative point gives a central difference at gamma = 0. With relax_ions each point starts
    from the relaxed fractional coordinates of the previous one.
    """
    if not 0.01 - 1.0e-12 <= step <= 0.10 + 1.0e-12:
        raise MechanicsError(f"shear step {step} outside [0.01, 0.10]")
    n = np.asarray(normal, dtype=float)
    d = np.asarray(direction, dtype=float)
    n, d = n / np.linalg.norm(n), d / np.linalg.norm(d)
    if abs(n @ d) > 1.0e-8:
        raise MechanicsError("shear direction must lie in the shear plane (n . d = 0)")
    n_steps = int(round(gamma_max / step))
    if n_steps < 2:
        raise MechanicsError("gamma_max must span at least two shear steps")
    gamma = step * np.arange(-1, n_steps + 1)

    V0 = s.volume
    energies = np.zeros(len(gamma))
    frac_prev = s.frac_coords
    # walk 0 -> -step first, then 0 -> gamma_max, each leg starting from the input geometry
    for leg in ([1, 0], list(range(1, len(gamma)))):
        frac_prev = s.frac_coords
        for k in leg:
            current = Structure(s.species, frac_prev, s.lattice @ shear_deformation(n, d, gamma[k]), s.tags)
            if relax_ions:
                result = relax_positions(current, p, f_tol, max_iter, keep_trajectory=False)
                if not result.converged:
                    logger.warning(f"ideal_shear() - ions not converged at gamma {gamma[k]:.3f}")
                energies[k] = result.energy
                frac_prev = result.structure.frac_coords
            else:
                energies[k] = p.evaluate(current).energy

    tau, instability, tau_max, g_max = shear_curve(gamma, energies, V0)
    if not instability:
        logger.warning(f"ideal_shear() - no stress maximum up to gamma {gamma[-1]:.3f}")
    return ShearCurve(gamma, energies, tau, V0, n, d, bool(relax_ions), instability, tau_max, g_max)
