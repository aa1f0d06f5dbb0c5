"""
Structure relaxation

relax_positions: BFGS on Cartesian positions with an Armijo backtracking line search
relax_cell: alternates position relaxation with lattice steps down the enthalpy gradient
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np

import config as cfg
from utils._errors import RelaxationError
from utils._file_formats import LabeledFrame, Provenance
from utils._helper import get_logger

logger = get_logger("relax")


@dataclass(frozen=True, eq=False)
class RelaxResult:
    structure: object
    result: object
    iterations: int
    converged: bool
    trajectory: List[LabeledFrame] = field(default_factory=list)
    max_force: float = 0.0
    max_stress: float = 0.0

    @property
    def energy(self):
        return self.result.energy


def _frame(s, r):
    return LabeledFrame(s, r.energy, r.forces, r.stress, Provenance.predicted)


def _check_finite(r, step):
    if not (np.isfinite(r.energy) and np.all(np.isfinite(r.forces))):
        raise RelaxationError("non-finite energy or forces", step=step)


def _cap_step(d, max_step):
    longest = np.max(np.linalg.norm(d.reshape(-1, 3), axis=1))
    if longest > max_step:
        d = d * (max_step / longest)
    return d


def relax_positions(s, p, f_tol=None, max_iter=None, keep_trajectory=True):
    """
    Converged means max per-atom force magnitude < f_tol. Every accepted step lowers
    the energy, so on non-convergence the last accepted structure is the best one seen.
    """
    d = cfg.relax_defaults
    f_tol = d["f_tol"] if f_tol is None else f_tol
    max_iter = d["max_iter"] if max_iter is None else max_iter
    c, shrink, max_step = d["armijo_c"], d["shrink"], d["max_step"]

    r = p.evaluate(s)
    _check_finite(r, 0)
    trajectory = [_frame(s, r)] if keep_trajectory else []
    n3 = 3 * s.n_atoms
    h0 = np.eye(n3) / d["hessian_scale"]
    H = h0.copy()
    x = s.cart_coords.ravel().copy()
    g = -r.forces.ravel()

    iterations = 0
    converged = r.max_force < f_tol
    while not converged and iterations < max_iter:
        direction = -H @ g
        if direction @ g >= 0.0:
            H = h0.copy()
            direction = -H @ g
        direction = _cap_step(direction, max_step)
        slope = direction @ g

        alpha = 1.0
        accepted = None
        for _ in range(40):
            trial_x = x + alpha * direction
            trial = s.with_cartesian(trial_x.reshape(-1, 3))
            trial_r = p.evaluate(trial)
            if np.isfinite(trial_r.energy) and trial_r.energy <= r.energy + c * alpha * slope:
                accepted = (trial_x, trial, trial_r)
                break
            alpha *= shrink
        if accepted is None:
            if not np.allclose(H, h0):
                # stale curvature: retry once from the initial Hessian
                H = h0.copy()
                continue
            if not np.isfinite(trial_r.energy):
                raise RelaxationError("non-finite energy", step=iterations + 1)
            logger.warning(f"relax_positions() - line search failed at step {iterations + 1}, max force {r.max_force:.4g}")
            break

        trial_x, s, r = accepted
        _check_finite(r, iterations + 1)
        g_new = -r.forces.ravel()
        step = trial_x - x
        y = g_new - g
        sy = step @ y
        if sy > 1.0e-12:
            rho = 1.0 / sy
            V = np.eye(n3) - rho * np.outer(step, y)
            H = V @ H @ V.T + rho * np.outer(step, step)
        # positions re-wrapped into the cell; BFGS only sees differences
        x = s.cart_coords.ravel().copy()
        g = g_new
        iterations += 1
        if keep_trajectory:
            trajectory.append(_frame(s, r))
        converged = r.max_force < f_tol

    if not converged:
        logger.warning(f"relax_positions() - not converged after {iterations} steps, max force {r.max_force:.4g} eV/A")
    return RelaxResult(s, r, iterations, converged, trajectory, r.max_force)


def _stress_residual(r, pressure):
    return r.stress + pressure * np.eye(3)


def relax_cell(s, p, f_tol=None, stress_tol=0.002, max_iter=None, pressure=0.0, keep_trajectory=True):
    """
    Minimizes the enthalpy E + pV. Lattice updates are symmetric strains L -> L (I + e) with
    e = -a (sigma + p I), a from Barzilai-Borwein and backtracked on the enthalpy.
    Converged when max force < f_tol and max |sigma + p I| < stress_tol.
    """
    d = cfg.relax_defaults
    f_tol = d["f_tol"] if f_tol is None else f_tol
    max_iter = d["max_iter"] if max_iter is None else max_iter
    if np.isinf(stress_tol):
        return relax_positions(s, p, f_tol, max_iter, keep_trajectory)

    initial_volume = s.volume
    trajectory = []
    iterations = 0
    alpha = 1.0
    prev_strain = prev_residual = None
    while True:
        inner = relax_positions(s, p, f_tol, max(max_iter - iterations, 0), keep_trajectory)
        iterations += inner.iterations
        trajectory.extend(inner.trajectory if not trajectory else inner.trajectory[1:])
        s, r = inner.structure, inner.result
        residual = _stress_residual(r, pressure)
        max_stress = float(np.max(np.abs(residual)))
        if inner.converged and max_stress < stress_tol:
            return RelaxResult(s, r, iterations, True, trajectory, r.max_force, max_stress)
        if iterations >= max_iter:
            logger.warning(f"relax_cell() - not converged after {iterations} steps, max stress {max_stress:.4g} eV/A^3")
            return RelaxResult(s, r, iterations, False, trajectory, r.max_force, max_stress)

        if prev_strain is not None:
            dy = residual - prev_residual
            sy = np.sum(prev_strain * dy)
            alpha = float(np.sum(prev_strain * prev_strain) / sy) if sy > 1.0e-14 else 1.0
        enthalpy = r.energy + pressure * s.volume
        accepted = None
        for _ in range(40):
            strain = -alpha * residual
            largest = np.max(np.abs(strain))
            if largest > 0.05:
                strain *= 0.05 / largest
            trial = s.deformed(np.eye(3) + strain)
            if trial.volume < d["collapse_ratio"] * initial_volume:
                raise RelaxationError("cell collapse below 10% of the initial volume", step=iterations + 1)
            trial_r = p.evaluate(trial)
            effective = np.sum(strain * residual) * s.volume
            if np.isfinite(trial_r.energy) and trial_r.energy + pressure * trial.volume <= enthalpy + d["armijo_c"] * effective:
                accepted = (trial, trial_r, strain)
                break
            alpha *= d["shrink"]
        if accepted is None:
            logger.warning(f"relax_cell() - lattice line search failed at step {iterations + 1}")
            return RelaxResult(s, r, iterations, False, trajectory, r.max_force, max_stress)
        s, r, strain = accepted
        _check_finite(r, iterations + 1)
        iterations += 1
        if keep_trajectory:
            trajectory.append(_frame(s, r))
        prev_strain, prev_residual = strain, residual


def relax(s, p, cell=False, f_tol=None, stress_tol=0.002, max_iter=None, pressure=0.0, keep_trajectory=True):
    if cell:
        return relax_cell(s, p, f_tol, stress_tol, max_iter, pressure, keep_trajectory)
    return relax_positions(s, p, f_tol, max_iter, keep_trajectory)
