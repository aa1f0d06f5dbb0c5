"""
Constant-temperature molecular dynamics and Einstein-relation diffusivity

Integrator: BAOAB Langevin splitting (velocity Verlet when the friction is zero).
Units: A, fs, amu, eV. Positions are kept unwrapped so displacements never jump by a cell.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.stats import linregress

import config as cfg
from utils._errors import MDError
from utils._file_formats import LabeledFrame, Provenance
from utils._helper import get_logger
from utils._structure import Structure

logger = get_logger("md")


@dataclass(frozen=True, eq=False)
class Trajectory:
    species: tuple
    lattice: np.ndarray
    masses: np.ndarray
    timestep: float
    stride: int
    # (frames, atoms, 3), unwrapped Cartesian
    positions: np.ndarray
    velocities: np.ndarray
    potential_energy: np.ndarray
    kinetic_energy: np.ndarray
    thermostat: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def n_frames(self):
        return len(self.positions)

    @property
    def times(self):
        return np.arange(self.n_frames) * self.timestep * self.stride

    @property
    def total_energy(self):
        return self.potential_energy + self.kinetic_energy

    def temperature(self, dof=None):
        dof = 3 * len(self.species) if dof is None else dof
        return 2.0 * self.kinetic_energy / (dof * cfg.KB_EV)

    def frames(self):
        """Wrapped snapshots with zero force labels, for extended XYZ dumps."""
        out = []
        for k in range(self.n_frames):
            s = Structure.from_cartesian(self.species, self.positions[k], self.lattice, {"time_fs": float(self.times[k])})
            out.append(LabeledFrame(s, self.potential_energy[k], np.zeros((len(self.species), 3)), np.zeros((3, 3)),
                                    Provenance.predicted))
        return out


def _kinetic(masses, v):
    return 0.5 * float(np.sum(masses[:, None] * v * v)) * cfg.AMU_A2_FS2_TO_EV


def maxwell_boltzmann(masses, T, rng, remove_com=True):
    """Velocities in A/fs; total momentum removed for more than one atom."""
    sigma = np.sqrt(cfg.KB_EV * T / masses / cfg.AMU_A2_FS2_TO_EV)
    v = rng.standard_normal((len(masses), 3)) * sigma[:, None]
    if remove_com and len(masses) > 1:
        v -= (masses[:, None] * v).sum(axis=0) / masses.sum()
    return v


def run_nvt(s, p, T, dt=None, steps=1000, friction=None, seed=0, stride=1, remove_com=True, velocities=None):
    """
    Langevin NVT run of `steps` steps, recording every `stride` steps (steps // stride + 1 frames).
    Deterministic for a given seed.
    """
    d = cfg.md_defaults
    dt = d["timestep"] if dt is None else float(dt)
    friction = d["friction"] if friction is None else float(friction)
    if dt <= 0 or dt > d["max_timestep"]:
        raise MDError(f"timestep {dt} fs outside (0, {d['max_timestep']}] fs")
    if T < 0 or friction < 0 or steps < 1 or stride < 1:
        raise MDError("temperature, friction must be >= 0 and steps, stride >= 1")

    rng = np.random.default_rng(seed)
    masses = s.masses
    inv_m = cfg.EV_A_AMU_TO_A_FS2 / masses[:, None]
    v = maxwell_boltzmann(masses, T, rng, remove_com) if velocities is None else np.array(velocities, dtype=float)
    x = s.cart_coords.copy()

    def _forces(positions, step):
        r = p.evaluate(s.with_cartesian(positions))
        if not (np.isfinite(r.energy) and np.all(np.isfinite(r.forces))):
            raise MDError("non-finite energy or forces", step=step)
        return r.forces, r.energy

    c1 = np.exp(-friction * dt)
    noise = np.sqrt((1.0 - c1 * c1) * cfg.KB_EV * T / masses / cfg.AMU_A2_FS2_TO_EV)[:, None]
    blowup = d["blowup_factor"] * T
    dof = 3 * len(masses)

    forces, energy = _forces(x, 0)
    positions, vels, epot, ekin = [x.copy()], [v.copy()], [energy], [_kinetic(masses, v)]
    for step in range(1, steps + 1):
        v = v + 0.5 * dt * forces * inv_m
        x = x + 0.5 * dt * v
        if friction > 0:
            v = c1 * v + noise * rng.standard_normal(v.shape)
        x = x + 0.5 * dt * v
        forces, energy = _forces(x, step)
        v = v + 0.5 * dt * forces * inv_m

        kinetic = _kinetic(masses, v)
        if T > 0 and 2.0 * kinetic / (dof * cfg.KB_EV) > blowup:
            raise MDError(f"kinetic temperature exceeded {d['blowup_factor']:g} x {T} K", step=step)
        if step % stride == 0:
            positions.append(x.copy())
            vels.append(v.copy())
            epot.append(energy)
            ekin.append(kinetic)

    return Trajectory(
        species=s.species,
        lattice=s.lattice.copy(),
        masses=masses,
        timestep=dt,
        stride=stride,
        positions=np.array(positions),
        velocities=np.array(vels),
        potential_energy=np.array(epot),
        kinetic_energy=np.array(ekin),
        thermostat={"kind": "langevin" if friction > 0 else "nve", "friction": friction, "temperature": float(T)},
        seed=seed,
    )


def msd_fft(positions):
    """
    Multi-time-origin mean squared displacement per atom, (frames, atoms) in A^2.

    MSD(m) = S1(m) - 2 S2(m) with S2 the position autocorrelation from a zero-padded FFT.
    """
    x = np.asarray(positions, dtype=float)
    n = len(x)
    sq = np.sum(x * x, axis=2)
    total = 2.0 * sq.sum(axis=0)
    lead = np.concatenate([np.zeros((1, sq.shape[1])), np.cumsum(sq, axis=0)[:-1]])
    tail = np.concatenate([np.zeros((1, sq.shape[1])), np.cumsum(sq[::-1], axis=0)[:-1]])
    counts = (n - np.arange(n))[:, None]
    s1 = (total - lead - tail) / counts

    spectrum = np.fft.rfft(x, n=2 * n, axis=0)
    corr = np.fft.irfft(spectrum * spectrum.conj(), n=2 * n, axis=0)[:n]
    s2 = corr.sum(axis=2) / counts
    msd = s1 - 2.0 * s2
    msd[0] = 0.0
    return np.maximum(msd, 0.0)


class Mobility(str, Enum):
    mobile = "mobile"
    inert = "inert"


def classify_mobility(D, threshold=1.0e-7):
    """Inert iff D < threshold (cm^2/s); D exactly at the threshold is mobile."""
    return Mobility.inert if D < threshold else Mobility.mobile


class DiffusivityReport(BaseModel):
    diffusivity: Dict[str, float] = Field(..., description="Per-species D, cm^2/s")
    r_squared: Dict[str, float] = Field(..., description="Linear-fit R^2 per species")
    diffusivity_all: float = Field(..., description="D of all selected atoms, cm^2/s")
    r_squared_all: float
    lag_times: List[float] = Field(..., description="fs")
    msd: List[float] = Field(..., description="All selected atoms, A^2")
    msd_by_species: Dict[str, List[float]]
    window: Tuple[float, float] = Field(..., description="Fit window (t_min, t_max), fs")
    dimension: int
    diffusive: bool = Field(..., description="False when R^2 is below the linearity threshold")

    def to_frame(self):
        columns = {"lag_fs": self.lag_times, "msd_all_A2": self.msd}
        for x, values in self.msd_by_species.items():
            columns[f"msd_{x}_A2"] = values
        return pd.DataFrame(columns)


def _fit(t, msd, lo, hi, dim):
    mask = (t >= lo - 1.0e-9) & (t <= hi + 1.0e-9)
    if mask.sum() < 2:
        raise MDError(f"fit window [{lo}, {hi}] fs holds fewer than 2 MSD points")
    y = msd[mask]
    if np.ptp(y) == 0.0:
        return 0.0, 1.0
    fit = linregress(t[mask], y)
    D = max(float(fit.slope), 0.0) / (2.0 * dim) * cfg.A2_FS_TO_CM2_S
    return D, float(fit.rvalue ** 2)


def einstein_diffusivity(traj, species=None, d=3, window=None, max_lag_fraction=None, min_r_squared=None):
    """
    D = slope / (2 d) of the particle-averaged MSD over the fit window, 1 A^2/fs = 0.1 cm^2/s.

    MSD lags run up to max_lag_fraction of the trajectory span; the default window is the
    [20%, 80%] part of that lag range. d < 3 uses the first d Cartesian components.
    """
    md = cfg.md_defaults
    if d not in (1, 2, 3):
        raise MDError(f"dimensionality must be 1, 2 or 3, got {d}")
    max_lag_fraction = md["max_lag_fraction"] if max_lag_fraction is None else max_lag_fraction
    min_r_squared = md["min_r_squared"] if min_r_squared is None else min_r_squared
    symbols = np.array(traj.species)
    selected = sorted(set(traj.species)) if species is None else sorted(species)
    missing = sorted(set(selected) - set(traj.species))
    if missing:
        raise MDError(f"species not in trajectory: {', '.join(missing)}")

    times = traj.times
    span = float(times[-1])
    n_lag = int(np.floor(max_lag_fraction * (traj.n_frames - 1))) + 1
    if window is None:
        lo_f, hi_f = md["window_fraction"]
        t_lag = times[n_lag - 1]
        window = (lo_f * t_lag, hi_f * t_lag)
    else:
        window = (float(window[0]), float(window[1]))
        if not 0 <= window[0] < window[1]:
            raise MDError(f"invalid fit window {window}")
        if window[1] > span:
            raise MDError(f"fit window ends at {window[1]} fs, beyond the {span} fs trajectory")
        if 4.0 * window[1] > span:
            logger.warning(f"einstein_diffusivity() - trajectory shorter than 4x the fit window ({span} fs)")
        n_lag = max(n_lag, int(np.ceil(window[1] / (traj.timestep * traj.stride) - 1.0e-9)) + 1)
        n_lag = min(n_lag, traj.n_frames)

    per_atom = msd_fft(traj.positions[:, :, :d])[:n_lag]
    lag = times[:n_lag]

    mask_all = np.isin(symbols, selected)
    msd_all = per_atom[:, mask_all].mean(axis=1)
    D_all, r2_all = _fit(lag, msd_all, *window, d)
    diffusivity, r_squared, curves = {}, {}, {}
    for x in selected:
        curve = per_atom[:, symbols == x].mean(axis=1)
        diffusivity[x], r_squared[x] = _fit(lag, curve, *window, d)
        curves[x] = curve.tolist()

    diffusive = r2_all >= min_r_squared
    if not diffusive:
        logger.warning(f"einstein_diffusivity() - MSD not linear in the window (R^2 = {r2_all:.4f})")
    return DiffusivityReport(
        diffusivity=diffusivity,
        r_squared=r_squared,
        diffusivity_all=D_all,
        r_squared_all=r2_all,
        lag_times=lag.tolist(),
        msd=msd_all.tolist(),
        msd_by_species=curves,
        window=window,
        dimension=d,
        diffusive=bool(diffusive),
    )
