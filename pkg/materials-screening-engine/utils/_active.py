"""
Active learning with ensemble uncertainty

One cycle: generate candidates -> relax them with the ensemble mean -> flag the uncertain ones
-> label the flagged ones with the oracle -> retrain the ensemble from scratch.
The loop stops as soon as the pass fraction reaches pass_fraction_min, or after max_cycles.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import time
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

import config as cfg
from utils._errors import RelaxationError, TrainingError
from utils._explore import generate_candidates
from utils._file_formats import LabeledFrame, Provenance
from utils._fit import train_ensemble
from utils._helper import get_logger
from utils._potential import ensemble_stats
from utils._relax import relax_positions

logger = get_logger("active")


class Thresholds(BaseModel):
    energy_std_max: float = Field(0.040, gt=0, description="Ensemble energy std limit, eV/atom")
    force_std_max: float = Field(1.0, gt=0, description="Ensemble force std limit, eV/A")
    stress_std_max: Optional[float] = Field(None, gt=0, description="Ensemble stress std limit, eV/A^3; off when unset")
    pass_fraction_min: float = Field(0.90, ge=0, le=1, description="Terminate when this share of candidates passes")
    max_cycles: int = Field(15, ge=1)


def is_uncertain(stats, th):
    if stats.energy_std > th.energy_std_max or stats.force_std > th.force_std_max:
        return True
    return th.stress_std_max is not None and stats.stress_std > th.stress_std_max


def pass_fraction(n_candidates, n_flagged):
    return 1.0 - n_flagged / n_candidates if n_candidates else 1.0


def should_terminate(fraction, th):
    return fraction >= th.pass_fraction_min


def uncertainties(e, structures, max_workers=None):
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(lambda s: ensemble_stats(e, s), structures))


def flag_uncertain(e, structures, th, max_workers=None):
    """Flagged iff energy std or force std (or stress std when enabled) exceeds its limit."""
    stats = uncertainties(e, structures, max_workers)
    flagged = [s for s, st in zip(structures, stats) if is_uncertain(st, th)]
    return flagged, pass_fraction(len(structures), len(flagged))


class ALCycleRecord(BaseModel):
    cycle: int
    candidates: int
    flagged: int
    pass_fraction: float
    labeled: int = Field(..., description="New oracle labels added this cycle")
    energy_mae_mev: float = Field(..., description="Direct-prediction validation energy MAE, meV/atom")
    force_mae: float = Field(..., description="Direct-prediction validation force MAE, eV/A")
    relaxed_energy_mae_mev: float = Field(..., description="MAE of surrogate vs oracle energy on the surrogate-relaxed candidates, meV/atom")
    training_set_size: int = Field(..., description="Frames after this cycle's augmentation")
    terminated: bool


@dataclass
class ALRun:
    records: List[ALCycleRecord]
    ensemble: object
    frames: List[LabeledFrame]
    validation: List[LabeledFrame]
    uncertainty_rows: List[dict] = field(default_factory=list)

    def uncertainty_table(self):
        return pd.DataFrame(self.uncertainty_rows, columns=[
            "cycle", "structure", "energy_std", "force_std", "stress_std", "relaxed_energy_abs_error", "flagged",
        ])


def derived_seed(seed, *tags):
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


def _label(oracle, s, provenance=Provenance.oracle):
    r = oracle.evaluate(s)
    return LabeledFrame(s, r.energy, r.forces, r.stress, provenance)


def seed_frames(gen_specs, oracle, count, frames_per_structure, seed, f_tol=None, max_iter=200, max_workers=None):
    """
    Oracle relaxation trajectories of random structures, subsampled evenly
    (first and last frame always kept).
    """
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers
    structures = []
    for k, spec in enumerate(gen_specs):
        share = count // len(gen_specs) + (1 if k < count % len(gen_specs) else 0)
        if share:
            sub = spec.model_copy(update={"seed": derived_seed(seed, 1, k)})
            structures.extend(generate_candidates(sub, share, max_workers=max_workers))

    def _trajectory(s):
        try:
            return relax_positions(s, oracle, f_tol, max_iter, keep_trajectory=True).trajectory
        except RelaxationError as e:
            logger.warning(f"seed_frames() - oracle relaxation failed, keeping the start frame: {e}")
            return [_label(oracle, s)]

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        trajectories = list(executor.map(_trajectory, structures))

    frames = []
    for trajectory in trajectories:
        picks = np.unique(np.linspace(0, len(trajectory) - 1, frames_per_structure).round().astype(int))
        for k in picks:
            f = trajectory[k]
            frames.append(LabeledFrame(f.structure, f.energy, f.forces, f.stress, Provenance.oracle))
    return frames


def _validation_metrics(e, frames, max_workers):
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        predictions = list(executor.map(lambda f: e.evaluate(f.structure), frames))
    energy = np.mean([abs(f.energy - p.energy) / f.structure.n_atoms for f, p in zip(frames, predictions)])
    force = np.mean(np.concatenate([np.abs(f.forces - p.forces).ravel() for f, p in zip(frames, predictions)]))
    return 1000.0 * float(energy), float(force)


def _retrain(frames, k, seed, cycle, hyperparams, split, max_workers, ledger):
    start = time.perf_counter()
    try:
        ensemble = train_ensemble(frames, k=k, seed=seed, split=split, hyperparams=hyperparams, max_workers=max_workers)
    except TrainingError as e:
        raise TrainingError(str(e), cycle=cycle)
    if ledger is not None:
        ledger.record("training", "training", k, time.perf_counter() - start)
    return ensemble


def run_al_loop(gen, oracle, th=None, per_cycle_count=20, seed=0, k=4, hyperparams=None, split=0.2,
                initial_frames=None, seed_structures=10, frames_per_structure=5, validation_count=100,
                relax_f_tol=None, relax_max_iter=200, max_workers=None, ledger=None, on_cycle=None):
    """
    gen: one GeneratorSpec or a list of them (candidates are split evenly over the list).
    oracle: ground-truth potential; every oracle call goes through the ledger when one is given.
    on_cycle: optional callback receiving each ALCycleRecord as it is produced.
    """
    th = Thresholds() if th is None else th
    max_workers = cfg.max_thread_workers if max_workers is None else max_workers
    gen_specs = list(gen) if isinstance(gen, (list, tuple)) else [gen]
    label_oracle = ledger.wrap(oracle, "oracle", "label") if ledger is not None else oracle
    seed_oracle = ledger.wrap(oracle, "oracle", "seed_set") if ledger is not None else oracle
    check_oracle = ledger.wrap(oracle, "oracle", "validation") if ledger is not None else oracle

    if initial_frames is None:
        frames = seed_frames(gen_specs, seed_oracle, seed_structures, frames_per_structure, seed,
                             relax_f_tol, relax_max_iter, max_workers)
    else:
        frames = list(initial_frames)
    labeled = {f.structure.content_hash() for f in frames}

    validation_structures = []
    for j, spec in enumerate(gen_specs):
        share = validation_count // len(gen_specs) + (1 if j < validation_count % len(gen_specs) else 0)
        if share:
            sub = spec.model_copy(update={"seed": derived_seed(seed, 2, j)})
            validation_structures.extend(generate_candidates(sub, share, max_workers=max_workers))
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        validation = list(executor.map(lambda s: _label(check_oracle, s), validation_structures))
    logger.info(f"run_al_loop() - {len(frames)} seed frames, {len(validation)} validation structures")

    ensemble = _retrain(frames, k, derived_seed(seed, 3, 0), 0, hyperparams, split, max_workers, ledger)
    records, rows = [], []
    for cycle in range(1, th.max_cycles + 1):
        candidates = []
        for j, spec in enumerate(gen_specs):
            share = per_cycle_count // len(gen_specs) + (1 if j < per_cycle_count % len(gen_specs) else 0)
            if share:
                sub = spec.model_copy(update={"seed": derived_seed(seed, 4, cycle, j)})
                candidates.extend(generate_candidates(sub, share, max_workers=max_workers))
        surrogate = ledger.wrap(ensemble, "surrogate", "al_relax") if ledger is not None else ensemble

        def _relax(s):
            try:
                return relax_positions(s, surrogate, relax_f_tol, relax_max_iter, keep_trajectory=False).structure
            except RelaxationError as e:
                logger.warning(f"run_al_loop() - cycle {cycle}: surrogate relaxation failed, keeping the start geometry: {e}")
                return s

        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            relaxed = list(executor.map(_relax, candidates))
        stats = uncertainties(surrogate, relaxed, max_workers)
        flags = [is_uncertain(st, th) for st in stats]
        keys = [s.content_hash() for s in relaxed]
        to_label = []
        for key, flagged in zip(keys, flags):
            to_label.append(flagged and key not in labeled)
            if to_label[-1]:
                labeled.add(key)

        # flagged structures are bought as labels, the rest only feed the error diagnostics
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            truth = list(executor.map(
                lambda job: _label(label_oracle if job[1] else check_oracle, job[0]), zip(relaxed, to_label)
            ))
        errors = [abs(st.mean.energy - t.energy) / s.n_atoms for s, st, t in zip(relaxed, stats, truth)]
        new = 0
        for key, st, t, flagged, bought, err in zip(keys, stats, truth, flags, to_label, errors):
            rows.append({
                "cycle": cycle,
                "structure": key[:16],
                "energy_std": st.energy_std,
                "force_std": st.force_std,
                "stress_std": st.stress_std,
                "relaxed_energy_abs_error": err,
                "flagged": flagged,
            })
            if bought:
                frames.append(t)
                new += 1

        fraction = pass_fraction(len(relaxed), sum(flags))
        energy_mae, force_mae = _validation_metrics(ensemble, validation, max_workers)
        done = should_terminate(fraction, th)
        record = ALCycleRecord(
            cycle=cycle,
            candidates=len(relaxed),
            flagged=sum(flags),
            pass_fraction=fraction,
            labeled=new,
            energy_mae_mev=energy_mae,
            force_mae=force_mae,
            relaxed_energy_mae_mev=1000.0 * float(np.mean(errors)) if errors else 0.0,
            training_set_size=len(frames),
            terminated=done or cycle == th.max_cycles,
        )
        records.append(record)
        logger.info(
            f"run_al_loop() - cycle {cycle}: {record.flagged}/{record.candidates} flagged, pass fraction "
            f"{fraction:.3f}, validation energy MAE {energy_mae:.2f} meV/atom"
        )
        if on_cycle is not None:
            on_cycle(record)
        if done:
            break
        if new:
            ensemble = _retrain(frames, k, derived_seed(seed, 3, cycle), cycle, hyperparams, split, max_workers, ledger)

    return ALRun(records=records, ensemble=ensemble, frames=frames, validation=validation, uncertainty_rows=rows)
