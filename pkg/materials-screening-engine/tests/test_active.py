import numpy as np
import pytest

from conftest import dimer
from utils._active import (
    Thresholds,
    derived_seed,
    flag_uncertain,
    is_uncertain,
    pass_fraction,
    run_al_loop,
    should_terminate,
)
from utils._cost import CostLedger
from utils._fit import FitHyperparams
from utils._potential import EnsembleStats, EnsemblePotential, LennardJones

QUICK = FitHyperparams(epochs=3, batch_size=8, hidden=[8])


def _stats(energy_std, force_std, stress_std=0.0):
    return EnsembleStats(mean=None, energy_std=energy_std, force_std=force_std, stress_std=stress_std)


class TestThresholds:
    def test_energy_spread_flags(self):
        assert is_uncertain(_stats(0.045, 0.5), Thresholds())

    def test_quiet_structure_passes(self):
        assert not is_uncertain(_stats(0.010, 0.2), Thresholds())

    def test_force_spread_flags(self):
        assert is_uncertain(_stats(0.010, 1.5), Thresholds())

    def test_stress_limit_is_off_by_default(self):
        assert not is_uncertain(_stats(0.0, 0.0, 10.0), Thresholds())
        assert is_uncertain(_stats(0.0, 0.0, 10.0), Thresholds(stress_std_max=1.0))

    def test_termination(self):
        fraction = pass_fraction(100, 8)
        assert fraction == pytest.approx(0.92)
        assert should_terminate(fraction, Thresholds())
        assert not should_terminate(pass_fraction(100, 11), Thresholds())
        assert pass_fraction(0, 0) == 1.0


def test_flag_uncertain():
    ensemble = EnsemblePotential([LennardJones(epsilon=1.0, sigma=1.0), LennardJones(epsilon=1.2, sigma=1.0)])
    close, apart = dimer(1.1), dimer(3.0)
    flagged, fraction = flag_uncertain(ensemble, [close, apart], Thresholds(), max_workers=2)
    assert flagged == [close]
    assert fraction == 0.5


def test_derived_seed():
    assert derived_seed(0, 1, 2) == derived_seed(0, 1, 2)
    assert derived_seed(0, 1, 2) != derived_seed(0, 2, 1)


@pytest.mark.slow
class TestLoop:
    def test_single_cycle_when_everything_passes(self, argon_spec, oracle):
        ledger = CostLedger()
        seen = []
        run = run_al_loop(
            argon_spec, oracle, th=Thresholds(pass_fraction_min=0.0), per_cycle_count=4, seed=0, k=2,
            hyperparams=QUICK, seed_structures=10, frames_per_structure=4, validation_count=3,
            max_workers=2, ledger=ledger, on_cycle=seen.append,
        )
        assert len(run.records) == 1
        record = run.records[0]
        assert record.terminated
        assert record.candidates == 4
        assert seen == run.records
        assert record.training_set_size == len(run.frames)
        labels = ledger.counters().get("label", {}).get("oracle_evaluations", 0)
        assert labels == sum(r.labeled for r in run.records)
        assert ledger.counters()["validation"]["oracle_evaluations"] == 3 + record.candidates - record.labeled
        assert len(run.uncertainty_table()) == 4
        assert len(run.validation) == 3
        assert ledger.counters()["seed_set"]["oracle_evaluations"] > 0

    def test_initial_frames_skip_the_seed_set(self, argon_spec, oracle, morse_frames):
        ledger = CostLedger()
        run = run_al_loop(
            argon_spec, oracle, th=Thresholds(pass_fraction_min=1.0, max_cycles=2), per_cycle_count=3, seed=1,
            k=2, hyperparams=QUICK, initial_frames=morse_frames, validation_count=2, max_workers=2, ledger=ledger,
        )
        assert "seed_set" not in ledger.counters()
        assert 1 <= len(run.records) <= 2
        assert run.records[-1].terminated
        assert len(run.frames) == len(morse_frames) + sum(r.labeled for r in run.records)
        assert all(np.isfinite(r.energy_mae_mev) for r in run.records)
        assert ledger.counters()["training"]["training_runs"] >= 2

    def test_converges_against_the_oracle(self, argon_spec, oracle):
        # a thin seed set leaves the first ensemble uncertain on relaxed cells
        run = run_al_loop(
            argon_spec, oracle, th=Thresholds(), per_cycle_count=10, seed=4, k=2,
            hyperparams=FitHyperparams(epochs=30, batch_size=8, hidden=[8]), seed_structures=2,
            frames_per_structure=5, validation_count=10, max_workers=4,
        )
        first, last = run.records[0], run.records[-1]
        assert last.terminated
        assert last.pass_fraction >= 0.90
        assert len(run.records) >= 2
        assert last.energy_mae_mev < first.energy_mae_mev
        hashes = [f.structure.content_hash() for f in run.frames]
        assert len(set(hashes)) == len(hashes)
