"""
Cost accounting for oracle vs surrogate screening

Per structure the oracle-only path costs c_o; the surrogate path pays L labels and the
training once, then c_s per structure:

    C_oracle(M)    = M c_o
    C_surrogate(M) = L c_o + C_train + M c_s
    M*             = (L c_o + C_train) / (c_o - c_s)        (only when c_o > c_s)
"""

import threading
import time
from typing import Dict, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from utils._errors import CostModelError
from utils._helper import get_logger

logger = get_logger("cost")

_COUNTERS = (
    "oracle_evaluations", "surrogate_evaluations", "training_runs", "structures",
)
_TIMERS = ("oracle_seconds", "surrogate_seconds", "training_seconds")
# stages whose oracle evaluations are labels bought for training
LABEL_STAGES = ("seed_set", "label")


class CostLedger:
    """
    Per-stage evaluation counters and wall times. Updates are serialized through one lock,
    so concurrent workers never lose a count.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.stages = {}

    def _stage(self, stage):
        if stage not in self.stages:
            self.stages[stage] = {key: 0 for key in _COUNTERS}
            self.stages[stage].update({key: 0.0 for key in _TIMERS})
        return self.stages[stage]

    def record(self, stage, kind, count=1, seconds=0.0):
        if kind not in ("oracle", "surrogate", "training"):
            raise CostModelError(f"unknown cost kind '{kind}'")
        if count < 0 or seconds < 0:
            raise CostModelError("cost counters only grow")
        counter = "training_runs" if kind == "training" else f"{kind}_evaluations"
        with self._lock:
            entry = self._stage(stage)
            entry[counter] += int(count)
            entry[f"{kind}_seconds"] += float(seconds)

    def add_structures(self, stage, count=1):
        with self._lock:
            self._stage(stage)["structures"] += int(count)

    def wrap(self, potential, kind, stage):
        return CountingPotential(potential, self, kind, stage)

    def total(self, key):
        with self._lock:
            return sum(entry[key] for entry in self.stages.values())

    def counters(self):
        """Evaluation counts only; these are reproducible, wall times are not."""
        with self._lock:
            return {stage: {k: entry[k] for k in _COUNTERS} for stage, entry in sorted(self.stages.items())}

    def to_dict(self):
        with self._lock:
            return {stage: dict(entry) for stage, entry in sorted(self.stages.items())}

    @classmethod
    def from_dict(cls, data):
        ledger = cls()
        for stage, entry in data.items():
            ledger._stage(stage).update(entry)
        return ledger


class CountingPotential:
    """Delegates to a potential and books every evaluation on the ledger."""

    def __init__(self, potential, ledger, kind, stage):
        self.inner = potential
        self.ledger = ledger
        self.cost_kind = kind
        self.stage = stage

    def __getattr__(self, name):
        return getattr(self.inner, name)

    def evaluate(self, s):
        start = time.perf_counter()
        result = self.inner.evaluate(s)
        self.ledger.record(self.stage, self.cost_kind, 1, time.perf_counter() - start)
        return result

    def energy(self, s):
        return self.evaluate(s).energy

    def member_results(self, s):
        start = time.perf_counter()
        results = self.inner.member_results(s)
        self.ledger.record(self.stage, self.cost_kind, 1, time.perf_counter() - start)
        return results


class CostReport(BaseModel):
    source: str = Field(..., description="'supplied' or 'measured'")
    oracle_unit_cost: float = Field(..., description="Seconds per oracle evaluation")
    surrogate_unit_cost: float = Field(..., description="Seconds per surrogate evaluation")
    training_cost: float = Field(..., description="Seconds spent training")
    training_labels: int = Field(..., description="Oracle labels bought for training")
    evaluations_per_structure: float = Field(1.0, description="Evaluations spent per screened structure")
    speedup: Optional[float] = Field(None, description="c_o / c_s")
    crossover: Optional[float] = Field(None, description="Closed-form break-even structure count")
    crossover_structures: Optional[int] = Field(None, description="Smallest integer count where the surrogate path is cheaper")
    stage_speedups: Dict[str, float] = Field(default_factory=dict)


def crossover_count(oracle_unit_cost, surrogate_unit_cost, training_labels, training_cost=0.0, evaluations_per_structure=1.0):
    c_o = oracle_unit_cost * evaluations_per_structure
    c_s = surrogate_unit_cost * evaluations_per_structure
    if c_o <= c_s:
        return None
    return (training_labels * oracle_unit_cost + training_cost) / (c_o - c_s)


def stage_speedups(ledger):
    out = {}
    for stage, entry in ledger.to_dict().items():
        if entry["oracle_evaluations"] and entry["surrogate_evaluations"] and entry["surrogate_seconds"] > 0:
            oracle = entry["oracle_seconds"] / entry["oracle_evaluations"]
            surrogate = entry["surrogate_seconds"] / entry["surrogate_evaluations"]
            out[stage] = oracle / surrogate
    return out


def _measured(ledger):
    oracle_n = ledger.total("oracle_evaluations")
    surrogate_n = ledger.total("surrogate_evaluations")
    if not oracle_n or not surrogate_n:
        return None
    structures = ledger.total("structures")
    return {
        "oracle_unit_cost": ledger.total("oracle_seconds") / oracle_n,
        "surrogate_unit_cost": ledger.total("surrogate_seconds") / surrogate_n,
        "training_cost": ledger.total("training_seconds"),
        "training_labels": int(sum(ledger.stages.get(s, {}).get("oracle_evaluations", 0) for s in LABEL_STAGES)),
        "evaluations_per_structure": surrogate_n / structures if structures else 1.0,
    }


def cost_report(ledger=None, oracle_unit_cost=None, surrogate_unit_cost=None, training_cost=None,
                training_labels=None, evaluations_per_structure=None, max_structures=1000):
    """
    Supplied unit costs take precedence over measured ones field by field.
    Returns (CostReport, DataFrame of cumulative cost curves).
    """
    measured = _measured(ledger) if ledger is not None else None
    supplied = {
        "oracle_unit_cost": oracle_unit_cost,
        "surrogate_unit_cost": surrogate_unit_cost,
        "training_cost": training_cost,
        "training_labels": training_labels,
        "evaluations_per_structure": evaluations_per_structure,
    }
    model = {}
    for key, value in supplied.items():
        if value is not None:
            model[key] = value
        elif measured is not None:
            model[key] = measured[key]
    missing = [k for k in ("oracle_unit_cost", "surrogate_unit_cost") if k not in model]
    if missing:
        raise CostModelError(f"no cost model: supply or measure {', '.join(missing)}")
    model.setdefault("training_cost", 0.0)
    model.setdefault("training_labels", 0)
    model.setdefault("evaluations_per_structure", 1.0)
    if model["oracle_unit_cost"] < 0 or model["surrogate_unit_cost"] < 0:
        raise CostModelError("unit costs must be non-negative")

    crossover = crossover_count(
        model["oracle_unit_cost"], model["surrogate_unit_cost"], model["training_labels"],
        model["training_cost"], model["evaluations_per_structure"],
    )
    speedup = None
    if model["surrogate_unit_cost"] > 0:
        speedup = model["oracle_unit_cost"] / model["surrogate_unit_cost"]
    report = CostReport(
        source="supplied" if oracle_unit_cost is not None and surrogate_unit_cost is not None else "measured",
        speedup=speedup,
        crossover=crossover,
        crossover_structures=None if crossover is None else int(np.ceil(crossover - 1.0e-9)),
        stage_speedups=stage_speedups(ledger) if ledger is not None else {},
        **model,
    )

    M = np.arange(max_structures + 1, dtype=float)
    e = model["evaluations_per_structure"]
    curves = pd.DataFrame({
        "structures": M.astype(int),
        "oracle_only": M * e * model["oracle_unit_cost"],
        "surrogate_path": model["training_labels"] * model["oracle_unit_cost"] + model["training_cost"]
        + M * e * model["surrogate_unit_cost"],
    })
    if crossover is not None:
        logger.info(f"cost_report() - crossover at {crossover:.1f} structures, speedup {speedup or float('inf'):.1f}x")
    return report, curves
