"""
Screening campaign orchestration

screen: generate -> relax -> Delta G_form(T) from phonons -> rank at T* -> MD diffusivity of the
most stable candidates -> mobility class. Each candidate is one job on the work queue; a failing
candidate is recorded and skipped. Stage results are cached by content so a rerun of a finished
campaign recomputes nothing.

Output directory layout:

    report.json               ScreenReport (deterministic, no wall times)
    polymorphs_<formula>.csv  ranked table head (top_table rows)
    free_energy_<formula>.csv Delta G_form on the temperature grid, one row per (candidate, T)
    candidates_<formula>.xyz  generated pool
    diffusivity.csv           MD results of the top candidates
    md/<id>_msd.csv           MSD curves
    heatmap.csv               dopant x site Delta Delta G (when dopants are configured)
    dopant_rows.csv           every host x dopant x site x temperature row
    structures/<hash>.vasp    every relaxed structure referenced by the report
    potential.json            surrogate checkpoint (active learning or checkpoint source)
    al_cycles.jsonl           ALCycleRecord stream
    uncertainty_vs_error.csv  ensemble spread vs relaxed-energy error per AL candidate
    events.jsonl              event log
    cost_ledger.json          evaluation counters and wall times
    cache/                    content-addressed stage results
"""

import os
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, Field

import config as cfg
from utils._active import ALCycleRecord, Thresholds, derived_seed, run_al_loop
from utils._campaign_config import config_hash
from utils._cost import CostLedger
from utils._errors import CampaignError, PhononError, PotentialError, QHABoundaryError
from utils._explore import (
    FormationEnergy,
    GeneratorSpec,
    SubstitutionSpec,
    enumerate_substitutions,
    formula,
    generate_candidates,
    heatmap_frame,
    rank_stabilization,
)
from utils._file_formats import read_poscar, unlabeled_frame, write_extxyz, write_poscar, write_text_file
from utils._fit import FitHyperparams
from utils._helper import (
    EventLog,
    ResultCache,
    content_hash,
    read_json_file,
    transform_dict_n_str,
    write_json_file,
    write_table,
)
from utils._job_management import _JobManagement
from utils._md import classify_mobility, einstein_diffusivity, run_nvt
from utils._mech import elastic_tensor
from utils._phonon import dispersion, force_constants, gibbs_qha, helmholtz_free_energy
from utils._potential import (
    checkpoint_text,
    compute_formation_energy,
    load_potential,
    oracle_potential,
    potential_from_checkpoint,
)
from utils._relax import relax, relax_positions
from utils._structure import Structure, make_supercell


class PolymorphRow(BaseModel):
    rank: int
    id: str = Field(..., description="First 16 hex digits of the relaxed structure's content hash")
    formula: str
    status: str = Field(..., description="'ok' or 'failed'")
    message: Optional[str] = None
    structure_file: Optional[str] = None
    delta_g_tstar: Optional[float] = Field(None, description="eV/atom at T*")
    delta_g_0K: Optional[float] = Field(None, description="eV/atom at 0 K")
    energy_per_atom: Optional[float] = None
    volume_per_atom: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    c: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    gamma: Optional[float] = None
    converged: bool = False
    imaginary: bool = Field(False, description="Imaginary phonon modes; ranked after every stable candidate")
    qha_boundary: bool = Field(False, description="Quasi-harmonic minimum at the scan edge, harmonic value used")


class DiffusivityRow(BaseModel):
    id: str
    formula: str
    diffusivity: Dict[str, float] = Field(..., description="cm^2/s per species")
    diffusivity_mean: float = Field(..., description="Mean over species, used for the mobility class")
    r_squared: float
    diffusive: bool
    mobility: str
    desirability: str = Field(..., description="'desired' (mobile) or 'undesired' (inert) among stable polymorphs")


class CompositionReport(BaseModel):
    formula: str
    candidates: int
    failed: int
    polymorphs: List[PolymorphRow]
    diffusivity: List[DiffusivityRow] = Field(default_factory=list)


class DopantReport(BaseModel):
    concentration: float
    temperatures: List[float]
    hosts: List[str]
    rows: List[dict] = Field(..., description="One row per host x dopant x site x temperature")
    stabilizing_dopants: List[str] = Field(..., description="Dopants with Delta Delta G < 0 on every host at T*")


class ScreenReport(BaseModel):
    schema_version: int = cfg.report_schema_version
    config_hash: str
    seed: int
    t_star: float
    pressure: float
    temperatures: List[float]
    potential: Dict[str, str]
    free_energy_model: str = Field(..., description="'harmonic' or 'quasi-harmonic'")
    compositions: List[CompositionReport]
    al_cycles: List[ALCycleRecord] = Field(default_factory=list)
    dopants: Optional[DopantReport] = None


def generator_specs(config, include_dopants=False):
    """
    One GeneratorSpec per configured composition; with include_dopants also one per
    (composition, dopant, site) with a single site atom swapped for the dopant.
    """
    g = config.generator
    compositions = [dict(c) for c in g.compositions]
    if include_dopants:
        for composition in g.compositions:
            for dopant in config.dopants.dopants:
                for site in config.dopants.sites:
                    if site in composition and dopant != site:
                        doped = dict(composition)
                        doped[site] -= 1
                        doped[dopant] = doped.get(dopant, 0) + 1
                        compositions.append({x: n for x, n in doped.items() if n > 0})
    return [
        GeneratorSpec(
            composition=composition,
            max_atoms=g.max_atoms,
            volume_per_atom=g.volume_per_atom,
            angle_range=g.angle_range,
            min_distance_scale=g.min_distance_scale,
            min_distances=g.min_distances,
            max_attempts=g.max_attempts,
            seed=derived_seed(config.seed, 10, k),
        )
        for k, composition in enumerate(compositions)
    ]


def hyperparams_from_config(config):
    d = config.potential.descriptor
    f = config.fit
    return FitHyperparams(
        epochs=f.epochs, learning_rate=f.learning_rate, momentum=f.momentum, batch_size=f.batch_size,
        alpha=f.alpha, n_centers=d.n_centers, center_min=d.center_min, eta=d.eta, cutoff=d.cutoff, hidden=d.hidden,
    )


def _sections(config, *names):
    data = config.model_dump(mode="json")
    return {name: data[name] for name in names}


def free_energy_temperatures(config):
    return sorted(set(config.temperatures.grid) | {0.0, config.temperatures.t_star})


def formation_free_energies(s, p, config, temperatures):
    """
    Delta G_form(T) per atom of a relaxed structure.
    Returns {"imaginary", "qha_boundary", "energy", "delta_g": {T: eV/atom}}; delta_g is empty
    when the structure has imaginary modes.
    """
    ph_cfg = config.phonon
    E = p.evaluate(s).energy
    fc = force_constants(s, p, ph_cfg.repeat, ph_cfg.amplitude, max_workers=1)
    ph = dispersion(fc, mesh=ph_cfg.qgrid, max_workers=1)
    if ph.has_imaginary:
        return {"imaginary": True, "qha_boundary": False, "energy": E, "delta_g": {}}

    refs = config.references
    pressure = config.pressure
    harmonic = {T: compute_formation_energy(E + pressure * s.volume + helmholtz_free_energy(ph, T), s, refs)
                for T in temperatures}
    if not ph_cfg.qha:
        return {"imaginary": False, "qha_boundary": False, "energy": E, "delta_g": harmonic}

    scan = []
    try:
        for scale in ph_cfg.qha_volume_scales:
            scaled = s.deformed(np.eye(3) * scale ** (1.0 / 3.0))
            relaxed = relax_positions(scaled, p, config.relax.f_tol, config.relax.max_iter, keep_trajectory=False)
            fc_v = force_constants(relaxed.structure, p, ph_cfg.repeat, ph_cfg.amplitude, max_workers=1)
            scan.append((relaxed.structure.volume, relaxed.energy, dispersion(fc_v, mesh=ph_cfg.qgrid, max_workers=1)))
        delta_g = {}
        for T in temperatures:
            G, _ = gibbs_qha(scan, T, pressure)
            delta_g[T] = compute_formation_energy(G, s, refs)
    except (QHABoundaryError, PhononError):
        return {"imaginary": False, "qha_boundary": True, "energy": E, "delta_g": harmonic}
    return {"imaginary": False, "qha_boundary": False, "energy": E, "delta_g": delta_g}


def _canonical(s):
    """Drop the exact Cartesian copy so the structure equals its POSCAR round trip."""
    return Structure(s.species, s.frac_coords, s.lattice, s.tags)


class ScreeningCampaign():
    def __init__(self, config, logger, out_dir=None, max_workers=None):
        self.config = config
        self.logger = logger
        self.out_dir = config.output_dir if out_dir is None else out_dir
        self.max_workers = cfg.max_thread_workers if max_workers is None else max_workers
        self.hash = config_hash(config)
        self.cache = ResultCache(self.path("cache"))
        self.events = EventLog(self.path("events.jsonl"))
        ledger_file = self.path("cost_ledger.json")
        self.ledger = CostLedger.from_dict(read_json_file(ledger_file)) if os.path.exists(ledger_file) else CostLedger()
        self.job_manager = _JobManagement(logger, self.max_workers)
        self.oracle = oracle_potential(config.oracle)
        self.potential = None
        self.potential_info = {}
        self.al_records = []
        self.stable_rows = []

    def path(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def read_structure(self, relative_path):
        with open(self.path(relative_path), "r") as f:
            return read_poscar(f.read())

    def save_ledger(self):
        write_json_file(self.path("cost_ledger.json"), self.ledger.to_dict())

    def check_references(self, elements):
        missing = sorted(set(elements) - set(self.config.references))
        if missing:
            raise CampaignError(f"missing reference energy for: {', '.join(missing)}")

    def _counted(self, p, stage):
        return self.ledger.wrap(p, "oracle" if p is self.oracle else "surrogate", stage)

    # ------------------------------------------------------------ potential

    def load_surrogate(self):
        """Oracle, stored checkpoint or active-learning ensemble, as configured."""
        if self.potential is not None:
            return self.potential
        source = self.config.potential.source
        if source == "oracle":
            self.potential = self.oracle
            self.potential_info = {"source": "oracle", "id": content_hash(self.config.oracle.model_dump(mode="json"))[:16]}
        elif source == "checkpoint":
            self.potential = load_potential(self.config.potential.checkpoint)
            text = checkpoint_text(self.potential)
            write_text_file(self.path("potential.json"), text)
            self.potential_info = {"source": "checkpoint", "id": content_hash(text)[:16]}
        else:
            self.potential = self._active_learning()
        missing = self.potential.missing_species(self.config.elements)
        if missing:
            raise PotentialError(f"potential does not cover species: {', '.join(missing)}")
        return self.potential

    def _active_learning(self):
        c = self.config
        key = content_hash(_sections(c, "seed", "generator", "thresholds", "oracle", "fit", "active_learning",
                                     "potential", "dopants", "relax"))
        cached = self.cache.get("potential", key)
        if cached is not None:
            self.logger.info(f"_active_learning() - cached ensemble {key[:12]}")
            self.events.emit("cache_hit", stage="active_learning", key=key)
            ensemble = potential_from_checkpoint(cached["checkpoint"])
            self.al_records = [ALCycleRecord(**r) for r in cached["records"]]
        else:
            self.events.emit("stage_start", stage="active_learning")
            al = c.active_learning

            def _on_cycle(record):
                self.events.emit("al_cycle", stage="active_learning", **record.model_dump(mode="json"))

            run = run_al_loop(
                generator_specs(c, include_dopants=True), self.oracle, Thresholds(**c.thresholds.model_dump()),
                per_cycle_count=al.per_cycle_count, seed=c.seed, k=c.potential.ensemble_size,
                hyperparams=hyperparams_from_config(c), split=c.fit.validation_fraction,
                seed_structures=al.seed_structures, frames_per_structure=al.seed_frames_per_structure,
                validation_count=al.validation_count, relax_f_tol=c.relax.f_tol, relax_max_iter=al.relax_max_iter,
                max_workers=self.max_workers, ledger=self.ledger, on_cycle=_on_cycle,
            )
            ensemble = run.ensemble
            self.al_records = run.records
            write_table(self.path("uncertainty_vs_error.csv"), run.uncertainty_table())
            self.cache.put("potential", key, {
                "checkpoint": transform_dict_n_str(checkpoint_text(ensemble), dict_2_str=False),
                "records": [r.model_dump(mode="json") for r in run.records],
            })
            self.save_ledger()
            self.events.emit("stage_finish", stage="active_learning", cycles=len(run.records))
        text = checkpoint_text(ensemble)
        write_text_file(self.path("potential.json"), text)
        write_text_file(self.path("al_cycles.jsonl"), "".join(r.model_dump_json() + "\n" for r in self.al_records))
        self.potential_info = {"source": "active_learning", "id": content_hash(text)[:16]}
        return ensemble

    # ------------------------------------------------------------ candidates

    def _candidate_key(self, s):
        return content_hash(
            s.content_hash(), self.potential_info.get("id", ""),
            _sections(self.config, "relax", "phonon", "temperatures", "pressure", "references"),
        )

    def evaluate_candidate(self, s, stage="screen"):
        """Relax, store and price one structure; cached by its content and settings."""
        key = self._candidate_key(s)
        cached = self.cache.get(stage, key)
        if cached is not None:
            self.events.emit("cache_hit", stage=stage, key=key)
            return cached

        c = self.config
        p = self._counted(self.potential, stage)
        relaxed = relax(s, p, cell=c.relax.cell, f_tol=c.relax.f_tol, stress_tol=c.relax.stress_tol,
                        max_iter=c.relax.max_iter, pressure=c.pressure, keep_trajectory=False)
        final = _canonical(relaxed.structure)
        structure_hash = final.content_hash()
        structure_file = os.path.join("structures", f"{structure_hash}.vasp")
        write_text_file(self.path(structure_file), write_poscar(final))

        thermo = formation_free_energies(final, p, c, free_energy_temperatures(c))
        self.ledger.add_structures(stage)
        temperatures = sorted(thermo["delta_g"])
        result = {
            "status": True,
            "id": structure_hash[:16],
            "hash": structure_hash,
            "formula": formula(final.composition),
            "structure_file": structure_file,
            "converged": bool(relaxed.converged),
            "imaginary": thermo["imaginary"],
            "qha_boundary": thermo["qha_boundary"],
            "energy_per_atom": thermo["energy"] / final.n_atoms,
            "volume_per_atom": final.volume / final.n_atoms,
            "lattice": list(final.lattice_parameters()),
            # JSON keys are strings, so temperatures travel as a parallel list
            "temperatures": temperatures,
            "delta_g": [thermo["delta_g"][T] for T in temperatures],
        }
        self.cache.put(stage, key, result)
        return result

    def _run_jobs(self, structures, stage, label):
        """Evaluate structures on the work queue; results in input order, failures as {"status": False, ...}."""
        jobs = [{"id": f"{stage}:{label}:{k}", "stage": stage, "structure": s} for k, s in enumerate(structures)]
        self.job_manager.add_new_jobs(jobs)
        results = self.job_manager.start_jobs(
            lambda job: {"candidate": self.evaluate_candidate(job["structure"], stage)}
        )
        out = []
        for k, result in enumerate(results):
            if result.get("status"):
                out.append(result["candidate"])
            else:
                self.events.emit("candidate_failed", stage=stage, label=label, index=k, message=result.get("message"))
                out.append({"status": False, "message": result.get("message")})
        return out

    @staticmethod
    def delta_g_at(result, T):
        if not result.get("status") or result.get("imaginary"):
            return None
        return result["delta_g"][result["temperatures"].index(T)]

    def rank(self, results, label):
        """Stable candidates by (Delta G(T*), content hash), then imaginary ones, then failures."""
        t_star = self.config.temperatures.t_star

        def _key(item):
            k, r = item
            if not r.get("status"):
                return (2, 0.0, f"{k:08d}")
            if r["imaginary"]:
                return (1, 0.0, r["hash"])
            return (0, self.delta_g_at(r, t_star), r["hash"])

        rows = []
        for rank, (k, r) in enumerate(sorted(enumerate(results), key=_key), start=1):
            if not r.get("status"):
                rows.append(PolymorphRow(rank=rank, id=f"failed-{k:04d}", formula=label, status="failed",
                                         message=r.get("message")))
                continue
            a, b, c, alpha, beta, gamma = r["lattice"]
            rows.append(PolymorphRow(
                rank=rank, id=r["id"], formula=r["formula"], status="ok", structure_file=r["structure_file"],
                delta_g_tstar=self.delta_g_at(r, t_star), delta_g_0K=self.delta_g_at(r, 0.0),
                energy_per_atom=r["energy_per_atom"], volume_per_atom=r["volume_per_atom"],
                a=a, b=b, c=c, alpha=alpha, beta=beta, gamma=gamma,
                converged=r["converged"], imaginary=r["imaginary"], qha_boundary=r["qha_boundary"],
            ))
        return rows

    # ------------------------------------------------------------ MD

    def diffusivity_of(self, row):
        c = self.config
        key = content_hash(row.id, self.potential_info.get("id", ""), _sections(c, "md", "seed"))
        cached = self.cache.get("md", key)
        if cached is not None:
            self.events.emit("cache_hit", stage="md", key=key)
            return DiffusivityRow(**cached)
        sup = make_supercell(self.read_structure(row.structure_file), c.md.repeat).structure
        traj = run_nvt(sup, self._counted(self.potential, "md"), c.md.temperature, c.md.timestep, c.md.steps,
                       c.md.friction, seed=derived_seed(c.seed, 5, int(row.id, 16) % (2 ** 32)), stride=c.md.stride)
        report = einstein_diffusivity(traj)
        write_table(self.path("md", f"{row.id}_msd.csv"), report.to_frame())
        self.ledger.add_structures("md")
        mean = float(np.mean(list(report.diffusivity.values())))
        mobility = classify_mobility(mean, c.md.mobility_threshold)
        out = DiffusivityRow(
            id=row.id, formula=row.formula, diffusivity=report.diffusivity, diffusivity_mean=mean,
            r_squared=report.r_squared_all, diffusive=report.diffusive, mobility=mobility.value,
            desirability="desired" if mobility.value == "mobile" else "undesired",
        )
        self.cache.put("md", key, out.model_dump(mode="json"))
        return out

    def md_stage(self, rows):
        stable = [r for r in rows if r.status == "ok" and not r.imaginary][: self.config.screen.top_md]
        jobs = [{"id": f"md:{r.id}", "stage": "md", "row": r} for r in stable]
        self.job_manager.add_new_jobs(jobs)
        results = self.job_manager.start_jobs(lambda job: {"row": self.diffusivity_of(job["row"])})
        out = []
        for row, result in zip(stable, results):
            if result.get("status"):
                out.append(result["row"])
            else:
                self.events.emit("candidate_failed", stage="md", id=row.id, message=result.get("message"))
        return out

    # ------------------------------------------------------------ screen

    def screen(self, with_dopants=None, host_ids=None):
        c = self.config
        self.check_references(c.elements)
        self.load_surrogate()
        self.logger.info(f"screen() - config {self.hash[:12]}, potential {self.potential_info}")
        compositions, diffusivity_rows = [], []
        self.stable_rows = []
        for spec in generator_specs(c):
            label = formula(spec.composition)
            self.events.emit("stage_start", stage="generate", formula=label)
            pool = generate_candidates(spec, c.screen.count, max_workers=self.max_workers)
            write_text_file(self.path(f"candidates_{label}.xyz"), write_extxyz([unlabeled_frame(s) for s in pool]))

            self.events.emit("stage_start", stage="screen", formula=label, candidates=len(pool))
            results = self._run_jobs(pool, "screen", label)
            rows = self.rank(results, label)
            failed = sum(1 for r in rows if r.status == "failed")
            self.events.emit("stage_finish", stage="screen", formula=label, failed=failed)
            self.logger.info(f"screen() - {label}: {len(pool) - failed}/{len(pool)} candidates priced")
            write_table(self.path(f"polymorphs_{label}.csv"),
                        [r.model_dump(mode="json") for r in rows[: c.screen.top_table]], list(PolymorphRow.model_fields))
            self._write_free_energy_table(label, results)

            self.events.emit("stage_start", stage="md", formula=label)
            md_rows = self.md_stage(rows)
            diffusivity_rows.extend(md_rows)
            compositions.append(CompositionReport(
                formula=label, candidates=len(pool), failed=failed, polymorphs=rows, diffusivity=md_rows,
            ))
            self.stable_rows.extend(r for r in rows if r.status == "ok" and not r.imaginary)

        write_table(self.path("diffusivity.csv"), [
            {"id": r.id, "formula": r.formula, "diffusivity_mean": r.diffusivity_mean, "r_squared": r.r_squared,
             "mobility": r.mobility, "desirability": r.desirability,
             **{f"D_{x}": v for x, v in sorted(r.diffusivity.items())}}
            for r in diffusivity_rows
        ], None if diffusivity_rows else ["id", "formula", "diffusivity_mean", "r_squared", "mobility", "desirability"])

        dopants = None
        if (bool(c.dopants.dopants) if with_dopants is None else with_dopants):
            dopants = self.dopant_analysis(self.stable_rows, host_ids)

        report = ScreenReport(
            config_hash=self.hash,
            seed=c.seed,
            t_star=c.temperatures.t_star,
            pressure=c.pressure,
            temperatures=c.temperatures.grid,
            potential=self.potential_info,
            free_energy_model="quasi-harmonic" if c.phonon.qha else "harmonic",
            compositions=compositions,
            al_cycles=self.al_records,
            dopants=dopants,
        )
        write_json_file(self.path("report.json"), report.model_dump(mode="json"))
        self.save_ledger()
        self.logger.info(f"screen() - report written to {self.path('report.json')}")
        return report

    def _write_free_energy_table(self, label, results):
        grid = set(self.config.temperatures.grid)
        rows = []
        for r in results:
            if not r.get("status") or r["imaginary"]:
                continue
            for T, value in zip(r["temperatures"], r["delta_g"]):
                if T in grid:
                    rows.append({"id": r["id"], "temperature_K": T, "delta_g_eV_per_atom": value})
        write_table(self.path(f"free_energy_{label}.csv"), rows, ["id", "temperature_K", "delta_g_eV_per_atom"])

    # ------------------------------------------------------------ dopants

    def select_hosts(self, stable_rows, host_ids=None):
        if host_ids:
            by_id = {r.id: r for r in stable_rows}
            unknown = [h for h in host_ids if h not in by_id]
            if unknown:
                raise CampaignError(f"unknown or unstable host id(s): {', '.join(unknown)}")
            return [by_id[h] for h in host_ids]
        by_formula = {}
        for row in stable_rows:
            by_formula.setdefault(row.formula, []).append(row)
        hosts = []
        for label in sorted(by_formula):
            hosts.extend(by_formula[label][: self.config.dopants.hosts])
        return hosts

    def dopant_analysis(self, stable_rows, host_ids=None):
        """
        Delta Delta G per host x dopant x site at 0 K and T*. Hosts are the given ids, or the
        `dopants.hosts` most stable polymorphs of each composition.
        """
        c = self.config
        d = c.dopants
        self.check_references(set(c.elements) | set(d.dopants))
        for dopant in d.dopants:
            if self.potential.missing_species([dopant]):
                raise PotentialError(f"potential does not cover dopant {dopant}")

        hosts = self.select_hosts(stable_rows, host_ids)
        t_star = c.temperatures.t_star
        temperatures = sorted({0.0, t_star})
        self.events.emit("stage_start", stage="dopants", hosts=len(hosts))
        rows = []
        for host_row in hosts:
            host = self.read_structure(host_row.structure_file)
            host_g = {0.0: host_row.delta_g_0K, t_star: host_row.delta_g_tstar}
            for dopant in d.dopants:
                for site in d.sites:
                    if site in host.species:
                        rows.extend(self._substitution_rows(host_row, host, host_g, dopant, site, temperatures))
        self.events.emit("stage_finish", stage="dopants", rows=len(rows))

        stabilizing = []
        for dopant in d.dopants:
            best = {}
            for r in rows:
                if r["dopant"] == dopant and r["temperature_K"] == t_star and r["ddG_eV_per_atom"] is not None:
                    best[r["host"]] = min(best.get(r["host"], np.inf), r["ddG_eV_per_atom"])
            if hosts and len(best) == len(hosts) and all(v < 0 for v in best.values()):
                stabilizing.append(dopant)

        write_table(self.path("heatmap.csv"), heatmap_frame([r for r in rows if r["ddG_eV_per_atom"] is not None]))
        write_table(self.path("dopant_rows.csv"), rows)
        self.logger.info(f"dopant_analysis() - {len(rows)} rows, stabilizing at T*: {stabilizing}")
        return DopantReport(concentration=d.concentration, temperatures=temperatures, hosts=[h.id for h in hosts],
                            rows=rows, stabilizing_dopants=stabilizing)

    def _substitution_rows(self, host_row, host, host_g, dopant, site, temperatures):
        d = self.config.dopants
        if dopant == site:
            # identity substitution
            return [{"host": host_row.id, "dopant": dopant, "site": site, "temperature_K": T, "ddG_eV_per_atom": 0.0,
                     "best_occupation": None, "occupations": 0, "bucket": "neutral"} for T in temperatures]
        variants = enumerate_substitutions(SubstitutionSpec(
            host=host, dopant=dopant, site=site, concentration=d.concentration, occupations=d.occupations,
            seed=derived_seed(self.config.seed, 6, int(host_row.id, 16) % (2 ** 32)),
        ))
        results = self._run_jobs(variants, "dopants", f"{host_row.id}:{dopant}@{site}")
        out = []
        for T in temperatures:
            entries = [
                FormationEnergy(value=self.delta_g_at(result, T), temperature=T, pressure=self.config.pressure,
                                dopant=dopant, site=site, occupation=variant.tags["substitution"])
                for variant, result in zip(variants, results) if self.delta_g_at(result, T) is not None
            ]
            if not entries:
                out.append({"host": host_row.id, "dopant": dopant, "site": site, "temperature_K": T,
                            "ddG_eV_per_atom": None, "best_occupation": None, "occupations": 0, "bucket": "failed"})
                continue
            host_entry = FormationEnergy(value=host_g[T], temperature=T, pressure=self.config.pressure)
            out.extend({"host": host_row.id, **row} for row in rank_stabilization(host_entry, entries))
        return out

    # ------------------------------------------------------------ cost and verification

    def stage_benchmark(self, structure, md_steps=20):
        """
        Time relaxation, phonon, mechanics and MD once with the oracle and once with the
        surrogate on one structure; booked under bench_<stage> for the per-stage speedups.
        """
        c = self.config
        self.load_surrogate()
        if self.potential is self.oracle:
            raise CampaignError("stage benchmark needs a surrogate potential, the configured source is the oracle")
        for p in (self.oracle, self.potential):
            relax_positions(structure, self._counted(p, "bench_relax"), c.relax.f_tol, 20, keep_trajectory=False)
            force_constants(structure, self._counted(p, "bench_phonon"), c.phonon.repeat, c.phonon.amplitude,
                            max_workers=1)
            elastic_tensor(structure, self._counted(p, "bench_mechanics"), c.mechanics.delta, method="stress",
                           max_workers=1)
            run_nvt(structure, self._counted(p, "bench_md"), c.md.temperature, c.md.timestep, md_steps,
                    c.md.friction, seed=c.seed)
        self.save_ledger()
        return self.ledger.to_dict()

    def verify(self, fraction=0.1):
        """Recompute Delta G(T*) of a seeded sample of reported candidates from the stored structures."""
        report = read_json_file(self.path("report.json"))
        c = self.config
        if report["config_hash"] != self.hash:
            raise CampaignError("report.json was produced by a different configuration")
        self.potential = self.oracle if c.potential.source == "oracle" else load_potential(self.path("potential.json"))
        rows = [r for comp in report["compositions"] for r in comp["polymorphs"]
                if r["status"] == "ok" and not r["imaginary"]]
        n = min(len(rows), max(1, int(np.ceil(fraction * len(rows))))) if rows else 0
        picked = sorted(np.random.default_rng(c.seed).choice(len(rows), size=n, replace=False).tolist()) if n else []
        t_star = c.temperatures.t_star

        mismatches = []
        for k in picked:
            row = rows[k]
            thermo = formation_free_energies(self.read_structure(row["structure_file"]), self.potential, c, [t_star])
            value = thermo["delta_g"].get(t_star)
            if value is None or not np.isclose(value, row["delta_g_tstar"], rtol=1.0e-9, atol=1.0e-12):
                mismatches.append({"id": row["id"], "reported": row["delta_g_tstar"], "recomputed": value})
        self.logger.info(f"verify() - {len(picked)} candidates checked, {len(mismatches)} mismatches")
        return {"checked": len(picked), "ids": [rows[k]["id"] for k in picked], "mismatches": mismatches,
                "ok": not mismatches}


def screen(config, logger, out_dir=None, max_workers=None):
    return ScreeningCampaign(config, logger, out_dir, max_workers).screen()


def dopant_analysis(config, logger, host_ids=None, dopants=None, sites=None, out_dir=None, max_workers=None):
    """Screen (reusing cached stages) and run the dopant stage on the chosen hosts."""
    update = {}
    if dopants is not None:
        update["dopants"] = list(dopants)
    if sites is not None:
        update["sites"] = list(sites)
    if update:
        config = config.model_copy(update={"dopants": config.dopants.model_copy(update=update)})
    if not config.dopants.dopants or not config.dopants.sites:
        raise CampaignError("dopant analysis needs at least one dopant and one site")
    campaign = ScreeningCampaign(config, logger, out_dir, max_workers)
    return campaign.screen(with_dopants=True, host_ids=host_ids).dopants
