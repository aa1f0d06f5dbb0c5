"""
Command line entry point of the screening engine

    python main.py [--config c.yaml] [--seed N] [--out DIR] [--threads N] [--format json|csv] <command> ...

Commands: fit, relax, phonon, elastic, shear, md, generate, al, screen, dope, cost, verify.
Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

import argparse
import os
import sys

import numpy as np

import config as cfg
from utils._active import derived_seed
from utils._campaign import (
    ScreeningCampaign,
    dopant_analysis,
    generator_specs,
    hyperparams_from_config,
)
from utils._campaign_config import load_config, load_config_file
from utils._cost import cost_report
from utils._errors import ConfigError, ScreeningError
from utils._explore import formula, generate_candidates
from utils._file_formats import read_extxyz, read_structures_file, unlabeled_frame, write_extxyz, write_poscar, write_text_file
from utils._fit import train, train_ensemble
from utils._helper import setup_logger, write_json_file, write_table
from utils._md import classify_mobility, einstein_diffusivity, run_nvt
from utils._mech import elastic_tensor, ideal_shear
from utils._phonon import dispersion, dos, dispersion_table, force_constants, thermal_table
from utils._potential import LennardJones, load_potential, oracle_potential, save_potential
from utils._relax import relax
from utils._structure import make_supercell

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _triple(kind):
    def _parse(text):
        values = [kind(x) for x in text.replace(",", " ").split()]
        if len(values) != 3:
            raise argparse.ArgumentTypeError(f"expected three values, got {text!r}")
        return tuple(values)
    return _parse


def build_parser():
    parser = _Parser(prog="screening", description="Atomistic materials screening with ensemble surrogate potentials")
    parser.add_argument("--config", help="Campaign configuration (YAML)")
    parser.add_argument("--seed", type=int, help="Override the campaign seed")
    parser.add_argument("--out", help="Output directory (defaults to the configured output_dir)")
    parser.add_argument("--threads", type=int, help="Worker threads")
    parser.add_argument("--format", choices=["json", "csv"], default="json", help="Format of single-stage results")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def _with_structure(p):
        p.add_argument("--structure", required=True, help="POSCAR or extended XYZ (first frame is used)")
        p.add_argument("--potential", help="'oracle', 'lj' or a checkpoint path (default: configured source)")
        return p

    p = sub.add_parser("fit", help="Train a descriptor potential or an ensemble on labeled frames")
    p.add_argument("--frames", required=True, help="Extended XYZ training set")
    p.add_argument("--k", type=int, help="Ensemble size; 1 trains a single model")
    p.add_argument("--split", type=float, help="Validation fraction")

    p = _with_structure(sub.add_parser("relax", help="Relax positions (and the cell with --cell)"))
    p.add_argument("--cell", action="store_true")
    p.add_argument("--f-tol", type=float)
    p.add_argument("--max-iter", type=int)

    p = _with_structure(sub.add_parser("phonon", help="Force constants, dispersion, DOS and thermal properties"))
    p.add_argument("--repeat", type=_triple(int))
    p.add_argument("--mesh", type=_triple(int))
    p.add_argument("--temperatures", help="Grid for the thermal table, e.g. '0..2000 step 50'")

    p = _with_structure(sub.add_parser("elastic", help="6x6 elastic tensor"))
    p.add_argument("--delta", type=float)
    p.add_argument("--method", choices=["energy", "stress"])
    p.add_argument("--relax-ions", action="store_true")

    p = _with_structure(sub.add_parser("shear", help="Ideal shear stress-strain curve"))
    p.add_argument("--normal", type=_triple(float))
    p.add_argument("--direction", type=_triple(float))
    p.add_argument("--step", type=float)
    p.add_argument("--gamma-max", type=float)
    p.add_argument("--rigid", action="store_true", help="Do not relax ions at each shear step")

    p = _with_structure(sub.add_parser("md", help="Langevin NVT run and Einstein diffusivity"))
    p.add_argument("--temperature", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--friction", type=float)
    p.add_argument("--stride", type=int)
    p.add_argument("--repeat", type=_triple(int))

    p = sub.add_parser("generate", help="Random candidate structures for every configured composition")
    p.add_argument("--count", type=int)

    sub.add_parser("al", help="Active-learning loop against the oracle")
    sub.add_parser("screen", help="Full polymorph screening campaign")

    p = sub.add_parser("dope", help="Dopant substitution analysis on screened hosts")
    p.add_argument("--hosts", nargs="+", help="Host ids from report.json (default: most stable per composition)")
    p.add_argument("--dopants", nargs="+")
    p.add_argument("--sites", nargs="+")

    p = sub.add_parser("cost", help="Oracle vs surrogate cost crossover")
    p.add_argument("--benchmark", help="Structure file to time every stage on with both potentials first")

    p = sub.add_parser("verify", help="Recompute a sample of reported values from stored artifacts")
    p.add_argument("--fraction", type=float, default=0.1)
    return parser


class CommandRunner():
    def __init__(self, args, config, logger):
        self.args = args
        self.config = config
        self.logger = logger
        self.out_dir = config.output_dir
        self.max_workers = cfg.max_thread_workers if args.threads is None else args.threads

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def emit(self, name, data, table=None):
        """Write a stage result as <name>.json, or as <name>.csv when --format csv and a table exists."""
        if self.args.format == "csv" and table is not None:
            target = write_table(self.path(f"{name}.csv"), table)
        else:
            target = write_json_file(self.path(f"{name}.json"), data)
        self.logger.info(f"emit() - {name} written to {target}")
        print(target)
        return target

    def potential(self):
        choice = getattr(self.args, "potential", None)
        if choice is None:
            if self.config.potential.source == "checkpoint":
                choice = self.config.potential.checkpoint
            elif self.config.potential.source == "active_learning" and os.path.exists(self.path("potential.json")):
                choice = self.path("potential.json")
            else:
                choice = "oracle"
        if choice == "oracle":
            return oracle_potential(self.config.oracle)
        if choice == "lj":
            return LennardJones()
        return load_potential(choice)

    def structure(self):
        return read_structures_file(self.args.structure)[0]

    # ------------------------------------------------------------ single stages

    def fit(self):
        with open(self.args.frames, "r") as f:
            frames = read_extxyz(f.read())
        c = self.config
        k = c.potential.ensemble_size if self.args.k is None else self.args.k
        split = c.fit.validation_fraction if self.args.split is None else self.args.split
        hp = hyperparams_from_config(c)
        if k == 1:
            model, report = train(frames, split, hp, seed=c.seed)
            reports = [report]
        else:
            model = train_ensemble(frames, k=k, split=split, hyperparams=hp, seed=c.seed, max_workers=self.max_workers)
            reports = model.reports
        os.makedirs(self.out_dir, exist_ok=True)
        save_potential(model, self.path("potential.json"))
        self.emit("fit_report", [r.model_dump(mode="json") for r in reports])

    def relax(self):
        c = self.config
        result = relax(
            self.structure(), self.potential(), cell=self.args.cell,
            f_tol=c.relax.f_tol if self.args.f_tol is None else self.args.f_tol,
            stress_tol=c.relax.stress_tol,
            max_iter=c.relax.max_iter if self.args.max_iter is None else self.args.max_iter,
            pressure=c.pressure,
        )
        write_text_file(self.path("relaxed.vasp"), write_poscar(result.structure))
        write_text_file(self.path("relax_trajectory.xyz"), write_extxyz(result.trajectory))
        self.emit("relax", {
            "energy": result.energy,
            "iterations": result.iterations,
            "converged": result.converged,
            "max_force": result.max_force,
            "max_stress": result.max_stress,
            "lattice_parameters": list(result.structure.lattice_parameters()),
        })

    def phonon(self):
        c = self.config
        s = self.structure()
        fc = force_constants(s, self.potential(), self.args.repeat or c.phonon.repeat, c.phonon.amplitude,
                             max_workers=self.max_workers)
        ph = dispersion(fc, mesh=self.args.mesh or c.phonon.qgrid, max_workers=self.max_workers)
        temperatures = c.temperatures.grid
        if self.args.temperatures:
            temperatures = load_config({"temperatures": {"grid": self.args.temperatures}}).temperatures.grid
        write_table(self.path("phonon_dispersion.csv"), dispersion_table(ph))
        imaginary = ph.imaginary_qpoints()
        summary = {"n_qpoints": ph.n_qpoints, "imaginary_qpoints": [list(q) for q in imaginary]}
        if imaginary:
            self.emit("phonon", summary)
            return
        write_table(self.path("phonon_dos.csv"), dos(ph))
        table = thermal_table(ph, temperatures)
        summary["thermal"] = table.to_dict(orient="records")
        self.emit("phonon", summary, table)

    def elastic(self):
        c = self.config
        tensor = elastic_tensor(
            self.structure(), self.potential(),
            delta=c.mechanics.delta if self.args.delta is None else self.args.delta,
            relax_ions=self.args.relax_ions,
            method=self.args.method or c.mechanics.method,
            max_workers=self.max_workers,
        )
        self.emit("elastic", tensor.to_dict(), tensor.to_frame())

    def shear(self):
        m = self.config.mechanics
        curve = ideal_shear(
            self.structure(), self.potential(),
            normal=self.args.normal or m.shear_normal,
            direction=self.args.direction or m.shear_direction,
            step=m.shear_step if self.args.step is None else self.args.step,
            gamma_max=m.shear_max if self.args.gamma_max is None else self.args.gamma_max,
            relax_ions=m.relax_ions and not self.args.rigid,
        )
        self.emit("shear", curve.to_dict(), curve.to_frame())

    def md(self):
        m = self.config.md
        a = self.args
        s = make_supercell(self.structure(), a.repeat or m.repeat).structure
        traj = run_nvt(
            s, self.potential(), m.temperature if a.temperature is None else a.temperature,
            m.timestep if a.dt is None else a.dt, m.steps if a.steps is None else a.steps,
            m.friction if a.friction is None else a.friction,
            seed=derived_seed(self.config.seed, 5), stride=m.stride if a.stride is None else a.stride,
        )
        write_text_file(self.path("md_trajectory.xyz"), write_extxyz(traj.frames()))
        report = einstein_diffusivity(traj)
        data = report.model_dump(mode="json")
        data["mobility"] = {x: classify_mobility(D, m.mobility_threshold).value for x, D in report.diffusivity.items()}
        data["mean_temperature_K"] = float(np.mean(traj.temperature()[1:]))
        self.emit("diffusivity", data, report.to_frame())

    def generate(self):
        count = self.config.screen.count if self.args.count is None else self.args.count
        written = {}
        for spec in generator_specs(self.config):
            pool = generate_candidates(spec, count, max_workers=self.max_workers)
            label = formula(spec.composition)
            written[label] = write_text_file(self.path(f"candidates_{label}.xyz"),
                                             write_extxyz([unlabeled_frame(s) for s in pool]))
        self.emit("generate", written)

    # ------------------------------------------------------------ campaign stages

    def campaign(self):
        return ScreeningCampaign(self.config, self.logger, self.out_dir, self.max_workers)

    def al(self):
        config = self.config.model_copy(update={
            "potential": self.config.potential.model_copy(update={"source": "active_learning"}),
        })
        campaign = ScreeningCampaign(config, self.logger, self.out_dir, self.max_workers)
        campaign.load_surrogate()
        campaign.save_ledger()
        self.emit("al", {"potential": campaign.potential_info,
                         "cycles": [r.model_dump(mode="json") for r in campaign.al_records]})

    def screen(self):
        report = self.campaign().screen()
        print(self.path("report.json"))
        return report

    def dope(self):
        report = dopant_analysis(self.config, self.logger, host_ids=self.args.hosts, dopants=self.args.dopants,
                                 sites=self.args.sites, out_dir=self.out_dir, max_workers=self.max_workers)
        self.emit("dopants", report.model_dump(mode="json"))

    def cost(self):
        campaign = self.campaign()
        if self.args.benchmark:
            campaign.stage_benchmark(read_structures_file(self.args.benchmark)[0])
        ledger = campaign.ledger
        c = self.config.cost
        report, curves = cost_report(
            ledger if ledger.stages else None, c.oracle_unit_cost, c.surrogate_unit_cost, c.training_cost,
            c.training_labels, max_structures=c.max_structures,
        )
        write_table(self.path("cost_curves.csv"), curves)
        self.emit("cost", report.model_dump(mode="json"))

    def verify(self):
        result = self.campaign().verify(self.args.fraction)
        self.emit("verify", result)
        if not result["ok"]:
            raise ScreeningError(f"{len(result['mismatches'])} reported value(s) could not be reproduced")

    def run(self):
        return getattr(self, self.args.command)()


def main(argv=None):
    logger = setup_logger()
    try:
        args = build_parser().parse_args(argv)
        config = load_config_file(args.config) if args.config else load_config({})
        update = {}
        if args.seed is not None:
            update["seed"] = args.seed
        if args.out is not None:
            update["output_dir"] = args.out
        config = config.model_copy(update=update)
    except (UsageError, ConfigError) as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE

    try:
        logger.info(f"main() - {args.command} into {config.output_dir}")
        CommandRunner(args, config, logger).run()
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except ScreeningError as e:
        logger.error(f"main() - {args.command} failed: {e}")
        print(str(e), file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Error in main() for {args.command}: {str(e)}")
        print(str(e), file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
