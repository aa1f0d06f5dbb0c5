import os

import numpy as np
import pytest

from conftest import LJ_MINIMUM, dimer
from main import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from utils._file_formats import read_extxyz, read_poscar, write_poscar
from utils._helper import read_json_file

SMALL_CONFIG = """
seed: 1
references: {Ar: -0.1}
generator:
  compositions: [{Ar: 2}]
  max_atoms: 4
  volume_per_atom: [18.0, 25.0]
  min_distances: {Ar-Ar: 2.5}
potential: {source: oracle}
"""


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "campaign.yaml"
    path.write_text(SMALL_CONFIG)
    return str(path)


def test_unknown_command():
    assert main(["bogus"]) == EXIT_USAGE


def test_missing_config(tmp_path):
    assert main(["--config", str(tmp_path / "absent.yaml"), "generate"]) == EXIT_USAGE


def test_invalid_config(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("relax: {tolerance: 1.0}\n")
    assert main(["--config", str(path), "generate"]) == EXIT_USAGE


def test_relax_a_dimer(tmp_path):
    structure = tmp_path / "dimer.vasp"
    structure.write_text(write_poscar(dimer(1.2, box=10.0)))
    out = tmp_path / "out"
    code = main(["--out", str(out), "relax", "--structure", str(structure), "--potential", "lj", "--f-tol", "1e-4"])
    assert code == EXIT_OK
    relaxed = read_poscar((out / "relaxed.vasp").read_text())
    assert np.linalg.norm(relaxed.cart_coords[1] - relaxed.cart_coords[0]) == pytest.approx(LJ_MINIMUM, rel=1e-3)
    summary = read_json_file(str(out / "relax.json"))
    assert summary["converged"]
    assert summary["energy"] == pytest.approx(-1.0, rel=1e-4)


def test_generate(tmp_path, small_config):
    out = tmp_path / "out"
    assert main(["--config", small_config, "--out", str(out), "generate", "--count", "2"]) == EXIT_OK
    frames = read_extxyz((out / "candidates_Ar2.xyz").read_text())
    assert len(frames) == 2
    assert os.path.exists(out / "generate.json")


def test_verify_without_a_report(tmp_path, small_config):
    assert main(["--config", small_config, "--out", str(tmp_path), "verify"]) == EXIT_RUNTIME
