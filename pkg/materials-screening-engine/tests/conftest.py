import os
import sys
import tempfile

import numpy as np
import pytest

# log files of the test session go to a throwaway directory
os.environ.setdefault("SCREENING_LOG_DIR", tempfile.mkdtemp(prefix="screening-logs-"))
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from utils._explore import GeneratorSpec, generate_candidates  # noqa: E402
from utils._file_formats import LabeledFrame, Provenance  # noqa: E402
from utils._potential import HarmonicPair, LennardJones, Morse, oracle_potential  # noqa: E402
from utils._structure import Structure  # noqa: E402

LJ_MINIMUM = 2.0 ** (1.0 / 6.0)
FCC_BASIS = [[0.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]]


def dimer(r, symbol="Ar", box=20.0, axis=0):
    cart = np.zeros((2, 3))
    cart[:, :] = box / 2.0
    cart[1, axis] += r
    return Structure.from_cartesian([symbol, symbol], cart, np.eye(3) * box)


def fcc(a, symbol="Ar"):
    return Structure([symbol] * 4, FCC_BASIS, np.eye(3) * a)


def chain(a=1.0, symbol="Ar", width=10.0):
    return Structure([symbol], [[0.0, 0.0, 0.0]], np.diag([a, width, width]))


def label(potential, structures, provenance=Provenance.oracle):
    frames = []
    for s in structures:
        r = potential.evaluate(s)
        frames.append(LabeledFrame(s, r.energy, r.forces, r.stress, provenance))
    return frames


@pytest.fixture
def lj():
    return LennardJones(epsilon=1.0, sigma=1.0)


@pytest.fixture
def lj_fcc():
    """LJ crystal with the nearest-neighbor distance at the pair minimum."""
    return fcc(LJ_MINIMUM * np.sqrt(2.0))


@pytest.fixture
def spring_fcc():
    """Nearest-neighbor springs at rest length: C11 = 2k/a, C12 = C44 = k/a."""
    a = 2.0 * np.sqrt(2.0)
    return fcc(a), HarmonicPair(k=1.0, r0=2.0, cutoff=2.4), a


@pytest.fixture
def oracle():
    return oracle_potential(seed=3)


@pytest.fixture
def argon_spec():
    return GeneratorSpec(composition={"Ar": 2}, max_atoms=4, volume_per_atom=(18.0, 25.0),
                         min_distances={"Ar-Ar": 2.5}, seed=5)


@pytest.fixture
def morse_frames(argon_spec):
    """Twelve small argon cells labeled with a smooth Morse model."""
    pool = generate_candidates(argon_spec, 12, max_workers=2)
    return label(Morse(depth=0.5, stiffness=1.0, r0=3.0, cutoff=5.0, switch_width=1.0), pool)
