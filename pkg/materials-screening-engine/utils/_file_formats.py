"""
Structure and dataset file formats

- POSCAR (VASP 5): comment, scale, 3 lattice rows, species line, counts,
  optional "Selective dynamics", "Direct" | "Cartesian", coordinates.
- Extended XYZ: atom count line, comment line with key=value pairs
  (Lattice="9 floats" Properties=species:S:1:pos:R:3:forces:R:3 energy=float stress="9 floats"),
  one line per atom. Multi-frame files are plain concatenations.

Floats are written as '%.16e' (16 digits after the point), which reproduces every
double exactly, so write -> read -> write is byte-stable.
"""

import os
import shlex
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from utils._elements import element_info
from utils._errors import ParseError, StructureError
from utils._structure import Structure

_FLOAT = "{:.16e}"


class Provenance(str, Enum):
    oracle = "oracle"
    external = "external"
    predicted = "predicted"


@dataclass(frozen=True, eq=False)
class LabeledFrame:
    structure: Structure
    energy: float
    forces: np.ndarray
    stress: np.ndarray
    provenance: Provenance = Provenance.external
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        forces = np.array(self.forces, dtype=float).reshape(-1, 3)
        stress = np.array(self.stress, dtype=float).reshape(3, 3)
        if len(forces) != self.structure.n_atoms:
            raise StructureError(f"forces have {len(forces)} rows for {self.structure.n_atoms} atoms")
        if np.max(np.abs(stress - stress.T)) > 1.0e-10:
            raise StructureError("stress tensor is not symmetric")
        forces.setflags(write=False)
        stress.setflags(write=False)
        object.__setattr__(self, "energy", float(self.energy))
        object.__setattr__(self, "forces", forces)
        object.__setattr__(self, "stress", stress)
        object.__setattr__(self, "provenance", Provenance(self.provenance))


def _fmt(x):
    return _FLOAT.format(float(x))


def _floats(tokens, line_no, what):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"could not parse {what}: {' '.join(tokens)}", line=line_no)


# ---------------------------------------------------------------- POSCAR

def read_poscar(text):
    lines = text.splitlines()

    def line(k):
        # 1-based line numbers in errors
        if k - 1 >= len(lines):
            raise ParseError("unexpected end of file", line=k)
        return lines[k - 1]

    comment = line(1).rstrip("\n")
    scale_tokens = line(2).split()
    if not scale_tokens:
        raise ParseError("missing scale factor", line=2)
    scale = _floats(scale_tokens[:1], 2, "scale factor")[0]
    lattice = []
    for k in (3, 4, 5):
        tokens = line(k).split()
        if len(tokens) < 3:
            raise ParseError("lattice row needs 3 numbers", line=k)
        lattice.append(_floats(tokens[:3], k, "lattice row"))
    lattice = np.array(lattice)

    species_tokens = line(6).split()
    if not species_tokens or species_tokens[0].lstrip("+-").isdigit():
        raise ParseError("species line missing (VASP 5 format required)", line=6)
    for symbol in species_tokens:
        if symbol not in element_info:
            raise ParseError(f"unknown element symbol '{symbol}'", line=6)
    count_tokens = line(7).split()
    try:
        counts = [int(t) for t in count_tokens]
    except ValueError:
        raise ParseError("atom counts must be integers", line=7)
    if len(counts) != len(species_tokens):
        raise ParseError(f"{len(species_tokens)} species but {len(counts)} counts", line=7)
    if any(c < 0 for c in counts) or sum(counts) < 1:
        raise ParseError("atom counts must be non-negative with at least one atom", line=7)

    k = 8
    mode = line(k).strip()
    if mode[:1] in ("s", "S"):
        k += 1
        mode = line(k).strip()
    if mode[:1] in ("d", "D"):
        cartesian = False
    elif mode[:1] in ("c", "C", "k", "K"):
        cartesian = True
    else:
        raise ParseError("expected 'Direct' or 'Cartesian'", line=k)

    if scale < 0.0:
        # negative scale is the target cell volume
        scale = (abs(scale) / abs(np.linalg.det(lattice))) ** (1.0 / 3.0)
    elif scale == 0.0:
        raise ParseError("scale factor must be nonzero", line=2)
    lattice = lattice * scale

    n = sum(counts)
    coords = []
    for a in range(n):
        k += 1
        tokens = line(k).split()
        if len(tokens) < 3:
            raise ParseError("coordinate row needs 3 numbers", line=k)
        coords.append(_floats(tokens[:3], k, "coordinates"))
    coords = np.array(coords)
    species = [s for s, c in zip(species_tokens, counts) for _ in range(c)]
    tags = {"comment": comment} if comment.strip() else {}
    try:
        if cartesian:
            return Structure.from_cartesian(species, coords * scale, lattice, tags)
        return Structure(species, coords, lattice, tags)
    except StructureError as e:
        raise ParseError(str(e), line=3)


def _species_runs(species):
    runs = []
    for symbol in species:
        if runs and runs[-1][0] == symbol:
            runs[-1][1] += 1
        else:
            runs.append([symbol, 1])
    return runs


def write_poscar(s, comment=None):
    if comment is None:
        comment = s.tags.get("comment", " ".join(f"{k}{v}" for k, v in s.composition.items()))
    runs = _species_runs(s.species)
    out = [str(comment).replace("\n", " "), _fmt(1.0)]
    for row in s.lattice:
        out.append(" ".join(_fmt(x) for x in row))
    out.append(" ".join(r[0] for r in runs))
    out.append(" ".join(str(r[1]) for r in runs))
    out.append("Direct")
    for row in s.frac_coords:
        out.append(" ".join(_fmt(x) for x in row))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- extended XYZ

_MANDATORY = ("Lattice", "Properties", "energy", "stress")


def _parse_comment(comment, line_no):
    try:
        tokens = shlex.split(comment)
    except ValueError as e:
        raise ParseError(f"malformed comment line: {e}", line=line_no)
    info = {}
    for token in tokens:
        if "=" not in token:
            raise ParseError(f"expected key=value, got '{token}'", line=line_no)
        key, value = token.split("=", 1)
        info[key] = value
    return info


def _parse_properties(spec, line_no):
    fields = spec.split(":")
    if len(fields) % 3:
        raise ParseError(f"malformed Properties '{spec}'", line=line_no)
    columns = {}
    start = 0
    for name, kind, width in zip(fields[0::3], fields[1::3], fields[2::3]):
        width = int(width)
        columns[name] = (start, width, kind)
        start += width
    return columns, start


def read_extxyz(text):
    lines = text.splitlines()
    frames = []
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        head_no = k + 1
        try:
            n = int(lines[k].split()[0])
        except ValueError:
            raise ParseError("expected atom count", line=head_no)
        if n < 1:
            raise ParseError("atom count must be >= 1", line=head_no)
        if k + 1 >= len(lines):
            raise ParseError("missing comment line", line=head_no + 1)
        info = _parse_comment(lines[k + 1], head_no + 1)
        for key in _MANDATORY:
            if key not in info:
                raise ParseError(f"missing {key}", line=head_no + 1)
        columns, width = _parse_properties(info.pop("Properties"), head_no + 1)
        for name in ("species", "pos", "forces"):
            if name not in columns:
                raise ParseError(f"missing {name}", line=head_no + 1)
        lattice = np.array(_floats(info.pop("Lattice").split(), head_no + 1, "Lattice"))
        stress = np.array(_floats(info.pop("stress").split(), head_no + 1, "stress"))
        if lattice.size != 9:
            raise ParseError("Lattice needs 9 floats", line=head_no + 1)
        if stress.size != 9:
            raise ParseError("stress needs 9 floats", line=head_no + 1)
        energy = _floats([info.pop("energy")], head_no + 1, "energy")[0]
        provenance = info.pop("provenance", Provenance.external.value)
        info.pop("pbc", None)

        if k + 2 + n > len(lines):
            raise ParseError(f"atom count mismatch: expected {n} atom lines", line=len(lines) + 1)
        species, pos, forces = [], [], []
        for a in range(n):
            line_no = k + 3 + a
            tokens = lines[line_no - 1].split()
            if len(tokens) != width:
                raise ParseError(f"expected {width} columns, got {len(tokens)}", line=line_no)
            s0, _, _ = columns["species"]
            species.append(tokens[s0])
            p0, pw, _ = columns["pos"]
            pos.append(_floats(tokens[p0:p0 + pw], line_no, "pos"))
            f0, fw, _ = columns["forces"]
            forces.append(_floats(tokens[f0:f0 + fw], line_no, "forces"))
        stress = stress.reshape(3, 3)
        stress = 0.5 * (stress + stress.T)
        try:
            structure = Structure.from_cartesian(species, np.array(pos), lattice.reshape(3, 3), info)
            frame = LabeledFrame(structure, energy, np.array(forces), stress, Provenance(provenance))
        except (StructureError, ValueError) as e:
            raise ParseError(str(e), line=head_no)
        frames.append(frame)
        k += 2 + n
    return frames


def _quote(value):
    value = str(value).replace("\n", " ")
    if not value or any(c.isspace() for c in value) or any(c in value for c in "\"'\\="):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return value


def write_extxyz(frames):
    out = []
    for frame in frames:
        s = frame.structure
        header = [
            'Lattice="' + " ".join(_fmt(x) for x in s.lattice.ravel()) + '"',
            "Properties=species:S:1:pos:R:3:forces:R:3",
            f"energy={_fmt(frame.energy)}",
            'stress="' + " ".join(_fmt(x) for x in frame.stress.ravel()) + '"',
            f"provenance={frame.provenance.value}",
        ]
        for key in sorted(s.tags):
            if key in _MANDATORY or key in ("provenance", "pbc"):
                continue
            header.append(f"{key}={_quote(s.tags[key])}")
        header.append('pbc="T T T"')
        out.append(str(s.n_atoms))
        out.append(" ".join(header))
        for symbol, r, f in zip(s.species, s.cart_coords, frame.forces):
            out.append(" ".join([symbol] + [_fmt(x) for x in r] + [_fmt(x) for x in f]))
    return "\n".join(out) + "\n"


def read_structures_file(path):
    with open(path, "r") as f:
        text = f.read()
    if path.endswith((".xyz", ".extxyz")):
        return [frame.structure for frame in read_extxyz(text)]
    return [read_poscar(text)]


def write_text_file(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(text)
    return path


def unlabeled_frame(s, provenance=Provenance.predicted):
    """Frame with zero labels, used to dump plain structure pools as extended XYZ."""
    return LabeledFrame(s, 0.0, np.zeros((s.n_atoms, 3)), np.zeros((3, 3)), provenance)
