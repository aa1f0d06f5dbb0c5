"""
Campaign configuration: one YAML tree validated into pydantic models

    seed: 7
    output_dir: runs/c3s
    pressure: 0.0                 # eV/A^3
    references: {Ca: -2.0, Si: -4.5, O: -4.9}
    generator: {compositions: [{Ca: 3, Si: 1, O: 5}], max_atoms: 30}
    thresholds: {energy_std_max: 0.040, force_std_max: 1.0, pass_fraction_min: 0.90}
    temperatures: {grid: "0..2000 step 50", t_star: 1750}
    ...

Every section is optional; unknown keys are rejected. Validation failures are collected
into one ConfigError listing each problem with its dotted field path.
"""

from typing import Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from utils._active import Thresholds
from utils._elements import element_info
from utils._errors import ConfigError
from utils._helper import content_hash, transform_dict_n_str
from utils._potential import OracleSpec


def parse_temperature_grid(value):
    """A list of temperatures, or the inclusive range string 'start..stop step s'."""
    if isinstance(value, (list, tuple)):
        return [float(t) for t in value]
    if isinstance(value, (int, float)):
        return [float(value)]
    text = str(value).strip()
    step = None
    if "step" in text:
        text, step = text.split("step", 1)
        step = float(step)
    if ".." not in text:
        raise ValueError(f"expected 'start..stop step s', got {value!r}")
    start, stop = (float(x) for x in text.split("..", 1))
    if step is None:
        step = 1.0
    if step <= 0:
        raise ValueError("step must be positive")
    count = int(round((stop - start) / step))
    if count < 0:
        raise ValueError("stop must not be below start")
    return [start + k * step for k in range(count + 1)]


def _check_elements(symbols):
    unknown = sorted(set(symbols) - set(element_info))
    if unknown:
        raise ValueError(f"unknown element symbol(s): {', '.join(unknown)}")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeneratorSection(_Section):
    compositions: List[Dict[str, int]] = Field(
        default_factory=lambda: [{"Ca": 3, "Si": 1, "O": 5}],
        description="One entry per stoichiometry; each is screened and ranked separately",
    )
    max_atoms: int = Field(30, ge=1, description="Upper bound on atoms per generated cell")
    volume_per_atom: Tuple[float, float] = Field((8.0, 25.0), description="Sampled volume per atom range, A^3")
    angle_range: Tuple[float, float] = Field((60.0, 120.0), description="Cell angle range, degrees")
    min_distance_scale: float = Field(0.7, gt=0, description="Default minimum distance as a multiple of summed covalent radii")
    min_distances: Dict[str, float] = Field(default_factory=dict, description="Per-pair overrides, keys like 'Ca-O'")
    max_attempts: int = Field(2000, ge=1, description="Placement attempts per structure before giving up")

    @field_validator("compositions")
    @classmethod
    def _compositions(cls, value):
        if not value:
            raise ValueError("at least one composition is required")
        for composition in value:
            _check_elements(composition)
            if any(c < 1 for c in composition.values()):
                raise ValueError("composition counts must be >= 1")
        return value

    @model_validator(mode="after")
    def _ranges(self):
        lo, hi = self.volume_per_atom
        if not 0 < lo <= hi:
            raise ValueError("volume_per_atom must be a positive ascending range")
        for composition in self.compositions:
            if sum(composition.values()) > self.max_atoms:
                raise ValueError(f"composition {composition} exceeds max_atoms {self.max_atoms}")
        for key, d in self.min_distances.items():
            _check_elements(key.split("-"))
            if d <= 0:
                raise ValueError(f"min distance for {key} must be positive")
        return self


class TemperatureSection(_Section):
    grid: List[float] = Field(default_factory=lambda: parse_temperature_grid("0..2000 step 50"), description="K, ascending")
    t_star: float = Field(1750.0, ge=0, description="Ranking temperature, K")

    @field_validator("grid", mode="before")
    @classmethod
    def _grid(cls, value):
        return parse_temperature_grid(value)

    @field_validator("grid")
    @classmethod
    def _ascending(cls, value):
        if not value:
            raise ValueError("temperature grid is empty")
        if any(t < 0 for t in value):
            raise ValueError("temperatures must be non-negative")
        if any(b <= a for a, b in zip(value, value[1:])):
            raise ValueError("temperature grid must be strictly ascending")
        return value


class ConfigThresholds(Thresholds):
    model_config = ConfigDict(extra="forbid")
    pass_fraction_min: float = Field(0.90, gt=0, le=1, description="Terminate when this share of candidates passes")


class RelaxSection(_Section):
    f_tol: float = Field(0.05, gt=0, description="Max force criterion, eV/A")
    max_iter: int = Field(500, ge=1)
    cell: bool = Field(True, description="Relax the lattice together with the positions")
    stress_tol: float = Field(0.002, gt=0, description="Max |stress + p| component, eV/A^3")


class PhononSection(_Section):
    amplitude: float = Field(0.01, gt=0, description="Finite displacement, A")
    repeat: Tuple[int, int, int] = Field((2, 2, 2), description="Supercell repeat for force constants")
    qgrid: Tuple[int, int, int] = Field((4, 4, 4), description="Gamma-centered q-grid")
    qha: bool = Field(False, description="Quasi-harmonic Gibbs energy instead of harmonic at the relaxed volume")
    qha_volume_scales: List[float] = Field(
        default_factory=lambda: [0.94, 0.96, 0.98, 1.0, 1.02, 1.04, 1.06],
        description="Volume multipliers scanned for the quasi-harmonic fit",
    )

    @field_validator("repeat", "qgrid")
    @classmethod
    def _positive(cls, value):
        if min(value) < 1:
            raise ValueError("entries must be >= 1")
        return value

    @field_validator("qha_volume_scales")
    @classmethod
    def _scales(cls, value):
        if len(value) < 5:
            raise ValueError("at least 5 volume points are required")
        return sorted(value)


class MDSection(_Section):
    temperature: float = Field(300.0, gt=0, description="K")
    timestep: float = Field(1.0, gt=0, le=2.0, description="fs")
    steps: int = Field(1000, ge=4)
    friction: float = Field(0.01, ge=0, description="Langevin friction, 1/fs")
    stride: int = Field(10, ge=1)
    repeat: Tuple[int, int, int] = Field((1, 1, 1))
    mobility_threshold: float = Field(1.0e-7, gt=0, description="cm^2/s; inert below")


class MechanicsSection(_Section):
    delta: float = Field(0.005, gt=0, description="Strain step for the elastic tensor")
    method: Literal["energy", "stress"] = "energy"
    shear_step: float = Field(0.01, ge=0.01, le=0.10, description="Engineering shear increment")
    shear_max: float = Field(0.3, gt=0)
    shear_normal: Tuple[float, float, float] = Field((0.0, 0.0, 1.0), description="Shear plane normal, Cartesian")
    shear_direction: Tuple[float, float, float] = Field((1.0, 0.0, 0.0), description="Shear direction, Cartesian")
    relax_ions: bool = True


class DescriptorSection(_Section):
    n_centers: int = Field(8, ge=1)
    center_min: float = Field(0.5, ge=0)
    eta: float = Field(4.0, gt=0)
    cutoff: float = Field(5.0, gt=0)
    hidden: List[int] = Field(default_factory=lambda: [16, 16])


class PotentialSection(_Section):
    source: Literal["oracle", "checkpoint", "active_learning"] = "active_learning"
    checkpoint: Optional[str] = Field(None, description="Ensemble checkpoint path when source is 'checkpoint'")
    ensemble_size: int = Field(4, ge=2)
    descriptor: DescriptorSection = Field(default_factory=DescriptorSection)

    @model_validator(mode="after")
    def _checkpoint(self):
        if self.source == "checkpoint" and not self.checkpoint:
            raise ValueError("source 'checkpoint' requires a checkpoint path")
        return self


class OracleSection(OracleSpec):
    model_config = ConfigDict(extra="forbid")


class FitSection(_Section):
    epochs: int = Field(200, ge=1)
    learning_rate: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(16, ge=1)
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    alpha: Tuple[float, float, float] = Field((1.0, 10.0, 0.1), description="Energy, force, stress loss weights")


class ActiveLearningSection(_Section):
    per_cycle_count: int = Field(20, ge=1)
    seed_structures: int = Field(10, ge=1, description="Random structures relaxed with the oracle for the seed set")
    seed_frames_per_structure: int = Field(5, ge=1)
    validation_count: int = Field(100, ge=1)
    relax_max_iter: int = Field(200, ge=1)


class DopantSection(_Section):
    dopants: List[str] = Field(default_factory=list)
    sites: List[str] = Field(default_factory=list, description="Host species substituted")
    concentration: float = Field(0.10, gt=0, le=1, description="Fraction of target sites substituted")
    occupations: int = Field(3, ge=1, description="Distinct site subsets per host, dopant and site")
    hosts: int = Field(3, ge=1, description="Most stable polymorphs used as hosts")

    @field_validator("dopants", "sites")
    @classmethod
    def _elements(cls, value):
        _check_elements(value)
        return value


class CostSection(_Section):
    oracle_unit_cost: Optional[float] = Field(None, ge=0, description="Seconds per oracle evaluation; measured when omitted")
    surrogate_unit_cost: Optional[float] = Field(None, ge=0, description="Seconds per surrogate evaluation; measured when omitted")
    training_cost: Optional[float] = Field(None, ge=0, description="Seconds of training; measured when omitted")
    training_labels: Optional[int] = Field(None, ge=0, description="Oracle labels used for training; measured when omitted")
    max_structures: int = Field(1000, ge=1, description="Length of the cumulative cost curves")


class ScreenSection(_Section):
    count: int = Field(60, ge=1, description="Candidates generated per composition")
    top_table: int = Field(50, ge=1)
    top_md: int = Field(10, ge=0)


class CampaignConfig(_Section):
    seed: int = 0
    output_dir: str = "runs/campaign"
    pressure: float = Field(0.0, description="eV/A^3")
    references: Dict[str, float] = Field(default_factory=dict, description="Elemental chemical potentials, eV/atom")
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    thresholds: ConfigThresholds = Field(default_factory=ConfigThresholds)
    temperatures: TemperatureSection = Field(default_factory=TemperatureSection)
    relax: RelaxSection = Field(default_factory=RelaxSection)
    phonon: PhononSection = Field(default_factory=PhononSection)
    md: MDSection = Field(default_factory=MDSection)
    mechanics: MechanicsSection = Field(default_factory=MechanicsSection)
    potential: PotentialSection = Field(default_factory=PotentialSection)
    oracle: OracleSection = Field(default_factory=OracleSection)
    fit: FitSection = Field(default_factory=FitSection)
    active_learning: ActiveLearningSection = Field(default_factory=ActiveLearningSection)
    dopants: DopantSection = Field(default_factory=DopantSection)
    cost: CostSection = Field(default_factory=CostSection)
    screen: ScreenSection = Field(default_factory=ScreenSection)

    @field_validator("references")
    @classmethod
    def _references(cls, value):
        _check_elements(value)
        return value

    @property
    def elements(self):
        symbols = {x for composition in self.generator.compositions for x in composition}
        symbols.update(self.dopants.dopants)
        return sorted(symbols)


def _problems(error):
    problems = []
    for item in error.errors():
        path = ".".join(str(x) for x in item["loc"]) or "<root>"
        problems.append(f"{path}: {item['msg']}")
    return problems


def load_config(text: Union[str, dict, None]) -> CampaignConfig:
    if isinstance(text, dict):
        data = text
    else:
        try:
            data = yaml.safe_load(text or "") or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"<root>: not valid YAML ({e})")
    if not isinstance(data, dict):
        raise ConfigError("<root>: expected a mapping of sections")
    try:
        return CampaignConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_problems(e))


def load_config_file(file_path):
    try:
        with open(file_path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"<file>: cannot read {file_path} ({e})")
    return load_config(text)


def config_hash(config):
    return content_hash(transform_dict_n_str(config.model_dump(mode="json"), dict_2_str=True))
