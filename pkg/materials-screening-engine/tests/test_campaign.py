import os

import pandas as pd
import pytest

from conftest import fcc
from utils._campaign import ScreeningCampaign, dopant_analysis, free_energy_temperatures, generator_specs
from utils._campaign_config import load_config
from utils._cost import CostLedger
from utils._errors import CampaignError
from utils._helper import get_logger, read_json_file

logger = get_logger("tests")


def _toy(**overrides):
    data = {
        "seed": 3,
        "references": {"Ar": -0.1},
        "generator": {"compositions": [{"Ar": 2}], "max_atoms": 4, "volume_per_atom": [18.0, 25.0],
                      "min_distances": {"Ar-Ar": 2.5}},
        "temperatures": {"grid": [0.0, 300.0], "t_star": 300.0},
        "relax": {"cell": False, "f_tol": 0.01, "max_iter": 200},
        "phonon": {"repeat": [1, 1, 1], "qgrid": [1, 1, 1]},
        "md": {"steps": 80, "stride": 2, "temperature": 300.0},
        "potential": {"source": "oracle"},
        "oracle": {"seed": 3},
        "screen": {"count": 4, "top_md": 1},
    }
    data.update(overrides)
    return load_config(data)


def test_generator_specs_add_one_dopant_per_site():
    config = _toy(generator={"compositions": [{"Ar": 4}], "max_atoms": 8},
                  dopants={"dopants": ["Cl", "Ar"], "sites": ["Ar"]})
    specs = generator_specs(config, include_dopants=True)
    assert [s.composition for s in specs] == [{"Ar": 4}, {"Ar": 3, "Cl": 1}]
    assert len({s.seed for s in specs}) == 2


def test_free_energy_temperatures_include_zero_and_t_star():
    config = _toy(temperatures={"grid": [100.0, 200.0], "t_star": 1750.0})
    assert free_energy_temperatures(config) == [0.0, 100.0, 200.0, 1750.0]


def test_missing_reference(tmp_path):
    campaign = ScreeningCampaign(_toy(references={}), logger, str(tmp_path))
    with pytest.raises(CampaignError, match="Ar"):
        campaign.screen()


@pytest.mark.slow
class TestScreen:
    @pytest.fixture(scope="class")
    def first(self, tmp_path_factory):
        out = str(tmp_path_factory.mktemp("first"))
        report = ScreeningCampaign(_toy(), logger, out, max_workers=2).screen()
        return out, report

    def test_report_layout(self, first):
        out, report = first
        composition = report.compositions[0]
        assert composition.formula == "Ar2"
        assert composition.candidates == 4
        assert [r.rank for r in composition.polymorphs] == [1, 2, 3, 4]
        stable = [r for r in composition.polymorphs if r.status == "ok" and not r.imaginary]
        values = [r.delta_g_tstar for r in stable]
        assert values == sorted(values)
        for name in ("report.json", "polymorphs_Ar2.csv", "free_energy_Ar2.csv", "candidates_Ar2.xyz",
                     "diffusivity.csv", "events.jsonl", "cost_ledger.json"):
            assert os.path.exists(os.path.join(out, name))
        for row in stable:
            assert os.path.exists(os.path.join(out, row.structure_file))
        table = pd.read_csv(os.path.join(out, "free_energy_Ar2.csv"))
        assert set(table["temperature_K"]) <= {0.0, 300.0}
        assert report.free_energy_model == "harmonic"
        assert report.potential["source"] == "oracle"

    def test_same_config_same_report(self, first, tmp_path):
        out, _ = first
        ScreeningCampaign(_toy(), logger, str(tmp_path), max_workers=1).screen()
        assert read_json_file(os.path.join(out, "report.json")) == read_json_file(str(tmp_path / "report.json"))

    def test_rerun_recomputes_nothing(self, first):
        out, _ = first
        ledger_file = os.path.join(out, "cost_ledger.json")
        before = CostLedger.from_dict(read_json_file(ledger_file)).counters()
        ScreeningCampaign(_toy(), logger, out, max_workers=2).screen()
        assert CostLedger.from_dict(read_json_file(ledger_file)).counters() == before
        with open(os.path.join(out, "events.jsonl"), "r") as f:
            assert "cache_hit" in f.read()

    def test_verify(self, first):
        out, _ = first
        result = ScreeningCampaign(_toy(), logger, out).verify(1.0)
        assert result["ok"]
        assert result["mismatches"] == []

    def test_verify_rejects_another_configuration(self, first):
        out, _ = first
        with pytest.raises(CampaignError, match="different configuration"):
            ScreeningCampaign(_toy(seed=4), logger, out).verify(1.0)


@pytest.mark.slow
def test_sixty_candidate_screen_is_byte_identical(tmp_path):
    config = _toy(screen={"count": 60, "top_md": 0})
    texts = []
    for name, workers in (("a", 4), ("b", 2)):
        out = tmp_path / name
        out.mkdir()
        ScreeningCampaign(config, logger, str(out), max_workers=workers).screen()
        texts.append((out / "report.json").read_bytes())
    assert texts[0] == texts[1]
    assert read_json_file(str(tmp_path / "a" / "report.json"))["compositions"][0]["candidates"] == 60


@pytest.mark.slow
def test_dopant_ranking(tmp_path):
    config = _toy(
        references={"Ar": -0.1, "Cl": -0.1},
        generator={"compositions": [{"Ar": 4}], "max_atoms": 4, "volume_per_atom": [18.0, 25.0],
                   "min_distances": {"Ar-Ar": 2.5}},
        oracle={"seed": 3, "three_body_strength": 0.0, "onsite": {"Cl": -20.0}},
        dopants={"dopants": ["Cl", "Ar"], "sites": ["Ar"], "concentration": 0.25, "occupations": 2, "hosts": 1},
        screen={"count": 3, "top_md": 0},
    )
    report = dopant_analysis(config, logger, out_dir=str(tmp_path), max_workers=2)
    assert report.stabilizing_dopants == ["Cl"]
    assert len(report.hosts) == 1
    identity = [r for r in report.rows if r["dopant"] == "Ar"]
    assert [r["temperature_K"] for r in identity] == [0.0, 300.0]
    assert all(r["ddG_eV_per_atom"] == 0.0 and r["bucket"] == "neutral" for r in identity)
    chlorine = [r for r in report.rows if r["dopant"] == "Cl"]
    assert all(r["bucket"] == "blue" for r in chlorine)
    assert os.path.exists(tmp_path / "heatmap.csv")


def test_dopant_analysis_needs_dopants(tmp_path):
    with pytest.raises(CampaignError, match="at least one dopant"):
        dopant_analysis(_toy(), logger, out_dir=str(tmp_path))


def test_stage_benchmark_needs_a_surrogate(tmp_path):
    campaign = ScreeningCampaign(_toy(), logger, str(tmp_path))
    with pytest.raises(CampaignError, match="surrogate"):
        campaign.stage_benchmark(fcc(5.3))
