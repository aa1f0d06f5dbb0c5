import numpy as np
import pandas as pd

from utils._helper import (
    EventLog,
    ResultCache,
    content_hash,
    read_json_file,
    transform_dict_n_str,
    write_json_file,
    write_table,
)


def test_json_output_is_key_sorted(tmp_path):
    path = write_json_file(str(tmp_path / "out" / "a.json"), {"b": np.float64(1.5), "a": np.arange(3)})
    with open(path) as f:
        text = f.read()
    assert text.index('"a"') < text.index('"b"')
    assert read_json_file(path) == {"a": [0, 1, 2], "b": 1.5}


def test_transform_dict_n_str_both_ways():
    text = transform_dict_n_str({"z": 1, "a": [1, 2]}, dict_2_str=True)
    assert text == '{"a": [1, 2], "z": 1}'
    assert transform_dict_n_str(text, dict_2_str=False) == {"a": [1, 2], "z": 1}


def test_content_hash():
    x = np.array([1.0, 2.0])
    assert content_hash("Ar", x) == content_hash("Ar", x.copy())
    assert content_hash("Ar", x) != content_hash("Ar", x + 1e-12)
    assert content_hash({"a": 1, "b": 2}) == content_hash({"b": 2, "a": 1})


def test_result_cache(tmp_path):
    cache = ResultCache(str(tmp_path / "cache"))
    assert cache.get("relax", "k1") is None
    cache.put("relax", "k1", {"energy": -1.0})
    assert cache.get("relax", "k1") == {"energy": -1.0}
    assert cache.get("phonon", "k1") is None


def test_event_log_appends_json_lines(tmp_path):
    log = EventLog(str(tmp_path / "events.jsonl"))
    log.emit("stage_started", stage="relax", count=3)
    log.emit("stage_finished", stage="relax")
    with open(log.file_path) as f:
        lines = [transform_dict_n_str(line, dict_2_str=False) for line in f]
    assert [x["event"] for x in lines] == ["stage_started", "stage_finished"]
    assert lines[0]["count"] == 3


def test_write_table(tmp_path):
    path = write_table(str(tmp_path / "t.csv"), [{"x": 1, "y": 0.5}, {"x": 2, "y": 0.25}])
    df = pd.read_csv(path)
    assert list(df.columns) == ["x", "y"]
    assert df["y"].tolist() == [0.5, 0.25]
