# tests/test_reporting.py
import json
from xml.etree import ElementTree

import numpy as np
import pytest

from sa_lab.errors import LabError
from sa_lab.reporting import check_record, clean, fmt, read_csv, svg_plot, write_csv, write_json


@pytest.mark.p1
def test_clean_makes_records_json_ready():
    rec = clean({"a": np.array([1.0, np.nan]), "b": np.float64(np.inf), "c": np.int64(3), 0.5: np.bool_(True)})
    assert rec == {"a": [1.0, None], "b": None, "c": 3, "0.5": True}
    json.dumps(rec)


@pytest.mark.p1
def test_csv_cells_round_trip(tmp_path):
    path = write_csv(tmp_path / "t.csv", ["alpha", "estimate", "flag", "missing"], [[0.1, 1 / 3, True, None]])
    header, rows = read_csv(path)
    assert header == ["alpha", "estimate", "flag", "missing"]
    assert float(rows[0][1]) == 1 / 3
    assert rows[0][2:] == ["true", ""]
    assert fmt(np.int32(7)) == "7"


@pytest.mark.p2
def test_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(LabError, match="row of length"):
        write_csv(tmp_path / "t.csv", ["a", "b"], [[1.0]])


@pytest.mark.p1
def test_schema_violation_raises_lab_error():
    with pytest.raises(LabError, match="manifest record failed schema validation"):
        check_record({"version": "x"}, "manifest")


@pytest.mark.p2
def test_json_output_is_sorted_and_stable(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": np.array([2.0])})
    write_json(tmp_path / "b.json", {"a": [2.0], "b": 1})
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@pytest.mark.p2
def test_svg_plot_is_deterministic_and_drops_non_positive(tmp_path):
    series = {"m": [(0.1, 2.0), (0.05, 1.0), (0.02, 0.0)]}
    one = svg_plot(tmp_path / "one.svg", "m vs alpha", series, "alpha", "m", fit=(1.0, 3.0)).read_text(encoding="utf-8")
    two = svg_plot(tmp_path / "two.svg", "m vs alpha", series, "alpha", "m", fit=(1.0, 3.0)).read_text(encoding="utf-8")
    assert one == two
    assert one.startswith("<svg") and one.rstrip().endswith("</svg>")
    assert one.count("<circle") == 2
    assert "slope 1.000" in one


@pytest.mark.p2
def test_svg_plot_escapes_markup_in_labels(tmp_path):
    """Steps:
    1. Plot with a title, axis labels and a series name holding '<', '>' and '&'
    2. The file parses as XML and the text nodes read back unchanged
    """
    title, xlabel, ylabel, name = "E||d||^2 < C & tau > 0", "alpha <step>", "m2 & m4", "a<b"
    path = svg_plot(tmp_path / "odd.svg", title, {name: [(0.1, 1.0), (0.05, 0.5)]}, xlabel, ylabel)
    root = ElementTree.parse(path).getroot()
    texts = [node.text for node in root.iter("{http://www.w3.org/2000/svg}text")]
    assert texts[:3] == [title, xlabel, ylabel]
    assert name in texts
    assert "&amp;" in path.read_text(encoding="utf-8")
