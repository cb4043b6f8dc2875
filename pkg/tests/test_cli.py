import csv
import json
import math

import numpy as np
import pytest

from tscert.cli import main, parse_value, parse_values


@pytest.mark.parametrize("text, value", [("3pi/4", 3 * math.pi / 4), ("pi", math.pi), ("0.5", 0.5),
                                         ("3*pi/4", 3 * math.pi / 4), ("-pi/6", -math.pi / 6), ("2pi", 2 * math.pi)])
def test_parse_value(text, value):
    assert parse_value(text) == pytest.approx(value, rel=1e-15)


def test_parse_values_list():
    assert parse_values("pi/6, 0.2") == pytest.approx([math.pi / 6, 0.2])
    with pytest.raises(ValueError):
        parse_value("three")


@pytest.fixture(scope="module")
def smib_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("smib")
    assert main(["certify", "--case", "smib", "--theta-max", "3pi/4", "--omega-max", "pi", "--out", str(out)]) == 0
    return out / "report.json"


@pytest.fixture(scope="module")
def ieee9_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("ieee9")
    assert main(["certify", "--case", "ieee9_kron", "--theta-max", "pi/6", "--out", str(out)]) == 0
    return out / "report.json"


def test_certify_smib(smib_report):
    doc = json.loads(smib_report.read_text())
    assert doc["summary"]["eta_bar"] > 0
    assert doc["summary"]["margin"] > 0
    assert 0 < doc["level_sets"]["Vhat_max"] <= doc["level_sets"]["V_max"]


def test_certify_ieee9_budget_range(ieee9_report):
    doc = json.loads(ieee9_report.read_text())
    assert 1e-4 <= doc["robustness"]["eta_bar"] <= 1e-1
    assert doc["reduced_network"]["reference_bus"] == 1


def test_every_level_names_its_face(ieee9_report):
    lv = json.loads(ieee9_report.read_text())["level_sets"]
    values = {r["face"]: r["value"] for r in lv["problems"]}
    for key in ("V_star", "W_star", "Vhat_star", "V_max", "Vhat_max"):
        assert values[lv["attained_by"][key]] == lv[key]


def test_reports_are_reproducible(tmp_path, smib_report):
    assert main(["certify", "--case", "smib", "--theta-max", "3pi/4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.json").read_bytes() == smib_report.read_bytes()


def test_malformed_case_exits_with_field_path(tmp_path, capsys):
    bad = tmp_path / "bad.case"
    bad.write_text(json.dumps({"buses": [{"id": 1, "kind": "infinite_bus", "V": 1.0}]}))
    assert main(["certify", "--case", str(bad), "--out", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "[parse]" in err and "lines" in err


def test_missing_case_file(tmp_path):
    assert main(["certify", "--case", str(tmp_path / "nope.case"), "--out", str(tmp_path)]) == 1


def test_exhausted_search_budget_exits_2(tmp_path, capsys):
    assert main(["certify", "--case", "smib", "--theta-max", "3pi/4", "--budget", "3", "--out", str(tmp_path)]) == 2
    assert "find_certificate" in capsys.readouterr().err


def test_simulate_from_equilibrium_is_flat(tmp_path, smib_report):
    assert main(["simulate", "--report", str(smib_report), "--x0", "0", "--horizon", "1", "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader((tmp_path / "trajectory.csv").open()))
    assert len(rows) == 1001
    assert {float(r["omega_1"]) for r in rows} == {0.0}
    assert len({r["theta_1"] for r in rows}) == 1


def test_simulate_rejects_state_outside_X(tmp_path, smib_report, capsys):
    code = main(["simulate", "--report", str(smib_report), "--x0", "0,50", "--out", str(tmp_path)])
    assert code == 1
    assert "outside" in capsys.readouterr().err


def test_simulate_without_action(tmp_path, smib_report):
    assert main(["simulate", "--report", str(smib_report), "--out", str(tmp_path)]) == 1


def test_monte_carlo_at_bound(tmp_path, ieee9_report):
    code = main(["simulate", "--report", str(ieee9_report), "--trials", "20", "--horizon", "10",
                 "--disturbance", "at-bound", "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads((tmp_path / "monte_carlo.json").read_text())
    assert doc["trials"] == 20 and doc["violations"] == 0
    assert doc["eta_bar"] == pytest.approx(json.loads(ieee9_report.read_text())["summary"]["eta_bar"])


def test_frequency_traces_command(tmp_path, ieee9_report):
    code = main(["simulate", "--report", str(ieee9_report), "--frequency-traces", "--horizon", "5",
                 "--out", str(tmp_path)])
    assert code == 0
    data = np.loadtxt(tmp_path / "frequency_traces.csv", delimiter=",", skiprows=1)
    assert np.max(np.abs(data[:, 1:])) <= math.pi


@pytest.mark.parametrize("command", [["phase-portrait"], ["simulate", "--phase-portrait"]])
def test_phase_portrait_files(tmp_path, smib_report, command):
    assert main(command + ["--report", str(smib_report), "--grid", "11", "--out", str(tmp_path)]) == 0
    for name in ("phase_field.csv", "contour_Vmax.csv", "contour_Vhat.csv", "boundary_segments.csv",
                 "phase_portrait.json"):
        assert (tmp_path / name).exists()
    doc = json.loads((tmp_path / "phase_portrait.json").read_text())
    assert all(c["escape_blocking"] for c in doc["crossings"])


def test_phase_portrait_needs_single_machine(tmp_path, ieee9_report):
    assert main(["phase-portrait", "--report", str(ieee9_report), "--out", str(tmp_path)]) != 0


def test_report_pretty_print(smib_report, capsys):
    assert main(["report", str(smib_report)]) == 0
    text = capsys.readouterr().out
    assert "eta_bar" in text and "V_max" in text and "outflow:" in text


def test_report_rejects_foreign_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{}")
    assert main(["report", str(p)]) == 1
