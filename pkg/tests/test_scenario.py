from __future__ import annotations

import json
import logging

import pytest

from metaqr.logging_utils import EVENT_LOGGER, event_log, progress_bar, setup_logging
from metaqr.parallel import WORKERS_ENV
from metaqr.reports import (
    ReportError,
    current_rows,
    format_value,
    read_currents,
    read_report,
    read_table,
    write_report,
    write_table,
    CURRENT_HEADER,
)
from metaqr.scenario import Scenario, ScenarioError
from metaqr.settings_store import DEFAULT_SCENARIO, load_scenario, save_scenario


# ---------- scenario ----------

def test_defaults_describe_the_gold_array(scenario_factory):
    s = scenario_factory()
    assert s.atoms == 8
    assert s.chi == pytest.approx(-10.428 + 1.513j)
    assert s.permittivity == pytest.approx(-9.428 + 1.513j)
    assert s.excitation.k_hat.tolist() == [0.0, 0.0, -1.0]
    assert s.material.chi == s.chi
    assert s.build_layout().atom_count == 8
    assert s.workers == 1


def test_explicit_susceptibility_wins(scenario_factory):
    s = scenario_factory(chi_real=2.0, chi_imag=0.5)
    assert s.chi == 2.0 + 0.5j


def test_line_layout(scenario_factory):
    layout = scenario_factory(layout="line", atoms=3, spacing=4e-7).build_layout()
    assert layout.centers[:, 0].tolist() == pytest.approx([0.0, 4e-7, 8e-7])


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"radius": -1.0}, "radius"),
        ({"atoms": 0}, "atoms"),
        ({"layout": "grid"}, "layout"),
        ({"compression": "svd"}, "compression"),
        ({"qr_eps": 1.5}, "qr_eps"),
        ({"rel_tol": 0.0}, "rel_tol"),
        ({"e0_x": 0.0, "e0_z": 1.0}, "perpendicular"),
        ({"chi_real": 0.0, "chi_imag": 0.0}, "zero susceptibility"),
        ({"atoms": "many"}, "invalid scenario"),
    ],
)
def test_invalid_scenarios(scenario_factory, overrides, message):
    with pytest.raises(ScenarioError, match=message):
        scenario_factory(**overrides)


def test_worker_precedence(monkeypatch, tmp_path):
    settings = {**DEFAULT_SCENARIO, "output_dir": str(tmp_path), "workers": 2}
    assert Scenario.from_settings(settings).workers == 2
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert Scenario.from_settings(settings).workers == 3
    assert Scenario.from_settings(settings, workers=4).workers == 4


def test_settings_round_trip(scenario_factory):
    s = scenario_factory(atoms=5, qr_eps=1e-5)
    again = Scenario.from_settings(s.to_settings(), workers=s.workers)
    assert again.chi == pytest.approx(s.chi, rel=1e-14)
    assert again.replace(chi=s.chi) == s
    assert s.replace(atoms=6).atoms == 6


def test_circular_polarization_survives_the_settings(scenario_factory, tmp_path):
    s = scenario_factory(e0_y="1j")
    assert s.e0 == (1.0, 1j, 0.0)
    settings = s.to_settings()
    assert settings["e0_x"] == 1.0
    assert complex(settings["e0_y"]) == 1j
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(settings), encoding="utf-8")
    again = Scenario.from_settings(load_scenario(path), workers=s.workers)
    assert again.e0 == s.e0
    assert again.excitation.e0.tolist() == [1.0, 1j, 0.0]


def test_true_history_is_off_by_default(scenario_factory):
    assert scenario_factory().true_history is False
    assert scenario_factory(true_history=True).to_settings()["true_history"] is True


# ---------- scenario files ----------

def test_missing_file_gives_defaults(tmp_path):
    assert load_scenario(tmp_path / "absent.json") == DEFAULT_SCENARIO


def test_file_values_override_defaults(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"atoms": 12, "qr_eps": 1e-4}), encoding="utf-8")
    data = load_scenario(path)
    assert data["atoms"] == 12
    assert data["qr_eps"] == 1e-4
    assert data["radius"] == DEFAULT_SCENARIO["radius"]


def test_unreadable_file_falls_back(tmp_path, caplog):
    path = tmp_path / "scenario.json"
    path.write_text("{not json", encoding="utf-8")
    with caplog.at_level(logging.WARNING):
        assert load_scenario(path) == DEFAULT_SCENARIO
    assert "unreadable" in caplog.text


def test_save_merges_into_the_file(tmp_path):
    path = tmp_path / "nested" / "scenario.json"
    assert save_scenario({"atoms": 3}, path)
    assert save_scenario({"qr_eps": 1e-2}, path)
    assert json.loads(path.read_text(encoding="utf-8")) == {"atoms": 3, "qr_eps": 1e-2}
    assert not path.with_suffix(".json.tmp").exists()


# ---------- tables and reports ----------

def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "1"
    assert format_value(7) == "7"
    assert format_value(0.1) == "0.10000000000000001"
    assert format_value(float("inf")) == "inf"
    assert format_value("qr") == "qr"
    with pytest.raises(ReportError):
        format_value(1j)


def test_tables_round_trip_floats_exactly(tmp_path):
    values = [1 / 3, 2.0**-40, -7.25e17]
    path = write_table(tmp_path / "t.tsv", ["k", "v"], [[i, v] for i, v in enumerate(values)])
    rows = read_table(path)
    assert [float(r["v"]) for r in rows] == values
    with pytest.raises(ReportError, match="fields"):
        write_table(tmp_path / "bad.tsv", ["a", "b"], [[1]])


def test_currents_round_trip(tmp_path):
    currents = [1 + 2j, -0.5j, 3.0]
    path = write_table(tmp_path / "c.tsv", CURRENT_HEADER, current_rows(currents, ["loop", "star", "star"]))
    assert read_currents(path).tolist() == currents
    assert [row["kind"] for row in read_table(path)] == ["loop", "star", "star"]


def test_reports_are_sorted_and_parsed(tmp_path):
    path = write_report(tmp_path / "m.txt", {"b": 2, "a": 0.5})
    assert path.read_text(encoding="utf-8") == "a = 0.5\nb = 2\n"
    assert read_report(path) == {"a": "0.5", "b": "2"}
    (tmp_path / "broken.txt").write_text("no separator\n", encoding="utf-8")
    with pytest.raises(ReportError):
        read_report(tmp_path / "broken.txt")
    with pytest.raises(ReportError, match="missing"):
        read_report(tmp_path / "absent.txt")


# ---------- logging ----------

def test_setup_logging_writes_files_and_events(tmp_path, isolated_logging):
    setup_logging({"debug": True}, "abcd1234", tmp_path)
    logging.getLogger("metaqr.test").info("hello from the test")
    event_log("stage", atoms=3)
    for handler in logging.getLogger().handlers + logging.getLogger(EVENT_LOGGER).handlers:
        handler.flush()

    latest = (tmp_path / "latest.log").read_text(encoding="utf-8")
    assert "hello from the test" in latest
    assert "session=abcd1234" in latest
    assert (tmp_path / "debug.log").exists()
    line = (tmp_path / "events.log").read_text(encoding="utf-8").strip().splitlines()[-1]
    payload = json.loads(line[line.index("{"):line.rindex("}") + 1])
    assert payload["event"] == "stage"
    assert payload["atoms"] == 3
    assert "rss_mb" in payload
    assert '"event"' not in latest


def test_progress_bar_is_silent_off_a_terminal():
    with progress_bar(10, "blocks") as bar:
        bar.update()
