from __future__ import annotations

import numpy as np
import pytest

from metaqr import pipeline
from metaqr.cli import (
    EXIT_ERROR,
    EXIT_NOT_CONVERGED,
    EXIT_OK,
    build_parser,
    main,
    scenario_from_args,
)
from metaqr.reports import read_report, read_table
from metaqr.scenario import ScenarioError
from metaqr.tasks_registry import find_task, get_tasks

pytestmark = pytest.mark.usefixtures("isolated_logging")


@pytest.fixture
def run(tmp_path):
    """Invoke the CLI with a scenario file that does not exist, so defaults apply."""
    missing = str(tmp_path / "no-scenario.json")

    def _run(*args: str, output=None) -> int:
        out = output or tmp_path / "out"
        command = list(args[:2]) if args[0] == "experiment" else [args[0]]
        rest = list(args[len(command):])
        return main(command + ["--scenario", missing, "--output", str(out)] + rest)

    return _run


# ---------- registry ----------

def test_every_task_runs_a_pipeline_function():
    for task in get_tasks():
        for entry in task.get("subcommands", [task]):
            assert callable(getattr(pipeline, entry["run"]))


def test_find_task():
    assert find_task("solve")["run"] == "run_solve"
    assert find_task("experiment", "split")["run"] == "run_experiment_split"
    with pytest.raises(KeyError):
        find_task("plot")


def test_commands_dispatch_through_the_registry(run, monkeypatch, tmp_path):
    calls = []

    def _fake(scenario, **kwargs):
        calls.append((scenario.atoms, kwargs))
        return pipeline.ExperimentResult("fake", [], [], paths={"table": tmp_path / "fake.tsv"})

    monkeypatch.setattr(pipeline, "run_experiment_scaling", _fake)
    code = run("experiment", "scaling", "--atoms", "3", "--atoms-list", "4", "--eps-list", "1e-3", "--unpreconditioned")
    assert code == EXIT_OK
    assert calls == [(3, {"eps_list": [1e-3], "atoms_list": [4], "unpreconditioned": True})]

    monkeypatch.setattr(pipeline, "run_generate", lambda scenario: calls.append(("generate", scenario.atoms)) or {})
    assert run("generate", "--atoms", "2") == EXIT_OK
    assert calls[-1] == ("generate", 2)


def test_parser_maps_flags_onto_the_scenario(tmp_path):
    ns = build_parser().parse_args([
        "solve", "--scenario", str(tmp_path / "none.json"), "--output", str(tmp_path),
        "--atoms", "5", "--eps", "1e-4", "--no-preconditioner", "--workers", "2",
    ])
    scenario = scenario_from_args(find_task("solve"), ns)
    assert scenario.atoms == 5
    assert scenario.qr_eps == 1e-4
    assert scenario.preconditioner is False
    assert scenario.workers == 2
    assert scenario.output_dir == tmp_path


def test_parser_accepts_experiment_lists():
    ns = build_parser().parse_args(["experiment", "scaling", "--atoms-list", "4", "16", "--eps-list", "1e-3", "1e-5"])
    assert ns.atoms_list == [4, 16]
    assert ns.eps_list == [1e-3, 1e-5]
    assert ns.unpreconditioned is False


# ---------- commands ----------

def test_generate(run, tmp_path):
    assert run("generate", "--atoms", "3") == EXIT_OK
    out = tmp_path / "out"
    assert len(read_table(out / "layout.tsv")) == 3
    mesh = read_report(out / "mesh.txt")
    assert mesh["dofs_per_atom"] == "28"
    assert mesh["atoms"] == "3"
    assert (out / "tree.tsv").exists()
    assert (out / "logs" / "latest.log").exists()


def test_solve_single_atom(run, tmp_path, capsys):
    assert run("solve", "--atoms", "1") == EXIT_OK
    out = tmp_path / "out"
    assert len(read_table(out / "currents.tsv")) == 28
    metrics = read_report(out / "metrics.txt")
    assert metrics["converged"] == "1"
    assert metrics["gain"] == "1"
    assert float(metrics["solution_error"]) <= 1e-6
    assert "converged after" in capsys.readouterr().out


def test_true_residual_history_is_opt_in(run, tmp_path):
    plain, tracked = tmp_path / "plain", tmp_path / "tracked"
    assert run("solve", "--atoms", "2", output=plain) == EXIT_OK
    assert run("solve", "--atoms", "2", "--true-history", output=tracked) == EXIT_OK

    rows = read_table(plain / "residuals.tsv")
    assert len(rows) > 1
    assert all(row["true_residual"] == "" for row in rows)
    assert 0.0 < float(read_report(plain / "metrics.txt")["true_residual"]) < 1.0

    rows = read_table(tracked / "residuals.tsv")
    assert all(row["true_residual"] != "" for row in rows)
    assert float(rows[0]["true_residual"]) == 1.0
    assert (plain / "currents.tsv").read_bytes() == (tracked / "currents.tsv").read_bytes()


def test_solve_is_reproducible_and_report_recomputes_it(run, tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    assert run("solve", "--atoms", "2", output=first) == EXIT_OK
    assert run("solve", "--atoms", "2", output=second) == EXIT_OK
    for name in ("currents.tsv", "residuals.tsv", "ledger.tsv", "metrics.txt"):
        assert (first / name).read_bytes() == (second / name).read_bytes()

    before = (first / "metrics.txt").read_bytes()
    assert main(["report", "--output", str(first)]) == EXIT_OK
    assert (first / "metrics.txt").read_bytes() == before


def test_report_on_an_empty_directory_is_an_error(tmp_path):
    assert main(["report", "--output", str(tmp_path / "nothing")]) == EXIT_ERROR


def test_verify_single_atom(run, tmp_path):
    assert run("verify", "--atoms", "1") == EXIT_OK
    out = tmp_path / "out"
    assert read_report(out / "verify.txt")["passed"] == "1"
    assert len(read_table(out / "reference_currents.tsv")) == 28


def test_degenerate_mesh_is_an_error(run):
    assert run("solve", "--voxel-size", "1e-6") == EXIT_ERROR


def test_iteration_cap_reports_non_convergence(run):
    assert run("solve", "--atoms", "2", "--max-iter", "1", "--rel-tol", "1e-12") == EXIT_NOT_CONVERGED


def test_split_needs_two_atoms(run):
    assert run("experiment", "split", "--atoms", "3") == EXIT_ERROR


def test_scaling_experiment(run, tmp_path):
    assert run("experiment", "scaling", "--atoms-list", "1", "2", "--eps-list", "1e-3") == EXIT_OK
    rows = read_table(tmp_path / "out" / "scaling.tsv")
    assert [row["atoms"] for row in rows] == ["1", "2"]
    assert [row["n_dofs"] for row in rows] == ["28", "56"]
    assert (tmp_path / "out" / "residuals_N2_eps0.001.tsv").exists()


# ---------- experiments through the pipeline ----------

def test_split_experiment_halves_the_columns(scenario_factory):
    result = pipeline.run_experiment_split(scenario_factory(atoms=2), [1e-2, 1e-4, 1e-6])
    summary = result.summary
    assert summary["rows"] == 28
    assert summary["cols_first_half"] + summary["cols_second_half"] == 28
    assert summary["cols_first_half"] == 14
    errors = result.column("error_no_split")
    assert errors == sorted(errors, reverse=True)
    assert all(e <= eps for e, eps in zip(errors, [1e-2, 1e-4, 1e-6]))
    assert result.paths["table"].exists()


def test_split_experiment_rejects_other_atom_counts(scenario_factory):
    with pytest.raises(ScenarioError, match="exactly 2 atoms"):
        pipeline.run_experiment_split(scenario_factory(atoms=1), [1e-3])


def test_split_columns_uses_the_widest_axis():
    centroids = np.array([[0.0, 5.0, 0.0], [0.0, -1.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 0.0]])
    first, second = pipeline.split_columns(centroids)
    assert first.tolist() == [1, 3]
    assert second.tolist() == [0, 2]


def test_matched_gains_interpolates_in_log_error():
    matched = pipeline.matched_gains([1e-3, 1e-9], [1e-2, 1e-4], [10.0, 4.0])
    assert matched[0] == pytest.approx(7.0)
    assert matched[1] is None
