import json
from pathlib import Path

import pandas as pd
import pytest

from src.cli import EXIT_FAILED, EXIT_INPUT, EXIT_OK, main
from src.simulator import CSV_COLUMNS

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def run(command, scenario, out, *extra):
    return main([command, "--scenario", str(SCENARIOS / f"{scenario}.toml"), "--out", str(out), *extra])


def read(out, name):
    return json.loads((Path(out) / name).read_text(encoding="utf-8"))


def test_analyze_reports_assumptions(tmp_path):
    assert run("analyze", "s2", tmp_path) == EXIT_OK
    document = read(tmp_path, "analyze.json")
    assert document["assumptions"]["GW1"] is True
    assert document["spectral"]["rho"] == pytest.approx(4.0)
    critical = [c for c in document["spectral"]["clusters"] if c["class"] == "critical"]
    assert len(critical) == 1
    assert critical[0]["eigenvalue"][0] == pytest.approx(2.0)
    assert abs(critical[0]["margin"]) < 1e-9

    assert run("analyze", "deterministic", tmp_path / "det") == EXIT_FAILED
    assert read(tmp_path / "det", "analyze.json")["assumptions"]["GW3"] is False


def test_invalid_inputs_exit_with_one(tmp_path):
    broken = tmp_path / "roto.toml"
    broken.write_text('schema = 2\nname = "x"\n', encoding="utf-8")
    assert main(["analyze", "--scenario", str(broken), "--out", str(tmp_path)]) == EXIT_INPUT
    assert main(["analyze", "--scenario", str(tmp_path / "nada.toml")]) == EXIT_INPUT
    assert run("simulate", "s1", tmp_path, "--replicates", "0") == EXIT_INPUT


def test_constants_for_critical_scenario(tmp_path):
    assert run("constants", "s2", tmp_path) == EXIT_OK
    document = read(tmp_path, "constants.json")
    assert document["constants"]["case"] == "case ii, l*=0"
    assert document["constants"]["sigma_l"][0] == pytest.approx(2.0)
    assert document["rate"] == "n^0.5 rho^(n/2)"
    assert document["critical_variance_profile"]["value"] == pytest.approx(12.0)


def test_simulate_is_reproducible_across_workers(tmp_path):
    flags = ("--n", "6", "--delta", "3", "--replicates", "8", "--seed", "99")
    assert run("simulate", "s2", tmp_path / "a", *flags, "--workers", "1") == EXIT_OK
    assert run("simulate", "s2", tmp_path / "b", *flags, "--workers", "2") == EXIT_OK
    first = (tmp_path / "a" / "replicates.csv").read_bytes()
    assert first == (tmp_path / "b" / "replicates.csv").read_bytes()
    frame = pd.read_csv(tmp_path / "a" / "replicates.csv")
    assert list(frame.columns) == CSV_COLUMNS
    assert len(frame) == 8
    summary = read(tmp_path / "a", "summary.json")
    assert summary["master_seed"] == 99
    assert summary["N"] == 9


def test_verify_degenerate_scenario(tmp_path):
    assert run("verify", "deterministic", tmp_path, "--pdf") == EXIT_OK
    document = read(tmp_path, "verification.json")
    assert document["report"]["status"] == "PASS"
    assert document["report"]["case"] == "case i, sigma=0"
    assert (tmp_path / "verification.pdf").exists()


def test_verify_from_csv(tmp_path):
    flags = ("--n", "8", "--delta", "4", "--replicates", "120")
    assert run("simulate", "s1", tmp_path, *flags) == EXIT_OK
    code = run("verify", "s1", tmp_path / "v", "--from-csv", str(tmp_path / "replicates.csv"), "--emit-hist", *flags)
    document = read(tmp_path / "v", "verification.json")
    assert 100 <= document["report"]["sample_size"] <= 120
    assert code == (EXIT_OK if document["report"]["status"] == "PASS" else EXIT_FAILED)
    hist = pd.read_csv(tmp_path / "v" / "residual_hist.csv")
    assert hist["count"].sum() <= 120


def test_verify_rejects_wrong_case(tmp_path):
    assert run("verify", "s1", tmp_path, "--case", "ii", "--replicates", "60", "--n", "6", "--delta", "2") == EXIT_INPUT


def test_star_check_command(tmp_path):
    assert run("star-check", "s1", tmp_path, "--n", "5", "--replicates", "5") == EXIT_OK
    document = read(tmp_path, "star_check.json")
    assert document["passed"] is True
    assert document["horizon"] == 5


def test_verify_critical_scenario_reports_growth_table(tmp_path):
    code = run("verify", "s2", tmp_path, "--n", "6", "--delta", "4", "--replicates", "80", "--seed", "5")
    document = read(tmp_path, "verification.json")
    growth = document["critical_growth"]
    assert growth["l_star"] == 0
    assert [row["n"] for row in growth["table"]] == [6, 8, 9, 10]
    for row in growth["table"]:
        assert row["exact"] == pytest.approx(1.0)
        assert row["limit"] == pytest.approx(1.0)
    assert isinstance(growth["flat"], bool)
    assert set(document["direction_angles"]) == {"6", "8", "9", "10"}
    failed = document["report"]["status"] == "FAIL" or not growth["flat"]
    assert code == (EXIT_FAILED if failed else EXIT_OK)
