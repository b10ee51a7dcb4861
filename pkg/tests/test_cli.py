import json

import pytest

from uavicl import cli, harness


def test_region_command(tmp_path):
    rc = cli.main(["region", "--out", str(tmp_path / "r")])
    assert rc == 0
    assert (tmp_path / "r" / "region_user0.csv").exists()
    assert (tmp_path / "r" / "records.json").exists()


def test_schema_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"users": [[0, 0, 1], [5, 5, 1]], "whoops": True}))
    rc = cli.main(["region", "--scenario", str(bad), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_INTERNAL


def test_infeasible_exit_code(tmp_path):
    # a rate floor far beyond channel capacity makes every power vector fail
    doc = json.loads(harness.paper_scenario_path().read_text())
    doc["users"] = doc["users"][:2]
    doc["rate_threshold_bps"] = 1e12
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps(doc))
    rc = cli.main(["solve", "--scenario", str(scen), "--out", str(tmp_path / "o")])
    assert rc == cli.EXIT_INFEASIBLE


def test_console_entry_point():
    import importlib.metadata as md

    eps = md.entry_points()
    try:
        scripts = eps.select(group="console_scripts")
    except AttributeError:
        scripts = eps.get("console_scripts", [])
    names = {e.name for e in scripts}
    if "uavicl" not in names:
        pytest.skip("entry point metadata unavailable in this environment")
    assert "uavicl" in names
