import dataclasses
import json

import numpy as np
import pytest

from uavicl import harness, locgeom
from uavicl.harness import (
    ExperimentSpec,
    SchemaError,
    derive_accuracy_thresholds,
    load_scenario,
    paper_scenario_path,
    run_experiment,
    scenario_from_dict,
    solution_from_dict,
    solution_to_dict,
)


def test_paper_scenario_exact_fields(paper_cfg):
    ch = paper_cfg.channel
    assert ch.b_comm == 1e6
    assert ch.b_pos == 1.8e5
    assert ch.n0 == pytest.approx(10 ** (-18.7), rel=1e-12)
    assert ch.beta == pytest.approx(10 ** (-3.889), rel=1e-12)
    assert paper_cfg.r_th == 2.5e6
    assert ch.sigma_nlos2 == 6e-18
    assert ch.psi == 5.8e-16
    assert ch.iota_g == 2.3
    assert ch.iota_a == 2.0
    assert ch.omega_g == 1.0
    assert ch.omega_a == 0.2
    assert ch.eps_out == 0.1
    assert paper_cfg.p_max == 1.0
    assert paper_cfg.zeta == 0.7
    assert paper_cfg.uav_pos_power == 0.2
    assert paper_cfg.n_users == 7
    assert paper_cfg.bs[0] == (paper_cfg.bs[0].__class__(-400.0, -350.0, 10.0))


def test_schema_rejects_bad_documents():
    with pytest.raises(SchemaError, match="users"):
        scenario_from_dict({})
    with pytest.raises(SchemaError, match="unknown scenario keys"):
        scenario_from_dict({"users": [[0, 0, 1], [1, 1, 1]], "bogus": 1})
    with pytest.raises(SchemaError, match="p_max"):
        scenario_from_dict({"users": [[0, 0, 1], [9, 9, 1]], "p_max_w": -2.0})
    with pytest.raises(SchemaError, match=r"users\[1\]"):
        scenario_from_dict({"users": [[0, 0, 1], [1, 1]]})
    with pytest.raises(SchemaError, match="channel"):
        scenario_from_dict({"users": [[0, 0, 1], [9, 9, 1]], "channel": {"nope": 3}})


def test_load_scenario_overrides(tmp_path):
    doc = {"users": [[0, 0, 5], [50, 80, 5], [-60, 10, 5]], "zeta": 0.4}
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    cfg = load_scenario(path, overrides={"zeta": 0.9, "seed": 42})
    assert cfg.zeta == 0.9
    assert cfg.seed == 42


def test_thresholds_interpolation(paper_cfg):
    eps0 = derive_accuracy_thresholds(dataclasses.replace(paper_cfg, zeta=0.0))
    eps1 = derive_accuracy_thresholds(dataclasses.replace(paper_cfg, zeta=1.0))
    eps7 = derive_accuracy_thresholds(paper_cfg)
    assert len(eps7) == 7
    for k in range(7):
        lb, ub, _ = locgeom.accuracy_bounds(k, np.full(3, harness.BOUNDS_POWER_W), paper_cfg)
        assert eps0[k] == pytest.approx(lb, rel=1e-12)
        assert eps1[k] == pytest.approx(ub, rel=1e-12)
        assert eps7[k] == pytest.approx(lb + 0.7 * (ub - lb), rel=1e-12)


def test_thresholds_overrides(paper_cfg):
    cfg = dataclasses.replace(paper_cfg, accuracy_overrides={2: 1.5e51})
    eps = derive_accuracy_thresholds(cfg)
    assert eps[2] == 1.5e51


def test_solution_round_trip(paper_cfg):
    from uavicl import bapo
    from uavicl.model import Position3, Solution

    u = Position3(-100.0, 10.0, 400.0)
    sol_b = bapo.solve_bapo(u, np.array([0.15, 0.15, 0.15, 0.2]), paper_cfg)
    sol = Solution(u, sol_b.alloc, sol_b.rates, sol_b.objective, {"wall_time_s": 1.0})
    doc = solution_to_dict(sol)
    back = solution_from_dict(json.loads(json.dumps(doc)))
    assert back.objective == sol.objective
    assert back.uav == sol.uav
    np.testing.assert_array_equal(back.alloc.comm_power, sol.alloc.comm_power)
    back.alloc.validate(paper_cfg.p_max)  # constraints re-verified on reload
    assert (back.rates.user_rates >= paper_cfg.r_th * (1 - 1e-6)).all()


def test_region_experiment_writes_polylines(tmp_path, paper_cfg):
    spec = ExperimentSpec(
        kind="region",
        scenario_path=str(paper_scenario_path()),
        output_dir=str(tmp_path),
    )
    records = run_experiment(spec)
    assert len(records) == 7
    for k in range(7):
        lines = (tmp_path / f"region_user{k}.csv").read_text().strip().splitlines()
        assert lines[0] == "x_m,y_m"
        assert len(lines) == 361  # header + 360 samples


def test_crlb_experiment_writes_maps(tmp_path, monkeypatch):
    # shrink the study so the smoke test stays fast
    monkeypatch.setattr(harness.baselines, "GridStudyConfig", _coarse_study)
    spec = ExperimentSpec(
        kind="crlb_grid",
        scenario_path=str(paper_scenario_path()),
        output_dir=str(tmp_path),
    )
    records = run_experiment(spec)
    assert {r.summary["scheme"] for r in records} == {"uav_4th", "ground_4th"}
    for scheme in ("uav_4th", "ground_4th"):
        for name in ("horizontal", "vertical"):
            path = tmp_path / f"crlb_{scheme}_{name}.csv"
            assert path.exists()
            header = path.read_text().splitlines()[0]
            assert header == "x_m,y_m,err_m,best_anchor_x_m,best_anchor_y_m"


from uavicl.baselines import GridStudyConfig as _GridStudyConfig


def _coarse_study():
    return _GridStudyConfig(cell=250.0, search_pitch=250.0)


def test_records_file_written(tmp_path):
    spec = ExperimentSpec(
        kind="region",
        scenario_path=str(paper_scenario_path()),
        output_dir=str(tmp_path),
    )
    run_experiment(spec)
    records = json.loads((tmp_path / "records.json").read_text())
    assert all("wall_time" in r and "build_id" in r for r in records)
