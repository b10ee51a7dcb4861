"""Scenario ingestion, experiment orchestration, and result persistence.

Scenarios are JSON documents; every field except ``users`` is optional and
defaults to the reference seven-user network (three BSs on a 1 km x 1 km
area, 1 MHz communication bandwidth, 180 kHz positioning bandwidth,
N0 = -157 dBm/Hz, beta = -38.89 dB, rate floor 2.5 Mb/s). The two dB-scale
inputs (``beta_db``, ``n0_dbm_per_hz``) are converted to linear SI at load
time; everything downstream is linear.

Experiments write plot-ready CSV for sweeps/maps and JSON for full
solutions. Timing lives in a separate "timing" object inside each record
so that identical (config, seed) runs produce byte-identical payloads
after dropping it.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import baselines, gibbs, locgeom
from .model import Allocation, ChannelParams, Position3, ScenarioConfig, Solution

__all__ = [
    "SchemaError",
    "ExperimentSpec",
    "RunRecord",
    "load_scenario",
    "scenario_from_dict",
    "derive_accuracy_thresholds",
    "run_experiment",
    "paper_scenario_path",
]

#: reference positioning power at which the accuracy intervals are anchored
BOUNDS_POWER_W = 0.15

_CHANNEL_KEYS = {
    "beta_db": -38.89,
    "n0_dbm_per_hz": -157.0,
    "iota_g2g": 2.3,
    "iota_a2g": 2.0,
    "omega_g2g": 1.0,
    "omega_a2g": 0.2,
    "outage_eps": 0.1,
    "comm_bandwidth_hz": 1e6,
    "pos_bandwidth_hz": 1.8e5,
    "pos_signal_const_s2": 5.8e-16,
    "nlos_toa_var_s2": 6e-18,
}

_TOP_KEYS = {
    "bs",
    "users",
    "channel",
    "p_max_w",
    "rate_threshold_bps",
    "uav_pos_power_w",
    "zeta",
    "accuracy_overrides",
    "altitude_bounds_m",
    "seed",
}

_DEFAULT_BS = [[-400.0, -350.0, 10.0], [-450.0, 400.0, 10.0], [350.0, 250.0, 10.0]]


class SchemaError(ValueError):
    """A scenario document violates the schema; message carries the path."""


def paper_scenario_path() -> Path:
    """Path of the bundled reference scenario."""
    return Path(__file__).parent / "data" / "paper.json"


def _positions(raw, path: str) -> tuple:
    if not isinstance(raw, list) or not raw:
        raise SchemaError(f"{path}: expected a non-empty list of [x, y, h] triples")
    out = []
    for i, item in enumerate(raw):
        if not isinstance(item, (list, tuple)) or len(item) != 3:
            raise SchemaError(f"{path}[{i}]: expected [x, y, h]")
        try:
            out.append(Position3(float(item[0]), float(item[1]), float(item[2])))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{path}[{i}]: {exc}") from exc
    return tuple(out)


def scenario_from_dict(doc: dict) -> ScenarioConfig:
    """Validate and convert a scenario document (see module docstring)."""
    if not isinstance(doc, dict):
        raise SchemaError("scenario root must be a JSON object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise SchemaError(f"unknown scenario keys: {sorted(unknown)}")
    if "users" not in doc:
        raise SchemaError("users: field is required")

    ch_doc = doc.get("channel", {})
    if not isinstance(ch_doc, dict):
        raise SchemaError("channel: expected an object")
    unknown = set(ch_doc) - set(_CHANNEL_KEYS)
    if unknown:
        raise SchemaError(f"channel: unknown keys {sorted(unknown)}")
    vals = {k: float(ch_doc.get(k, default)) for k, default in _CHANNEL_KEYS.items()}
    try:
        channel = ChannelParams(
            beta=10.0 ** (vals["beta_db"] / 10.0),
            iota_g=vals["iota_g2g"],
            iota_a=vals["iota_a2g"],
            omega_g=vals["omega_g2g"],
            omega_a=vals["omega_a2g"],
            eps_out=vals["outage_eps"],
            n0=10.0 ** ((vals["n0_dbm_per_hz"] - 30.0) / 10.0),
            b_comm=vals["comm_bandwidth_hz"],
            b_pos=vals["pos_bandwidth_hz"],
            psi=vals["pos_signal_const_s2"],
            sigma_nlos2=vals["nlos_toa_var_s2"],
        )
    except ValueError as exc:
        raise SchemaError(f"channel: {exc}") from exc

    overrides = doc.get("accuracy_overrides")
    if overrides is not None:
        if not isinstance(overrides, dict):
            raise SchemaError("accuracy_overrides: expected an object {user_index: eps}")
        try:
            overrides = {int(k): float(v) for k, v in overrides.items()}
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"accuracy_overrides: {exc}") from exc

    alt = doc.get("altitude_bounds_m", [50.0, 1000.0])
    if not isinstance(alt, (list, tuple)) or len(alt) != 2:
        raise SchemaError("altitude_bounds_m: expected [hmin, hmax]")

    try:
        return ScenarioConfig(
            bs=_positions(doc.get("bs", _DEFAULT_BS), "bs"),
            users=_positions(doc["users"], "users"),
            channel=channel,
            p_max=float(doc.get("p_max_w", 1.0)),
            r_th=float(doc.get("rate_threshold_bps", 2.5e6)),
            uav_pos_power=float(doc.get("uav_pos_power_w", 0.2)),
            zeta=float(doc.get("zeta", 0.7)),
            accuracy_overrides=overrides,
            altitude_bounds=(float(alt[0]), float(alt[1])),
            seed=int(doc.get("seed", 1)),
        )
    except SchemaError:
        raise
    except ValueError as exc:
        raise SchemaError(str(exc)) from exc


def load_scenario(path, overrides: Optional[Dict[str, object]] = None) -> ScenarioConfig:
    """Load a scenario JSON file, optionally overriding top-level fields."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise SchemaError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        doc = {**doc, **overrides}
    return scenario_from_dict(doc)


def derive_accuracy_thresholds(
    cfg: ScenarioConfig, bounds_power: float = BOUNDS_POWER_W
) -> np.ndarray:
    """Per-user accuracy thresholds eps_k = lb_k + zeta*(ub_k - lb_k).

    The interval endpoints are computed at the reference positioning power
    (0.15 W on every BS). Per-user overrides from the scenario win.
    """
    p_ref = np.full(3, bounds_power)
    eps = np.empty(cfg.n_users)
    for k in range(cfg.n_users):
        lb, ub, _ = locgeom.accuracy_bounds(k, p_ref, cfg)
        eps[k] = lb + cfg.zeta * (ub - lb)
    if cfg.accuracy_overrides:
        for idx, value in cfg.accuracy_overrides.items():
            if not 0 <= idx < cfg.n_users:
                raise SchemaError(f"accuracy_overrides: user index {idx} out of range")
            eps[idx] = value
    return eps


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------


@dataclass
class ExperimentSpec:
    """One experiment request (mirrors the CLI surface)."""

    kind: str  # solve | baseline | sweep_pmax | sweep_zeta | sweep_users | crlb_grid | region
    scenario_path: str
    output_dir: str
    overrides: Dict[str, object] = field(default_factory=dict)
    repetitions: int = 1
    seed: Optional[int] = None
    baseline: Optional[str] = None  # pso | epa | ucd
    pmax_values: Sequence[float] = (0.4, 0.7, 1.0)
    zeta_values: Sequence[float] = (0.1, 0.3, 0.5, 0.7, 0.9)
    region_altitude: float = 200.0
    region_pos_power: float = BOUNDS_POWER_W
    trace: bool = False
    threads: int = 1

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


@dataclass
class RunRecord:
    """Execution log entry for one pipeline run."""

    spec: dict
    summary: dict
    wall_time: float
    cpu_time: float
    inner_solver_calls: int = 0
    candidate_evaluations: int = 0
    build_id: str = "unknown"


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def solution_to_dict(sol: Solution, include_timing: bool = True) -> dict:
    diag = dict(sol.diagnostics)
    timing = {
        "wall_time_s": diag.pop("wall_time_s", None),
        "cpu_time_s": diag.pop("cpu_time_s", None),
    }
    out = {
        "uav": [sol.uav.x, sol.uav.y, sol.uav.h],
        "objective_bps": sol.objective,
        "user_rates_bps": [float(r) for r in sol.rates.user_rates],
        "comm_power_w": [[float(v) for v in row] for row in sol.alloc.comm_power],
        "pos_power_w": [float(v) for v in sol.alloc.pos_power],
        "bandwidth": [[float(v) for v in row] for row in sol.alloc.bandwidth],
        "diagnostics": diag,
    }
    if include_timing:
        out["timing"] = timing
    return out


def solution_from_dict(doc: dict) -> Solution:
    from .model import RateTable

    alloc = Allocation(
        comm_power=np.array(doc["comm_power_w"]),
        pos_power=np.array(doc["pos_power_w"]),
        bandwidth=np.array(doc["bandwidth"]),
    )
    # per-link detail is not persisted, only the user totals
    rates = RateTable(
        link_rates=np.zeros_like(alloc.comm_power),
        user_rates=np.array(doc["user_rates_bps"], dtype=float),
        sum_rate=float(doc["objective_bps"]),
    )
    return Solution(
        uav=Position3(*doc["uav"]),
        alloc=alloc,
        rates=rates,
        objective=float(doc["objective_bps"]),
        diagnostics=doc.get("diagnostics", {}),
    )


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _solve_once(cfg: ScenarioConfig, seed: int, trace: bool):
    cfg_run = dataclasses.replace(cfg, seed=seed)
    trace_rows: Optional[list] = [] if trace else None
    sol = gibbs.run(cfg_run, gibbs.GibbsConfig(seed=seed), trace=trace_rows)
    return sol, trace_rows


def run_experiment(spec: ExperimentSpec) -> List[RunRecord]:
    """Execute one experiment and persist its outputs.

    Infeasible runs are recorded (summary carries the reason) rather than
    aborting the experiment. Returns the run records, which are also
    written to ``<output_dir>/records.json``.
    """
    out_dir = Path(spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = load_scenario(spec.scenario_path, spec.overrides or None)
    if spec.seed is not None:
        cfg = dataclasses.replace(cfg, seed=spec.seed)
    records: List[RunRecord] = []
    build = _build_id()
    spec_echo = dataclasses.asdict(spec)

    def record(summary: dict, wall: float, cpu: float, **counts) -> None:
        records.append(
            RunRecord(
                spec=spec_echo,
                summary=summary,
                wall_time=wall,
                cpu_time=cpu,
                build_id=build,
                **counts,
            )
        )

    if spec.kind == "solve":
        for rep in range(spec.repetitions):
            seed = cfg.seed + rep
            t0, c0 = time.perf_counter(), time.process_time()
            try:
                sol, trace_rows = _solve_once(cfg, seed, spec.trace)
            except (gibbs.ScenarioInfeasibleError, ValueError) as exc:
                record({"status": "infeasible", "reason": str(exc), "seed": seed},
                       time.perf_counter() - t0, time.process_time() - c0)
                continue
            wall, cpu = time.perf_counter() - t0, time.process_time() - c0
            name = f"solution_rep{rep}.json" if spec.repetitions > 1 else "solution.json"
            _write_json(out_dir / name, solution_to_dict(sol))
            if trace_rows is not None:
                _write_csv(
                    out_dir / f"trace_rep{rep}.csv",
                    ["iteration", "temperature", "best_objective_bps", "p1_w", "p2_w", "p3_w"],
                    [(i, t, b, *p) for (i, t, b, p) in trace_rows],
                )
            record(
                {"status": "ok", "objective_bps": sol.objective, "seed": seed,
                 "uav": [sol.uav.x, sol.uav.y, sol.uav.h]},
                wall, cpu,
                inner_solver_calls=sol.diagnostics.get("inner_solver_calls", 0),
                candidate_evaluations=sol.diagnostics.get("candidate_evaluations", 0),
            )

    elif spec.kind == "baseline":
        if spec.baseline not in ("pso", "epa", "ucd"):
            raise ValueError("baseline must be one of pso, epa, ucd")
        t0, c0 = time.perf_counter(), time.process_time()
        try:
            if spec.baseline == "pso":
                sol = baselines.pso_solve(cfg)
            elif spec.baseline == "epa":
                sol = baselines.epa_solve(cfg)
            else:
                sol = baselines.ucd_solve(cfg)
        except (gibbs.ScenarioInfeasibleError, ValueError) as exc:
            record({"status": "infeasible", "reason": str(exc)},
                   time.perf_counter() - t0, time.process_time() - c0)
        else:
            wall, cpu = time.perf_counter() - t0, time.process_time() - c0
            _write_json(out_dir / f"solution_{spec.baseline}.json", solution_to_dict(sol))
            record(
                {"status": "ok", "objective_bps": sol.objective, "method": spec.baseline},
                wall, cpu,
                inner_solver_calls=sol.diagnostics.get("inner_solver_calls", 0),
                candidate_evaluations=sol.diagnostics.get(
                    "candidate_evaluations", sol.diagnostics.get("fitness_evaluations", 0)
                ),
            )

    elif spec.kind == "sweep_pmax":
        rows = []
        for pmax in spec.pmax_values:
            cfg_p = dataclasses.replace(cfg, p_max=float(pmax))
            t0, c0 = time.perf_counter(), time.process_time()
            try:
                sol, _ = _solve_once(cfg_p, cfg.seed, False)
                rows.append((pmax, "proposed", sol.objective, sol.uav.x, sol.uav.y, sol.uav.h))
                status = {"status": "ok", "p_max_w": pmax, "objective_bps": sol.objective}
            except (gibbs.ScenarioInfeasibleError, ValueError) as exc:
                rows.append((pmax, "proposed", math.nan, math.nan, math.nan, math.nan))
                status = {"status": "infeasible", "p_max_w": pmax, "reason": str(exc)}
            record(status, time.perf_counter() - t0, time.process_time() - c0)
        _write_csv(
            out_dir / "sweep_pmax.csv",
            ["p_max_w", "method", "sum_rate_bps", "uav_x_m", "uav_y_m", "uav_h_m"],
            rows,
        )

    elif spec.kind == "sweep_zeta":
        rows = []
        items = list(spec.zeta_values)

        def one(zeta: float):
            cfg_z = dataclasses.replace(cfg, zeta=float(zeta))
            return _solve_once(cfg_z, cfg.seed, False)[0]

        results = _pmap(one, items, spec.threads)
        for zeta, res in zip(items, results):
            t0 = c0 = 0.0
            if isinstance(res, Exception):
                rows.append((zeta, math.nan, math.nan, math.nan, math.nan))
                record({"status": "infeasible", "zeta": zeta, "reason": str(res)}, t0, c0)
            else:
                rows.append((zeta, res.objective, res.uav.x, res.uav.y, res.uav.h))
                record({"status": "ok", "zeta": zeta, "objective_bps": res.objective},
                       res.diagnostics.get("wall_time_s", 0.0),
                       res.diagnostics.get("cpu_time_s", 0.0))
        _write_csv(
            out_dir / "sweep_zeta.csv",
            ["zeta", "sum_rate_bps", "uav_x_m", "uav_y_m", "uav_h_m"],
            rows,
        )

    elif spec.kind == "sweep_users":
        rng = np.random.default_rng(cfg.seed)
        rows = []
        for m in range(2, cfg.n_users + 1):
            idx = sorted(rng.choice(cfg.n_users, size=m, replace=False).tolist())
            cfg_m = dataclasses.replace(cfg, users=tuple(cfg.users[i] for i in idx))
            for method in ("proposed", "pso"):
                t0, c0 = time.perf_counter(), time.process_time()
                try:
                    if method == "proposed":
                        sol, _ = _solve_once(cfg_m, cfg.seed, False)
                        evals = sol.diagnostics.get("candidate_evaluations", 0)
                    else:
                        sol = baselines.pso_solve(cfg_m)
                        evals = sol.diagnostics.get("fitness_evaluations", 0)
                    wall = time.perf_counter() - t0
                    rows.append((m, method, sol.objective, evals, wall))
                    record({"status": "ok", "m": m, "method": method,
                            "objective_bps": sol.objective},
                           wall, time.process_time() - c0,
                           candidate_evaluations=evals)
                except (gibbs.ScenarioInfeasibleError, ValueError) as exc:
                    rows.append((m, method, math.nan, 0, math.nan))
                    record({"status": "infeasible", "m": m, "method": method,
                            "reason": str(exc)},
                           time.perf_counter() - t0, time.process_time() - c0)
        _write_csv(
            out_dir / "sweep_users.csv",
            ["m_users", "method", "sum_rate_bps", "evaluations", "wall_time_s"],
            rows,
        )

    elif spec.kind == "crlb_grid":
        study = baselines.GridStudyConfig()
        for scheme in ("uav_4th", "ground_4th"):
            t0, c0 = time.perf_counter(), time.process_time()
            res = baselines.crlb_grid_study(cfg, study, scheme)
            for name, err in (("horizontal", res.err_h), ("vertical", res.err_v)):
                rows = []
                for iy, y in enumerate(res.ys):
                    for ix, x in enumerate(res.xs):
                        rows.append(
                            (x, y, err[iy, ix], res.best_anchor_x[iy, ix], res.best_anchor_y[iy, ix])
                        )
                _write_csv(
                    out_dir / f"crlb_{scheme}_{name}.csv",
                    ["x_m", "y_m", "err_m", "best_anchor_x_m", "best_anchor_y_m"],
                    rows,
                )
            record({"status": "ok", "scheme": scheme,
                    "err_h_range_m": [float(np.nanmin(res.err_h)), float(np.nanmax(res.err_h))],
                    "err_v_range_m": [float(np.nanmin(res.err_v)), float(np.nanmax(res.err_v))]},
                   time.perf_counter() - t0, time.process_time() - c0)

    elif spec.kind == "region":
        eps = derive_accuracy_thresholds(cfg)
        p_ref = np.full(3, spec.region_pos_power)
        for k in range(cfg.n_users):
            t0, c0 = time.perf_counter(), time.process_time()
            try:
                region = locgeom.region_for_user(k, p_ref, eps[k], cfg)
                pts = locgeom.ellipse_points(region, spec.region_altitude)
                _write_csv(out_dir / f"region_user{k}.csv", ["x_m", "y_m"], pts.tolist())
                record({"status": "ok", "user": k},
                       time.perf_counter() - t0, time.process_time() - c0)
            except ValueError as exc:
                record({"status": "infeasible", "user": k, "reason": str(exc)},
                       time.perf_counter() - t0, time.process_time() - c0)

    else:
        raise ValueError(f"unknown experiment kind: {spec.kind}")

    _write_json(out_dir / "records.json", [dataclasses.asdict(r) for r in records])
    return records


def _pmap(fn, items, threads: int):
    """Map preserving order; exceptions are returned in place of results."""

    def safe(item):
        try:
            return fn(item)
        except Exception as exc:  # noqa: BLE001 - surfaced to the caller
            return exc

    if threads <= 1 or len(items) <= 1:
        return [safe(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(safe, items))
