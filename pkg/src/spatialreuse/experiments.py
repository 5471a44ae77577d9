"""Scenario runs, parameter sweeps and CSV output."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import device, layered, reference
from .kernels import capacity
from .netmodel import (
    ScenarioConfig,
    build_channel,
    build_topology,
    dbm_to_watts,
    direct_channel,
    direct_topology,
    watts_to_dbm,
)

MODES = ("reference", "layered", "device", "direct")
SWEEP_VARIABLES = ("P_max_dbm", "reuse_factor", "num_nodes", "rho")


@dataclass
class RunRecord:
    scenario_hash: str
    mode: str
    seed: int
    objective_kbps: float
    power_dbm: float
    iterations: int
    converged: bool
    runtime: float = 0.0
    feasible: bool = True

    CSV_FIELDS = ("scenario_hash", "mode", "seed", "objective_kbps", "power_dbm", "iterations", "converged", "feasible")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def scenario_hash(config: ScenarioConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def solve_mode(config: ScenarioConfig, mode: str, topology=None, max_iters=None, rho=None):
    """Build the instance for ``mode`` and solve it.

    Returns ``(solution, topology, channel, trace, extras)``. ``extras``
    carries the message log for device runs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    topology = topology if topology is not None else build_topology(config)
    rho = rho if rho is not None else config.rho
    stop = {"max_iters": max_iters or config.max_iters, "eps_abs": config.eps_abs, "eps_rel": config.eps_rel}
    extras = {}
    trace = []
    if mode == "direct":
        topology = direct_topology(topology)
        channel = direct_channel(topology, config)
        sol = reference.solve_direct(topology, channel, tol=config.tol)
        trace = _scp_trace(sol)
    else:
        channel = build_channel(topology, config)
        if mode == "reference":
            sol = reference.solve_joint(topology, channel, tol=config.tol, epsilon=config.epsilon_power)
            trace = _scp_trace(sol)
        elif mode == "layered":
            sol, trace = layered.run_layered(topology, channel, rho=rho or layered.DEFAULT_RHO, stop=stop)
        else:
            schedule = device.EventSchedule.from_config(config.events, topology, seed=config.rng_seed)
            sol, trace, log = device.run_device_admm(topology, channel, rho=rho or device.DEFAULT_RHO, stop=stop, schedule=schedule)
            extras["messages"] = log
            channel = sol.info.get("channel", channel)
    return sol, topology, channel, trace, extras


def _scp_trace(sol) -> list:
    rows = []
    for i, (phase, nu_model, nu_feasible, power) in enumerate(sol.info.get("scp_history", []), start=1):
        rows.append({"iteration": i, "phase": phase, "model_objective": nu_model,
                     "feasible_objective": nu_feasible, "power_total": power})
    return rows


def make_record(config, mode, sol, topology, channel, runtime, label=None) -> RunRecord:
    rep = reference.verify_solution(sol, topology, channel, tol=1e-4)
    return RunRecord(
        scenario_hash=scenario_hash(config), mode=label or mode, seed=config.rng_seed,
        objective_kbps=max(sol.objective, 0.0) * 1e3,
        power_dbm=watts_to_dbm(sol.power_total) if sol.power_total > 0 else -math.inf,
        iterations=int(sol.iterations), converged=bool(sol.converged), runtime=runtime, feasible=bool(rep["ok"]),
    )


def quantize_bandwidths(solution, topology, channel, grid: float):
    """Floor every ``w_l`` to a multiple of ``grid`` MHz and re-solve the rest.

    Powers and flows are re-optimized centrally with bandwidths pinned. Links
    whose bandwidth floors to zero are listed in ``info["quantization"]``
    together with the objective loss. ``grid <= 0`` returns ``solution``.
    """
    if grid is None or grid <= 0:
        return solution
    w = np.floor(np.asarray(solution.w) / grid + 1e-9) * grid
    flagged = [int(l) for l in np.flatnonzero((w <= 0) & (np.asarray(solution.w) > 0))]
    if w.sum() <= 0:
        out = reference.assemble_solution(topology, np.zeros_like(w), np.zeros_like(w), w, solution.W)
    else:
        out = reference.solve_joint(topology, channel, fixed_w=w)
        out.w = w
    out.info["quantization"] = {"grid": grid, "flagged_links": flagged, "objective_loss": solution.objective - out.objective}
    return out


def _csv_text(fields, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in fields})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def topology_rows(topology, channel) -> list:
    lengths = topology.link_lengths()
    rows = []
    for l, (i, j) in enumerate(topology.links):
        rows.append({
            "link": l, "src": i, "dst": j,
            "src_x": topology.positions[i, 0], "src_y": topology.positions[i, 1],
            "dst_x": topology.positions[j, 0], "dst_y": topology.positions[j, 1],
            "length_m": lengths[l], "src_group": int(topology.group_of[i]), "gain": channel.q[l],
        })
    return rows


TOPOLOGY_FIELDS = ("link", "src", "dst", "src_x", "src_y", "dst_x", "dst_y", "length_m", "src_group", "gain")
SOLUTION_FIELDS = ("link", "src", "dst", "flow_mbps", "power_w", "bandwidth_mhz", "capacity_mbps")
SWEEP_FIELDS = ("variable", "value", "mode", "runs", "failures", "objective_kbps_mean", "objective_kbps_std",
                "power_w_mean", "power_w_std", "power_dbm_of_mean")


def solution_rows(sol, topology, channel) -> list:
    cap = capacity(sol.w, sol.p, channel.q, channel.noise) if topology.num_links else []
    return [
        {"link": l, "src": i, "dst": j, "flow_mbps": sol.x[l], "power_w": sol.p[l],
         "bandwidth_mhz": sol.w[l], "capacity_mbps": cap[l]}
        for l, (i, j) in enumerate(topology.links)
    ]


def _write_atomic(out_dir: Path, files: dict):
    """Write all files or none: stage in a temporary directory first."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=out_dir) as tmp:
        for name, text in files.items():
            Path(tmp, name).write_text(text)
        for name in files:
            os.replace(Path(tmp, name), out_dir / name)


def run_scenario(config: ScenarioConfig, mode: str, out_dir=None, max_iters=None, rho=None):
    """Solve one scenario; write topology, solution and trace CSVs when ``out_dir`` is set."""
    t0 = time.perf_counter()
    sol, topology, channel, trace, extras = solve_mode(config, mode, max_iters=max_iters, rho=rho)
    record = make_record(config, mode, sol, topology, channel, time.perf_counter() - t0)
    if out_dir is not None:
        if mode in ("layered", "device"):
            trace_fields = layered.TRACE_COLUMNS if mode == "layered" else device.TRACE_COLUMNS
        else:
            trace_fields = ("iteration", "phase", "model_objective", "feasible_objective", "power_total")
        files = {
            "topology.csv": _csv_text(TOPOLOGY_FIELDS, topology_rows(topology, channel)),
            "solution.csv": _csv_text(SOLUTION_FIELDS, solution_rows(sol, topology, channel)),
            "trace.csv": _csv_text(trace_fields, trace),
            "summary.csv": _csv_text(RunRecord.CSV_FIELDS, [record.row()]),
        }
        if "messages" in extras:
            with tempfile.TemporaryDirectory() as tmp:
                path = Path(tmp, "m.jsonl")
                extras["messages"].to_jsonl(path)
                files["messages.jsonl"] = path.read_text()
        _write_atomic(Path(out_dir), files)
    return record, sol


@dataclass
class SweepSpec:
    """One swept variable, the modes to compare and the replication count.

    A mode entry is a mode name or a dict with ``mode``, an optional
    ``label`` and scenario overrides such as ``reuse_factor``.
    """

    variable: str
    values: list
    modes: list = field(default_factory=lambda: ["reference"])
    replications: int = 30
    seed_base: int = 0

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ValueError(f"unknown sweep variable {self.variable!r}; expected one of {SWEEP_VARIABLES}")
        if not self.values:
            raise ValueError("sweep values must be non-empty")
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        self.modes = [m if isinstance(m, dict) else {"mode": m} for m in self.modes]
        for m in self.modes:
            if m["mode"] not in MODES:
                raise ValueError(f"unknown mode {m['mode']!r}")

    @classmethod
    def load(cls, path) -> "SweepSpec":
        data = json.loads(Path(path).read_text())
        return cls(**data)


def _label(entry) -> str:
    if "label" in entry:
        return entry["label"]
    extra = ",".join(f"{k}={v}" for k, v in sorted(entry.items()) if k != "mode")
    return entry["mode"] + (f"[{extra}]" if extra else "")


def _apply(config: ScenarioConfig, variable, value) -> tuple:
    if variable == "P_max_dbm":
        return config.replace(P_max=dbm_to_watts(float(value))), None
    if variable == "reuse_factor":
        return config.replace(reuse_factor=math.inf if value in ("inf", None) else value), None
    if variable == "num_nodes":
        return config.replace(num_nodes=int(value)), None
    return config, float(value)


def sweep(spec: SweepSpec, base: ScenarioConfig, progress=None):
    """Run every value x mode x replication; return ``(records, summary_rows)``.

    Replication ``r`` uses seed ``seed_base + r`` and one topology is shared
    by all modes at that seed. Failed runs are counted and left out of the
    aggregates.
    """
    records = []
    summary = []
    for value in spec.values:
        cfg_v, rho = _apply(base, spec.variable, value)
        cells = {_label(m): [] for m in spec.modes}
        failures = {k: 0 for k in cells}
        for r in range(spec.replications):
            cfg_r = cfg_v.replace(rng_seed=spec.seed_base + r)
            for entry in spec.modes:
                label = _label(entry)
                overrides = {k: (math.inf if v == "inf" else v) for k, v in entry.items() if k not in ("mode", "label")}
                cfg = cfg_r.replace(**overrides) if overrides else cfg_r
                t0 = time.perf_counter()
                try:
                    sol, topo, ch, _, _ = solve_mode(cfg, entry["mode"], rho=rho)
                except (reference.SolverError, ValueError, ArithmeticError) as exc:
                    failures[label] += 1
                    if progress:
                        progress(f"{spec.variable}={value} {label} seed={cfg.rng_seed}: failed ({exc})")
                    continue
                rec = make_record(cfg, entry["mode"], sol, topo, ch, time.perf_counter() - t0, label=label)
                records.append((value, rec, sol.power_total))
                cells[label].append((sol.objective * 1e3, sol.power_total))
                if progress:
                    progress(f"{spec.variable}={value} {label} seed={cfg.rng_seed}: {rec.objective_kbps:.4f} Kbps")
        for label, vals in cells.items():
            arr = np.array(vals, dtype=float).reshape(-1, 2)
            mean = arr.mean(axis=0) if len(arr) else np.full(2, math.nan)
            std = arr.std(axis=0, ddof=1) if len(arr) > 1 else np.zeros(2)
            summary.append({
                "variable": spec.variable, "value": value, "mode": label, "runs": len(arr), "failures": failures[label],
                "objective_kbps_mean": mean[0], "objective_kbps_std": std[0],
                "power_w_mean": mean[1], "power_w_std": std[1],
                "power_dbm_of_mean": watts_to_dbm(mean[1]) if mean[1] > 0 else -math.inf,
            })
    return records, summary


def write_sweep(out_dir, records, summary):
    runs = [dict(rec.row(), value=value, power_w=power) for value, rec, power in records]
    files = {
        "sweep_summary.csv": _csv_text(SWEEP_FIELDS, summary),
        "sweep_runs.csv": _csv_text(("value",) + RunRecord.CSV_FIELDS + ("power_w",), runs),
    }
    _write_atomic(Path(out_dir), files)
