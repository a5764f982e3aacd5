"""Evaluation quantities: ICE curves, evacuation times, Monte Carlo reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from crowdode.dynamics import CrowdState, IntegratorConfig, Trajectory, rollout
from crowdode.errors import CrowdError
from crowdode.scene import Scene, sample_initial_state

log = logging.getLogger(__name__)

Simulator = Callable[[CrowdState, float], Trajectory]


def ice_rate(traj: Trajectory, t: float) -> float:
    """Fraction of agents whose exit time is at most ``t``."""
    et = traj.exit_times
    return float(np.sum(et <= t)) / traj.n_agents


def ice_curve(traj: Trajectory, grid) -> np.ndarray:
    et = np.where(np.isnan(traj.exit_times), np.inf, traj.exit_times)
    grid = np.asarray(grid, dtype=float)
    return np.sum(et[None, :] <= grid[:, None], axis=1) / traj.n_agents


def evacuation_time(traj: Trajectory):
    """Latest exit time, or ``None`` if someone never left."""
    if np.any(np.isnan(traj.exit_times)):
        return None
    return float(np.max(traj.exit_times)) if traj.n_agents else 0.0


def default_ice_grid(t_max: float, resolution: float = 0.5) -> np.ndarray:
    return np.round(np.arange(0.0, t_max + 0.5 * resolution, resolution), 10)


def distance_to_exit(traj: Trajectory, scene: Scene) -> np.ndarray:
    """Per-record, per-agent distance from the exit centre, shape (T, N)."""
    return np.linalg.norm(traj.positions - np.asarray(scene.exit_center), axis=-1)


def displacement_errors(pred: Trajectory, ref: Trajectory):
    """Per-agent ADE and final-displacement error over the common record span.

    Both trajectories must share the record interval and agent count.
    """
    if pred.n_agents != ref.n_agents:
        raise ValueError("trajectories differ in agent count")
    if abs(pred.record_interval - ref.record_interval) > 1e-9:
        raise ValueError("trajectories differ in record interval")
    n = min(pred.n_records, ref.n_records)
    err = np.linalg.norm(pred.positions[:n] - ref.positions[:n], axis=-1)
    return err.mean(axis=0), err[-1]


def wasserstein1(a, b) -> float:
    """W1 between two empirical samples via their quantile functions."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        return math.nan
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # piecewise-constant quantile functions on the merged probability grid
    qs = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], qs]))
    mid = qs - 0.5 * widths
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def shared_histogram(a, b, bins: int = 20):
    """Histogram both samples on equal-width edges spanning the pooled range."""
    pooled = np.concatenate([np.asarray(a, dtype=float), np.asarray(b, dtype=float)])
    if pooled.size == 0:
        return np.zeros(bins + 1), np.zeros(bins, int), np.zeros(bins, int)
    lo, hi = float(pooled.min()), float(pooled.max())
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    return edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0]


def count_modes(counts, dip_ratio: float = 0.5, min_peak: int = 2) -> int:
    """Number of histogram peaks separated by a dip.

    A new mode starts when a bin with at least ``min_peak`` counts follows a
    valley no higher than ``dip_ratio`` times the smaller of the two peaks.
    """
    modes, peak, valley = 0, 0, math.inf
    for c in counts:
        c = int(c)
        if modes == 0:
            if c >= min_peak:
                modes, peak, valley = 1, c, c
            continue
        if c >= min_peak and valley <= dip_ratio * min(peak, c):
            modes += 1
            peak = valley = c
        elif c > peak:
            peak = valley = c
        else:
            valley = min(valley, c)
    return modes


@dataclass
class EvalReport:
    model: str
    ice_grid: np.ndarray
    ice_curve: np.ndarray
    ice_runs: np.ndarray
    t_ev_samples: list
    n_runs: int
    n_agents: int
    seed: int
    not_evacuated: int = 0
    failed_runs: list = field(default_factory=list)
    trajectory_errors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    trajectories: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "n_runs": self.n_runs,
            "n_agents": self.n_agents,
            "seed": self.seed,
            "not_evacuated": self.not_evacuated,
            "failed_runs": list(self.failed_runs),
            "ice_grid": [float(t) for t in self.ice_grid],
            "ice_curve": [float(c) for c in self.ice_curve],
            "t_ev_samples": [float(t) for t in self.t_ev_samples],
            "trajectory_errors": self.trajectory_errors,
            "meta": self.meta,
        }


def monte_carlo_eval(model: Simulator, scene: Scene, n_agents: int, n_runs: int, seed: int,
                     t_max: float, ice_grid=None, spawn_mode: str = "uniform",
                     min_separation: float = 0.7, name: str = "model",
                     keep_trajectories: bool = False) -> EvalReport:
    """Run ``n_runs`` rollouts from initial states seeded ``seed + run``."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    grid = default_ice_grid(t_max) if ice_grid is None else np.asarray(ice_grid, dtype=float)
    curves, t_ev, failed, trajs = [], [], [], []
    not_evac = 0
    for run in range(n_runs):
        z0 = sample_initial_state(scene, n_agents, spawn_mode, min_separation, seed + run)
        try:
            traj = model(z0, t_max)
        except CrowdError as exc:
            log.warning("%s run %d failed: %s", name, run, exc)
            failed.append({"run": run, "error": str(exc)})
            trajs.append(None)
            continue
        curves.append(ice_curve(traj, grid))
        te = evacuation_time(traj)
        if te is None:
            not_evac += 1
        else:
            t_ev.append(te)
        trajs.append(traj if keep_trajectories else None)
    if not curves:
        raise CrowdError(f"all {n_runs} runs of {name} failed")
    runs = np.array(curves)
    return EvalReport(name, grid, runs.mean(axis=0), runs, t_ev, n_runs, n_agents, seed,
                      not_evac, failed, meta={"spawn_mode": spawn_mode, "t_max": t_max},
                      trajectories=trajs if keep_trajectories else [])


def short_horizon_ade(model: Simulator, reference: Simulator, scene: Scene, n_agents: int,
                      n_runs: int, seed: int, horizon: float = 2.0,
                      spawn_mode: str = "uniform", min_separation: float = 0.7,
                      baseline: Simulator | None = None) -> dict:
    """Mean ADE of ``model`` and a constant-velocity baseline against ``reference``.

    The reference runs from a sampled state (seed ``seed + run``); model and
    baseline start from the reference's first recorded state, which carries
    the recorded velocities (forward differences for ORCA).
    """
    baseline = baseline or constant_velocity_simulator(scene)
    m_err, b_err = [], []
    for run in range(n_runs):
        z0 = sample_initial_state(scene, n_agents, spawn_mode, min_separation, seed + run)
        ref = reference(z0, horizon)
        start = ref.state(0)
        for sim, sink in ((model, m_err), (baseline, b_err)):
            sink.append(displacement_errors(_resample(sim(start, horizon), ref), ref)[0])
    model_ade = float(np.mean(np.concatenate(m_err)))
    base_ade = float(np.mean(np.concatenate(b_err)))
    return {"model_ade": model_ade, "baseline_ade": base_ade,
            "ratio": model_ade / base_ade if base_ade > 0 else math.inf,
            "n_runs": n_runs, "n_agents": n_agents, "horizon": horizon, "seed": seed}


def _resample(traj: Trajectory, like: Trajectory) -> Trajectory:
    """Thin ``traj`` to the record interval of ``like``."""
    ratio = like.record_interval / traj.record_interval
    k = int(round(ratio))
    if k < 1 or abs(ratio - k) > 1e-6:
        raise ValueError("record intervals are not commensurate")
    if k == 1:
        return traj
    idx = np.arange(0, traj.n_records, k)
    return Trajectory(traj.step_indices[idx], traj.times[idx], traj.positions[idx],
                      traj.velocities[idx], traj.exited[idx], traj.exit_times, traj.dt,
                      traj.record_every * k, dict(traj.meta))


def compare_models(a: EvalReport, b: EvalReport, bins: int = 20) -> dict:
    if a.ice_grid.shape != b.ice_grid.shape or not np.allclose(a.ice_grid, b.ice_grid):
        raise ValueError("reports use different ICE grids")
    if a.n_agents != b.n_agents:
        raise ValueError("reports use different crowd sizes")
    diff = np.abs(a.ice_curve - b.ice_curve)
    edges, ca, cb = shared_histogram(a.t_ev_samples, b.t_ev_samples, bins)
    out = {
        "models": [a.model, b.model],
        "ice_max_abs_diff": float(diff.max()),
        "ice_mean_abs_diff": float(diff.mean()),
        "t_ev_wasserstein1": wasserstein1(a.t_ev_samples, b.t_ev_samples),
        "t_ev_mean": [_mean(a.t_ev_samples), _mean(b.t_ev_samples)],
        "histogram": {"edges": edges.tolist(), "counts": [ca.tolist(), cb.tolist()],
                      "modes": [count_modes(ca), count_modes(cb)]},
    }
    if a.trajectories and b.trajectories and len(a.trajectories) == len(b.trajectories):
        ade, fde = [], []
        for ta, tb in zip(a.trajectories, b.trajectories):
            if ta is None or tb is None or not np.allclose(ta.positions[0], tb.positions[0]):
                continue
            e_avg, e_fin = displacement_errors(ta, tb)
            ade.append(e_avg)
            fde.append(e_fin)
        if ade:
            out["paired_ade"] = float(np.mean(np.concatenate(ade)))
            out["paired_fde"] = float(np.mean(np.concatenate(fde)))
    return out


def _mean(x):
    return float(np.mean(x)) if len(x) else math.nan


# --- simulators --------------------------------------------------------------

def sfm_simulator(scene: Scene, params, cfg: IntegratorConfig | None = None,
                  record_every: int = 10) -> Simulator:
    from crowdode.sfm import simulate_sfm
    return lambda z0, t_max: simulate_sfm(z0, scene, params, t_max, cfg, record_every)


def orca_simulator(scene: Scene, params, record_every: int = 1) -> Simulator:
    from crowdode.orca import simulate_orca
    return lambda z0, t_max: simulate_orca(z0, scene, params, t_max, record_every)


def learned_simulator(ff, scene: Scene, cfg: IntegratorConfig | None = None,
                      record_every: int = 1) -> Simulator:
    from crowdode.forcefield import learned_derivative
    cfg = cfg or IntegratorConfig("rk4", 0.01)
    rhs = learned_derivative(ff, scene)
    return lambda z0, t_max: rollout(z0, rhs, scene, t_max, cfg, record_every,
                                     {"model": "learned"})


def constant_velocity_simulator(scene: Scene, dt: float = 0.01) -> Simulator:
    def rhs(state):
        return np.where(state.active[:, None], state.velocities, 0.0), \
            np.zeros_like(state.velocities)

    return lambda z0, t_max: rollout(z0, rhs, scene, t_max, IntegratorConfig("euler", dt), 1,
                                     {"model": "constant-velocity"})


# --- serialisation -----------------------------------------------------------

def write_report(path, reports: list[EvalReport], comparison: dict | None = None,
                 meta: dict | None = None) -> None:
    doc = {"reports": [r.to_dict() for r in reports]}
    if comparison is not None:
        doc["comparison"] = comparison
    if meta:
        doc["meta"] = meta
    Path(path).write_text(json.dumps(_json_safe(doc), indent=2, sort_keys=True) + "\n")


def _json_safe(obj):
    """NaN and infinities become null so the report is strict JSON."""
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_ice_csv(path, reports: list[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s"] + [f"ice_{r.model}" for r in reports])
        for i, t in enumerate(reports[0].ice_grid):
            w.writerow([repr(float(t))] + [repr(float(r.ice_curve[i])) for r in reports])


def write_histogram_csv(path, comparison: dict) -> None:
    hist = comparison["histogram"]
    names = comparison["models"]
    edges = hist["edges"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo_s", "bin_hi_s"] + [f"count_{m}" for m in names])
        for i in range(len(edges) - 1):
            w.writerow([repr(edges[i]), repr(edges[i + 1])] + [c[i] for c in hist["counts"]])


def write_distance_csv(path, traj: Trajectory, scene: Scene) -> None:
    d = distance_to_exit(traj, scene)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s"] + [f"agent_{a}" for a in range(traj.n_agents)])
        for k in range(traj.n_records):
            w.writerow([repr(float(traj.times[k]))] + [repr(float(x)) for x in d[k]])
