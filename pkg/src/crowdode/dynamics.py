"""Crowd state, fixed-step ODE integration and exit-aware rollouts."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from crowdode.errors import NumericalBlowupError, ShapeError
from crowdode.scene import Scene, outside_mask

BLOWUP_LIMIT = 1e6
TRAJECTORY_COLUMNS = ["step_index", "time_s", "agent_id", "pos_x_m", "pos_y_m",
                      "vel_x_mps", "vel_y_mps", "exited_flag"]


@dataclass
class CrowdState:
    """Positions and velocities of N agents at one instant.

    ``exited`` marks frozen agents; they neither move nor interact.
    """

    positions: np.ndarray
    velocities: np.ndarray
    time: float = 0.0
    exited: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        self.velocities = np.asarray(self.velocities, dtype=float)
        if self.positions.ndim == 1 and self.positions.size == 0:
            self.positions = self.positions.reshape(0, 2)
            self.velocities = self.velocities.reshape(0, 2)
        if self.positions.shape != self.velocities.shape or self.positions.shape[-1:] != (2,):
            raise ShapeError(f"positions {self.positions.shape} and velocities "
                             f"{self.velocities.shape} must both be (N, 2)")
        if self.exited is None:
            self.exited = np.zeros(self.positions.shape[0], dtype=bool)
        else:
            self.exited = np.asarray(self.exited, dtype=bool).copy()

    @property
    def n_agents(self) -> int:
        return self.positions.shape[0]

    @property
    def active(self) -> np.ndarray:
        return ~self.exited

    def copy(self) -> "CrowdState":
        return CrowdState(self.positions.copy(), self.velocities.copy(), self.time,
                          self.exited.copy())

    def permuted(self, perm) -> "CrowdState":
        perm = np.asarray(perm)
        return CrowdState(self.positions[perm], self.velocities[perm], self.time,
                          self.exited[perm])


DerivativeFn = Callable[[CrowdState], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "rk4"
    step_size: float = 0.01

    def __post_init__(self):
        if self.method not in ("euler", "rk4"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")


def _check_finite(dx, dv, t):
    if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dv))):
        raise NumericalBlowupError(f"non-finite derivative at t={t:.6g}", time=t)


def _shifted(z: CrowdState, dx, dv, h) -> CrowdState:
    return CrowdState(z.positions + h * dx, z.velocities + h * dv, z.time + h, z.exited)


def integrator_step(z: CrowdState, f: DerivativeFn, h: float, method: str = "rk4") -> CrowdState:
    """Advance one explicit step of size ``h``."""
    t = z.time
    k1x, k1v = f(z)
    _check_finite(k1x, k1v, t)
    if method == "euler":
        return _shifted(z, k1x, k1v, h)
    k2x, k2v = f(CrowdState(z.positions + 0.5 * h * k1x, z.velocities + 0.5 * h * k1v,
                            t + 0.5 * h, z.exited))
    _check_finite(k2x, k2v, t + 0.5 * h)
    k3x, k3v = f(CrowdState(z.positions + 0.5 * h * k2x, z.velocities + 0.5 * h * k2v,
                            t + 0.5 * h, z.exited))
    _check_finite(k3x, k3v, t + 0.5 * h)
    k4x, k4v = f(CrowdState(z.positions + h * k3x, z.velocities + h * k3v, t + h, z.exited))
    _check_finite(k4x, k4v, t + h)
    dx = (k1x + 2.0 * k2x + 2.0 * k3x + k4x) / 6.0
    dv = (k1v + 2.0 * k2v + 2.0 * k3v + k4v) / 6.0
    return _shifted(z, dx, dv, h)


def step_schedule(t0: float, t1: float, h: float) -> list[float]:
    """Step sizes covering ``[t0, t1]``; a trailing partial step if needed."""
    span = t1 - t0
    if span < 0:
        raise ValueError("t1 must be >= t0")
    if span == 0:
        return []
    ratio = span / h
    n = round(ratio)
    if abs(ratio - n) * h <= 1e-9 and n >= 1:
        return [span / n] * n
    n_full = int(math.floor(ratio))
    steps = [h] * n_full
    steps.append(span - n_full * h)
    return steps


def ode_solve(z0: CrowdState, f: DerivativeFn, t0: float, t1: float,
              cfg: IntegratorConfig) -> CrowdState:
    z = CrowdState(z0.positions.copy(), z0.velocities.copy(), t0, z0.exited)
    for h in step_schedule(t0, t1, cfg.step_size):
        z = integrator_step(z, f, h, cfg.method)
        if np.max(np.abs(z.positions), initial=0.0) > BLOWUP_LIMIT or \
                np.max(np.abs(z.velocities), initial=0.0) > BLOWUP_LIMIT:
            raise NumericalBlowupError(f"state exceeded {BLOWUP_LIMIT:g} at t={z.time:.6g}",
                                       time=z.time)
    z.time = t1
    return z


@dataclass
class Trajectory:
    """Recorded rollout. Arrays are indexed ``[record, agent, ...]``.

    ``exit_times`` holds NaN for agents still inside at the end.
    """

    step_indices: np.ndarray
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    exited: np.ndarray
    exit_times: np.ndarray
    dt: float
    record_every: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    @property
    def n_records(self) -> int:
        return self.positions.shape[0]

    @property
    def record_interval(self) -> float:
        return self.dt * self.record_every

    @property
    def horizon(self) -> float:
        return float(self.meta.get("t_max", self.times[-1]))

    def state(self, k: int) -> CrowdState:
        return CrowdState(self.positions[k], self.velocities[k], float(self.times[k]),
                          self.exited[k])


def _crossing_fraction(p0: np.ndarray, p1: np.ndarray, H: float) -> float:
    """Fraction of the step p0 -> p1 at which the point leaves [0, H]^2."""
    frac = 1.0
    d = p1 - p0
    for c in range(2):
        if p1[c] > H and d[c] > 0:
            frac = min(frac, (H - p0[c]) / d[c])
        elif p1[c] < 0 and d[c] < 0:
            frac = min(frac, (0.0 - p0[c]) / d[c])
    return float(np.clip(frac, 0.0, 1.0))


def rollout_with(step: Callable[[CrowdState], CrowdState], z0: CrowdState, scene: Scene,
                 t_max: float, dt: float, record_every: int = 1,
                 meta: dict | None = None) -> Trajectory:
    """Drive ``step`` until ``t_max`` or until everyone has left the room.

    Agents found outside the square are frozen at their post-step state; the
    exit time is interpolated linearly inside the crossing step. States are
    recorded every ``record_every`` steps, plus the terminal state.
    """
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    H = scene.side_length
    z = z0.copy()
    n = z.n_agents
    exit_times = np.full(n, np.nan)
    out0 = outside_mask(scene, z.positions) if n else np.zeros(0, dtype=bool)
    newly = out0 & ~z.exited
    exit_times[newly] = z.time
    exit_times[z.exited & ~newly] = z.time
    z.exited = z.exited | out0

    steps, times, pos, vel, flags = [0], [z.time], [z.positions.copy()], \
        [z.velocities.copy()], [z.exited.copy()]
    n_steps = int(math.ceil(t_max / dt - 1e-9))
    k = 0
    while k < n_steps and not np.all(z.exited):
        prev = z
        z = step(prev)
        k += 1
        # frozen agents are restored bit-for-bit
        z.positions[prev.exited] = prev.positions[prev.exited]
        z.velocities[prev.exited] = prev.velocities[prev.exited]
        z.exited = prev.exited.copy()
        if not (np.all(np.isfinite(z.positions)) and np.all(np.isfinite(z.velocities))) or \
                np.max(np.abs(z.positions)) > BLOWUP_LIMIT or \
                np.max(np.abs(z.velocities)) > BLOWUP_LIMIT:
            raise NumericalBlowupError(f"rollout blew up at t={z.time:.6g}", time=z.time)
        out = outside_mask(scene, z.positions) & ~z.exited
        for i in np.flatnonzero(out):
            s = _crossing_fraction(prev.positions[i], z.positions[i], H)
            exit_times[i] = prev.time + s * (z.time - prev.time)
        z.exited = z.exited | out
        if k % record_every == 0:
            steps.append(k)
            times.append(z.time)
            pos.append(z.positions.copy())
            vel.append(z.velocities.copy())
            flags.append(z.exited.copy())
    if steps[-1] != k:
        # the terminal state is always kept, even off the record grid
        steps.append(k)
        times.append(z.time)
        pos.append(z.positions.copy())
        vel.append(z.velocities.copy())
        flags.append(z.exited.copy())
    info = {"t_max": float(t_max)}
    if meta:
        info.update(meta)
    return Trajectory(np.array(steps), np.array(times), np.array(pos).reshape(-1, n, 2),
                      np.array(vel).reshape(-1, n, 2), np.array(flags).reshape(-1, n),
                      exit_times, float(dt), int(record_every), info)


def rollout(z0: CrowdState, f: DerivativeFn, scene: Scene, t_max: float,
            cfg: IntegratorConfig, record_every: int = 1, meta: dict | None = None) -> Trajectory:
    h = cfg.step_size

    def step(z):
        return integrator_step(z, f, h, cfg.method)

    return rollout_with(step, z0, scene, t_max, h, record_every, meta)


# --- trajectory files ------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_trajectory(traj: Trajectory, path, meta: dict | None = None) -> None:
    """Write the CSV table plus a JSON sidecar with metadata and exit times."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for r in range(traj.n_records):
            for a in range(traj.n_agents):
                w.writerow([int(traj.step_indices[r]), _fmt(traj.times[r]), a,
                            _fmt(traj.positions[r, a, 0]), _fmt(traj.positions[r, a, 1]),
                            _fmt(traj.velocities[r, a, 0]), _fmt(traj.velocities[r, a, 1]),
                            int(traj.exited[r, a])])
    side = dict(traj.meta)
    if meta:
        side.update(meta)
    side.update({
        "dt": traj.dt,
        "record_every": traj.record_every,
        "n_agents": traj.n_agents,
        "exit_times": [None if math.isnan(t) else float(t) for t in traj.exit_times],
    })
    with open(meta_path(path), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    with open(meta_path(path)) as fh:
        meta = json.load(fh)
    n = int(meta["n_agents"])
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRAJECTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRAJECTORY_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(TRAJECTORY_COLUMNS)} columns")
            rows.append(row)
    if len(rows) % max(n, 1):
        raise ValueError(f"{path}: row count {len(rows)} is not a multiple of {n} agents")
    T = len(rows) // max(n, 1)
    data = np.array([[float(v) for v in row] for row in rows]).reshape(T, n, 8)
    exit_times = np.array([np.nan if t is None else t for t in meta.pop("exit_times")],
                          dtype=float)
    dt = float(meta.pop("dt"))
    record_every = int(meta.pop("record_every"))
    meta.pop("n_agents")
    return Trajectory(data[:, 0, 0].astype(int), data[:, 0, 1], data[:, :, 3:5].copy(),
                      data[:, :, 5:7].copy(), data[:, :, 7].astype(bool), exit_times,
                      dt, record_every, meta)
