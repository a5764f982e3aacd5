"""Discrete-time ORCA crowd simulator.

Velocity selection follows the reciprocal velocity obstacle construction:
each neighbour contributes one half-plane in velocity space and the new
velocity is the point of the half-plane intersection (clipped to the speed
disk) closest to the preferred velocity. The LP routines are the usual
incremental 2D solver with a 3D-lifted fallback for infeasible sets.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from crowdode.dynamics import CrowdState, Trajectory, rollout_with
from crowdode.errors import DegenerateGeometryError
from crowdode.scene import Scene, nearest_wall_points, sample_initial_state
from crowdode.sfm import desired_directions

EPS = 1e-12


@dataclass(frozen=True)
class OrcaParams:
    radius: float = 0.3
    preferred_speed: float = 1.0
    time_horizon: float = 0.05
    step: float = 0.01
    max_neighbors: int = 10
    neighbor_dist: float = 2.5
    wall_time_horizon: float | None = None

    def __post_init__(self):
        for name in ("radius", "preferred_speed", "time_horizon", "step", "neighbor_dist"):
            if not getattr(self, name) > 0:
                raise ValueError(f"OrcaParams.{name} must be positive")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        if self.wall_time_horizon is not None and not self.wall_time_horizon > 0:
            raise ValueError("wall_time_horizon must be positive")

    @property
    def wall_horizon(self) -> float:
        return self.time_horizon if self.wall_time_horizon is None else self.wall_time_horizon


@dataclass(frozen=True)
class HalfPlane:
    """Velocities ``v`` with ``normal . (v - point) >= 0`` are permitted."""

    point: tuple[float, float]
    normal: tuple[float, float]

    @property
    def direction(self) -> tuple[float, float]:
        # boundary direction with the permitted side on its left
        return (self.normal[1], -self.normal[0])

    def violation(self, v) -> float:
        """Signed distance by which ``v`` lies outside (positive = violated)."""
        return -(self.normal[0] * (v[0] - self.point[0]) + self.normal[1] * (v[1] - self.point[1]))

    @classmethod
    def from_direction(cls, point, direction):
        return cls((float(point[0]), float(point[1])), (-float(direction[1]), float(direction[0])))


def _det(ax, ay, bx, by):
    return ax * by - ay * bx


def _vo_halfplane(rel_pos, rel_vel, vel, combined_radius, inv_horizon, inv_step, share):
    """ORCA line for one obstacle; ``share`` is the responsibility (1/2 or 1)."""
    px, py = rel_pos
    vx, vy = rel_vel
    dist_sq = px * px + py * py
    rr = combined_radius * combined_radius
    if dist_sq == 0.0:
        raise DegenerateGeometryError("coincident agent centres")
    if dist_sq > rr:
        wx = vx - inv_horizon * px
        wy = vy - inv_horizon * py
        w_sq = wx * wx + wy * wy
        dot1 = wx * px + wy * py
        if dot1 < 0.0 and dot1 * dot1 > rr * w_sq:
            # closest boundary point lies on the cut-off circle
            w_len = math.sqrt(w_sq)
            ux_, uy_ = wx / w_len, wy / w_len
            dx, dy = uy_, -ux_
            s = combined_radius * inv_horizon - w_len
            ux, uy = s * ux_, s * uy_
        else:
            leg = math.sqrt(dist_sq - rr)
            if _det(px, py, wx, wy) > 0.0:
                dx = (px * leg - py * combined_radius) / dist_sq
                dy = (px * combined_radius + py * leg) / dist_sq
            else:
                dx = -(px * leg + py * combined_radius) / dist_sq
                dy = -(-px * combined_radius + py * leg) / dist_sq
            dot2 = vx * dx + vy * dy
            ux, uy = dot2 * dx - vx, dot2 * dy - vy
    else:
        # already overlapping: resolve within one step
        wx = vx - inv_step * px
        wy = vy - inv_step * py
        w_len = math.hypot(wx, wy)
        if w_len == 0.0:
            raise DegenerateGeometryError("degenerate overlap geometry")
        ux_, uy_ = wx / w_len, wy / w_len
        dx, dy = uy_, -ux_
        s = combined_radius * inv_step - w_len
        ux, uy = s * ux_, s * uy_
    return HalfPlane.from_direction((vel[0] + share * ux, vel[1] + share * uy), (dx, dy))


def select_neighbors(agent_index: int, state: CrowdState, p: OrcaParams) -> list[int]:
    x = state.positions
    d = np.linalg.norm(x - x[agent_index], axis=1)
    cand = [j for j in range(state.n_agents)
            if j != agent_index and state.active[j] and d[j] < p.neighbor_dist]
    cand.sort(key=lambda j: (d[j], j))
    return cand[:p.max_neighbors]


def orca_halfplanes(agent_index: int, state: CrowdState, scene: Scene,
                    p: OrcaParams) -> list[HalfPlane]:
    """Agent half-planes (nearest first) followed by wall half-planes."""
    x = state.positions
    v = state.velocities
    xi = x[agent_index]
    vi = (float(v[agent_index, 0]), float(v[agent_index, 1]))
    inv_step = 1.0 / p.step
    lines = []
    for j in select_neighbors(agent_index, state, p):
        rel_pos = (float(x[j, 0] - xi[0]), float(x[j, 1] - xi[1]))
        rel_vel = (vi[0] - float(v[j, 0]), vi[1] - float(v[j, 1]))
        lines.append(_vo_halfplane(rel_pos, rel_vel, vi, 2.0 * p.radius,
                                   1.0 / p.time_horizon, inv_step, 0.5))
    reach = p.wall_horizon * p.preferred_speed + p.radius
    pts, _ = nearest_wall_points(scene, xi)
    for w in range(scene.n_walls):
        rel_pos = (float(pts[w, 0] - xi[0]), float(pts[w, 1] - xi[1]))
        if math.hypot(*rel_pos) >= reach:
            continue
        lines.append(_vo_halfplane(rel_pos, vi, vi, p.radius, 1.0 / p.wall_horizon,
                                   inv_step, 1.0))
    return lines


# --- incremental 2D linear programming --------------------------------------

def _lp1(lines, k, radius, opt, direction_opt):
    """Optimise on the boundary of line ``k`` subject to lines ``< k`` and the disk."""
    pk, dk = lines[k]
    dot = pk[0] * dk[0] + pk[1] * dk[1]
    disc = dot * dot + radius * radius - (pk[0] * pk[0] + pk[1] * pk[1])
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t_left, t_right = -dot - sq, -dot + sq
    for i in range(k):
        pi, di = lines[i]
        denom = _det(dk[0], dk[1], di[0], di[1])
        numer = _det(di[0], di[1], pk[0] - pi[0], pk[1] - pi[1])
        if abs(denom) <= EPS:
            if numer < 0.0:
                return None
            continue
        t = numer / denom
        if denom >= 0.0:
            t_right = min(t_right, t)
        else:
            t_left = max(t_left, t)
        if t_left > t_right:
            return None
    if direction_opt:
        t = t_right if opt[0] * dk[0] + opt[1] * dk[1] > 0.0 else t_left
    else:
        t = dk[0] * (opt[0] - pk[0]) + dk[1] * (opt[1] - pk[1])
        t = min(max(t, t_left), t_right)
    return (pk[0] + t * dk[0], pk[1] + t * dk[1])


def _lp2(lines, radius, opt, direction_opt):
    """Returns (index of first failing line or len(lines), result)."""
    if direction_opt:
        result = (opt[0] * radius, opt[1] * radius)
    else:
        n = math.hypot(opt[0], opt[1])
        result = (opt[0] / n * radius, opt[1] / n * radius) if n > radius else tuple(opt)
    for i, (pi, di) in enumerate(lines):
        if _det(di[0], di[1], pi[0] - result[0], pi[1] - result[1]) > 0.0:
            new = _lp1(lines, i, radius, opt, direction_opt)
            if new is None:
                return i, result
            result = new
    return len(lines), result


def _lp3(lines, begin, radius, result):
    """Minimise the largest violation once the constraints become infeasible."""
    distance = 0.0
    for i in range(begin, len(lines)):
        pi, di = lines[i]
        if _det(di[0], di[1], pi[0] - result[0], pi[1] - result[1]) > distance:
            proj = []
            for j in range(i):
                pj, dj = lines[j]
                det = _det(di[0], di[1], dj[0], dj[1])
                if abs(det) <= EPS:
                    if di[0] * dj[0] + di[1] * dj[1] > 0.0:
                        continue
                    point = (0.5 * (pi[0] + pj[0]), 0.5 * (pi[1] + pj[1]))
                else:
                    s = _det(dj[0], dj[1], pi[0] - pj[0], pi[1] - pj[1]) / det
                    point = (pi[0] + s * di[0], pi[1] + s * di[1])
                ddx, ddy = dj[0] - di[0], dj[1] - di[1]
                nrm = math.hypot(ddx, ddy)
                proj.append((point, (ddx / nrm, ddy / nrm)))
            fail, new = _lp2(proj, radius, (-di[1], di[0]), True)
            if fail >= len(proj):
                result = new
            distance = _det(di[0], di[1], pi[0] - result[0], pi[1] - result[1])
    return result


def solve_velocity_lp(halfplanes, v_pref, v_max: float) -> np.ndarray:
    """Velocity closest to ``v_pref`` inside all half-planes and ``|v| <= v_max``.

    Infeasible sets fall back to the velocity minimising the largest
    constraint violation.
    """
    if not v_max > 0:
        raise ValueError("v_max must be positive")
    lines = [((float(h.point[0]), float(h.point[1])), h.direction) for h in halfplanes]
    opt = (float(v_pref[0]), float(v_pref[1]))
    fail, result = _lp2(lines, v_max, opt, False)
    if fail < len(lines):
        result = _lp3(lines, fail, v_max, result)
    return np.array(result)


def preferred_velocities(state: CrowdState, scene: Scene, p: OrcaParams) -> np.ndarray:
    return p.preferred_speed * desired_directions(state.positions, scene)


def orca_step(state: CrowdState, scene: Scene, p: OrcaParams) -> CrowdState:
    """Synchronous update: all agents plan against the same snapshot."""
    v_pref = preferred_velocities(state, scene, p)
    new_v = state.velocities.copy()
    for i in np.flatnonzero(state.active):
        lines = orca_halfplanes(int(i), state, scene, p)
        new_v[i] = solve_velocity_lp(lines, v_pref[i], p.preferred_speed)
    act = state.active[:, None]
    new_x = np.where(act, state.positions + p.step * new_v, state.positions)
    return CrowdState(new_x, new_v, state.time + p.step, state.exited)


def forward_difference_velocities(traj: Trajectory) -> Trajectory:
    """Relabel recorded velocities as ``(x[k+1] - x[k]) / (t[k+1] - t[k])``.

    The last record and already-frozen agents keep their stored velocity.
    """
    vel = traj.velocities.copy()
    if traj.n_records > 1:
        gaps = np.diff(traj.times)[:, None, None]
        fwd = (traj.positions[1:] - traj.positions[:-1]) / gaps
        keep = traj.exited[:-1]
        vel[:-1] = np.where(keep[..., None], traj.velocities[:-1], fwd)
    traj.velocities = vel
    return traj


def simulate_orca(z0: CrowdState, scene: Scene, p: OrcaParams, t_max: float,
                  record_every: int = 1, meta: dict | None = None) -> Trajectory:
    info = {"model": "orca", "params": asdict(p)}
    if meta:
        info.update(meta)
    traj = rollout_with(lambda z: orca_step(z, scene, p), z0, scene, t_max, p.step,
                        record_every, info)
    return forward_difference_velocities(traj)


def generate_orca_dataset(scene: Scene, p: OrcaParams, n_agents: int, n_runs: int, seed: int,
                          t_max: float = 60.0, record_every: int = 1,
                          spawn_mode: str = "uniform",
                          min_separation: float = 0.7) -> list[Trajectory]:
    if n_agents < 1 or n_runs < 1:
        raise ValueError("n_agents and n_runs must be >= 1")
    out = []
    for run in range(n_runs):
        run_seed = seed + run
        z0 = sample_initial_state(scene, n_agents, spawn_mode, min_separation, run_seed)
        out.append(simulate_orca(z0, scene, p, t_max, record_every,
                                 {"seed": run_seed, "scene": scene.to_dict()}))
    return out
