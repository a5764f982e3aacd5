"""Ground-truth social force model (Helbing, Farkas & Vicsek form)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

import numba

from crowdode.dynamics import CrowdState, IntegratorConfig, Trajectory, rollout_with
from crowdode.errors import DegenerateGeometryError
from crowdode.scene import Scene, nearest_wall_points, sample_initial_state


@dataclass(frozen=True)
class SfmParams:
    mass: float = 80.0
    desired_speed: float = 1.0
    accel_time: float = 0.5
    radius: float = 0.3
    strength: float = 2000.0
    range: float = 0.08
    body_k: float = 1.2e5
    friction_kappa: float = 2.4e5
    step: float = 0.001

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"SfmParams.{name} must be positive, got {value}")


def desired_directions(positions: np.ndarray, scene: Scene) -> np.ndarray:
    """Unit vectors toward the exit centre; the outward exit normal at the centre itself."""
    d = np.asarray(scene.exit_center) - positions
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    fallback = np.broadcast_to(np.asarray(scene.exit_normal, dtype=float), d.shape)
    safe = np.where(norm > 1e-12, norm, 1.0)
    return np.where(norm > 1e-12, d / safe, fallback)


def _contact(u):
    return np.where(u > 0.0, u, 0.0)


def _perp(n):
    return np.stack([-n[..., 1], n[..., 0]], axis=-1)


def pedestrian_forces(state: CrowdState, p: SfmParams) -> np.ndarray:
    """Pairwise forces ``F[n, j]`` exerted on agent n by agent j, shape (N, N, 2)."""
    x, v = state.positions, state.velocities
    N = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    pair = state.active[:, None] & state.active[None, :] & ~np.eye(N, dtype=bool)
    if np.any(pair & (dist <= 0.0)):
        raise DegenerateGeometryError("two agents occupy the same position")
    safe = np.where(pair, dist, 1.0)
    normal = diff / safe[..., None]
    tang = _perp(normal)
    overlap = 2.0 * p.radius - safe
    g = _contact(overlap)
    dv = v[None, :, :] - v[:, None, :]  # v_j - v_n
    radial = p.strength * np.exp(overlap / p.range) + p.body_k * g
    slide = p.friction_kappa * g * np.sum(dv * tang, axis=-1)
    F = radial[..., None] * normal + slide[..., None] * tang
    return np.where(pair[..., None], F, 0.0)


def wall_forces(state: CrowdState, scene: Scene, p: SfmParams) -> np.ndarray:
    """Forces ``F[n, w]`` from each wall on each agent, shape (N, W, 2)."""
    x, v = state.positions, state.velocities
    pts, _ = nearest_wall_points(scene, x)
    diff = x[:, None, :] - pts
    dist = np.linalg.norm(diff, axis=-1)
    act = state.active[:, None]
    if np.any(act & (dist <= 0.0)):
        raise DegenerateGeometryError("agent centre lies on a wall")
    safe = np.where(dist > 0.0, dist, 1.0)
    normal = diff / safe[..., None]
    tang = _perp(normal)
    overlap = p.radius - safe
    g = _contact(overlap)
    radial = p.strength * np.exp(overlap / p.range) + p.body_k * g
    slide = -p.friction_kappa * g * np.sum(v[:, None, :] * tang, axis=-1)
    F = radial[..., None] * normal + slide[..., None] * tang
    return np.where(act[..., None], F, 0.0)


def sfm_forces(state: CrowdState, scene: Scene, p: SfmParams) -> np.ndarray:
    e = desired_directions(state.positions, scene)
    drive = p.mass * (p.desired_speed * e - state.velocities) / p.accel_time
    total = drive + pedestrian_forces(state, p).sum(axis=1) + \
        wall_forces(state, scene, p).sum(axis=1)
    return np.where(state.active[:, None], total, 0.0)


def sfm_derivative(state: CrowdState, scene: Scene, p: SfmParams):
    act = state.active[:, None]
    dx = np.where(act, state.velocities, 0.0)
    dv = sfm_forces(state, scene, p) / p.mass
    return dx, dv


def sfm_rhs(scene: Scene, p: SfmParams):
    """Bind scene and parameters into a derivative function."""
    return lambda state: sfm_derivative(state, scene, p)


# --- compiled path used for data generation --------------------------------
# Same force law as the numpy functions above, one agent pair at a time.

@numba.njit(cache=True)
def _accel_kernel(x, v, active, wa, wb, center, fallback, prm, out):
    m, vp, tau, r, A, B, k, kappa = prm[0], prm[1], prm[2], prm[3], prm[4], prm[5], prm[6], prm[7]
    N = x.shape[0]
    W = wa.shape[0]
    for n in range(N):
        out[n, 0] = 0.0
        out[n, 1] = 0.0
        if not active[n]:
            continue
        ex = center[0] - x[n, 0]
        ey = center[1] - x[n, 1]
        en = np.sqrt(ex * ex + ey * ey)
        if en > 1e-12:
            ex /= en
            ey /= en
        else:
            ex = fallback[0]
            ey = fallback[1]
        fx = m * (vp * ex - v[n, 0]) / tau
        fy = m * (vp * ey - v[n, 1]) / tau
        for j in range(N):
            if j == n or not active[j]:
                continue
            dx = x[n, 0] - x[j, 0]
            dy = x[n, 1] - x[j, 1]
            d = np.sqrt(dx * dx + dy * dy)
            if d <= 0.0:
                return False
            nx = dx / d
            ny = dy / d
            tx = -ny
            ty = nx
            ov = 2.0 * r - d
            g = ov if ov > 0.0 else 0.0
            rad = A * np.exp(ov / B) + k * g
            sl = kappa * g * ((v[j, 0] - v[n, 0]) * tx + (v[j, 1] - v[n, 1]) * ty)
            fx += rad * nx + sl * tx
            fy += rad * ny + sl * ty
        for w in range(W):
            abx = wb[w, 0] - wa[w, 0]
            aby = wb[w, 1] - wa[w, 1]
            t = ((x[n, 0] - wa[w, 0]) * abx + (x[n, 1] - wa[w, 1]) * aby) / (abx * abx + aby * aby)
            if t < 0.0:
                t = 0.0
            elif t > 1.0:
                t = 1.0
            dx = x[n, 0] - (wa[w, 0] + t * abx)
            dy = x[n, 1] - (wa[w, 1] + t * aby)
            d = np.sqrt(dx * dx + dy * dy)
            if d <= 0.0:
                return False
            nx = dx / d
            ny = dy / d
            tx = -ny
            ty = nx
            ov = r - d
            g = ov if ov > 0.0 else 0.0
            rad = A * np.exp(ov / B) + k * g
            sl = -kappa * g * (v[n, 0] * tx + v[n, 1] * ty)
            fx += rad * nx + sl * tx
            fy += rad * ny + sl * ty
        out[n, 0] = fx / m
        out[n, 1] = fy / m
    return True


@numba.njit(cache=True)
def _step_kernel(x, v, active, h, rk4, wa, wb, center, fallback, prm):
    N = x.shape[0]
    act = np.empty((N, 1))
    for n in range(N):
        act[n, 0] = 1.0 if active[n] else 0.0
    a1 = np.empty_like(x)
    ok = _accel_kernel(x, v, active, wa, wb, center, fallback, prm, a1)
    if not rk4:
        return ok, x + h * v * act, v + h * a1
    x2 = x + 0.5 * h * v * act
    v2 = v + 0.5 * h * a1
    a2 = np.empty_like(x)
    ok &= _accel_kernel(x2, v2, active, wa, wb, center, fallback, prm, a2)
    x3 = x + 0.5 * h * v2 * act
    v3 = v + 0.5 * h * a2
    a3 = np.empty_like(x)
    ok &= _accel_kernel(x3, v3, active, wa, wb, center, fallback, prm, a3)
    x4 = x + h * v3 * act
    v4 = v + h * a3
    a4 = np.empty_like(x)
    ok &= _accel_kernel(x4, v4, active, wa, wb, center, fallback, prm, a4)
    xn = x + h / 6.0 * (v + 2.0 * v2 + 2.0 * v3 + v4) * act
    vn = v + h / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
    return ok, xn, vn


def _packed(scene: Scene, p: SfmParams):
    wa, wb = scene.wall_arrays
    prm = np.array([p.mass, p.desired_speed, p.accel_time, p.radius, p.strength,
                    p.range, p.body_k, p.friction_kappa])
    return (np.ascontiguousarray(wa), np.ascontiguousarray(wb),
            np.asarray(scene.exit_center, dtype=float),
            np.asarray(scene.exit_normal, dtype=float), prm)


def sfm_stepper(scene: Scene, p: SfmParams, cfg: IntegratorConfig):
    """One-step map ``CrowdState -> CrowdState`` using the compiled kernel."""
    packed = _packed(scene, p)
    h = cfg.step_size
    rk4 = cfg.method == "rk4"

    def step(z: CrowdState) -> CrowdState:
        ok, xn, vn = _step_kernel(z.positions, z.velocities, z.active, h, rk4, *packed)
        if not ok:
            raise DegenerateGeometryError(f"coincident geometry at t={z.time:.6g}")
        return CrowdState(xn, vn, z.time + h, z.exited)

    return step


def sfm_accel_compiled(state: CrowdState, scene: Scene, p: SfmParams) -> np.ndarray:
    out = np.empty_like(state.positions)
    if not _accel_kernel(state.positions, state.velocities, state.active, *_packed(scene, p), out):
        raise DegenerateGeometryError("coincident geometry")
    return out


def simulate_sfm(z0: CrowdState, scene: Scene, p: SfmParams, t_max: float,
                 cfg: IntegratorConfig | None = None, record_every: int = 10,
                 meta: dict | None = None) -> Trajectory:
    cfg = cfg or IntegratorConfig("rk4", p.step)
    info = {"model": "sfm", "params": asdict(p), "integrator": asdict(cfg)}
    if meta:
        info.update(meta)
    return rollout_with(sfm_stepper(scene, p, cfg), z0, scene, t_max, cfg.step_size,
                        record_every, info)


def generate_sfm_dataset(scene: Scene, p: SfmParams, n_agents: int, n_runs: int, seed: int,
                         cfg: IntegratorConfig | None = None, t_max: float = 60.0,
                         record_every: int = 10, spawn_mode: str = "uniform",
                         min_separation: float = 0.7) -> list[Trajectory]:
    if n_agents < 1 or n_runs < 1:
        raise ValueError("n_agents and n_runs must be >= 1")
    out = []
    for run in range(n_runs):
        run_seed = seed + run
        z0 = sample_initial_state(scene, n_agents, spawn_mode, min_separation, run_seed)
        out.append(simulate_sfm(z0, scene, p, t_max, cfg, record_every,
                                {"seed": run_seed, "scene": scene.to_dict()}))
    return out
