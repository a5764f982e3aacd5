"""Learnable social force field and its vector-Jacobian products.

Each agent feels ``f_mot(x, v) + sum_K f_p(r_nj) + sum_W f_o(r_nw)``: a
motivation term from its own state, one pair term per nearest neighbour
(relative position ``x_j - x_n``) and one obstacle term per wall (relative
position of the nearest wall point). Mass is a fixed scalar shared by all
agents. The same three networks serve any crowd size.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from crowdode.dynamics import CrowdState
from crowdode.errors import ShapeError
from crowdode.mlp import MlpSpec, backward_cached, forward_cached, init_params, mlp_forward
from crowdode.scene import Scene, nearest_wall_points

CHECKPOINT_FORMAT = "crowdode-forcefield-v1"


@dataclass
class ForceFieldParams:
    mot_spec: MlpSpec
    pair_spec: MlpSpec
    wall_spec: MlpSpec
    theta_mot: np.ndarray
    theta_p: np.ndarray
    theta_o: np.ndarray
    k_neighbors: int = 4
    mass: float = 1.0
    pos_scale: float = 10.0
    vel_scale: float = 1.0
    rel_scale: float = 10.0
    use_relative_velocity: bool = False
    config_digest: str = ""

    def __post_init__(self):
        self.theta_mot = np.asarray(self.theta_mot, dtype=float)
        self.theta_p = np.asarray(self.theta_p, dtype=float)
        self.theta_o = np.asarray(self.theta_o, dtype=float)
        for name, spec, th in (("theta_mot", self.mot_spec, self.theta_mot),
                               ("theta_p", self.pair_spec, self.theta_p),
                               ("theta_o", self.wall_spec, self.theta_o)):
            if th.shape != (spec.n_params,):
                raise ShapeError(f"{name} has {th.size} entries, spec needs {spec.n_params}")
        if self.mot_spec.input_dim != 4 or self.wall_spec.input_dim != 2:
            raise ShapeError("f_mot takes 4 inputs and f_o takes 2")
        if self.pair_spec.input_dim != (4 if self.use_relative_velocity else 2):
            raise ShapeError("f_p input width does not match use_relative_velocity")
        if any(s.output_dim != 2 for s in (self.mot_spec, self.pair_spec, self.wall_spec)):
            raise ShapeError("force networks must output 2 values")
        if self.k_neighbors < 0:
            raise ValueError("k_neighbors must be >= 0")
        if not self.mass > 0:
            raise ValueError("mass must be positive")

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.theta_mot, self.theta_p, self.theta_o])

    @property
    def n_params(self) -> int:
        return self.theta_mot.size + self.theta_p.size + self.theta_o.size

    def split(self, flat):
        a = self.theta_mot.size
        b = a + self.theta_p.size
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise ShapeError(f"flat parameter vector must have {self.n_params} entries")
        return flat[:a], flat[a:b], flat[b:]

    def with_theta(self, flat) -> "ForceFieldParams":
        m, p, o = self.split(flat)
        return replace(self, theta_mot=m.copy(), theta_p=p.copy(), theta_o=o.copy())


def init_force_field(seed: int = 0, hidden=(64, 64), activation: str = "tanh",
                     k_neighbors: int = 4, mass: float = 1.0, pos_scale: float = 10.0,
                     vel_scale: float = 1.0, rel_scale: float | None = None,
                     use_relative_velocity: bool = False,
                     zero: bool = False) -> ForceFieldParams:
    rng = np.random.default_rng(seed)
    mot = MlpSpec(4, tuple(hidden), 2, activation)
    pair = MlpSpec(4 if use_relative_velocity else 2, tuple(hidden), 2, activation)
    wall = MlpSpec(2, tuple(hidden), 2, activation)
    thetas = [np.zeros(s.n_params) if zero else init_params(s, rng) for s in (mot, pair, wall)]
    return ForceFieldParams(mot, pair, wall, *thetas, k_neighbors=k_neighbors, mass=mass,
                            pos_scale=pos_scale, vel_scale=vel_scale,
                            rel_scale=pos_scale if rel_scale is None else rel_scale,
                            use_relative_velocity=use_relative_velocity)


# --- neighbourhoods ----------------------------------------------------------

def knn_indices(positions, n: int, k: int, active=None) -> np.ndarray:
    """The ``min(k, #others)`` nearest active agents to ``n``, ordered by (distance, index)."""
    x = np.asarray(positions, dtype=float)
    N = x.shape[0]
    if not 0 <= n < N:
        raise IndexError(f"agent {n} out of range for {N} agents")
    act = np.ones(N, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    d = np.linalg.norm(x - x[n], axis=1)
    others = [j for j in range(N) if j != n and act[j]]
    others.sort(key=lambda j: (d[j], j))
    return np.array(others[:max(k, 0)], dtype=int)


def _knn_batched(x, active, k):
    """(B, N, K) neighbour indices and validity mask; K = min(k, N - 1)."""
    B, N, _ = x.shape
    K = min(k, N - 1)
    if K <= 0:
        return np.zeros((B, N, 0), dtype=int), np.zeros((B, N, 0), dtype=bool)
    diff = x[:, None, :, :] - x[:, :, None, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    blocked = ~active[:, None, :] | np.eye(N, dtype=bool)[None]
    dist = np.where(blocked, np.inf, dist)
    idx = np.argsort(dist, axis=-1, kind="stable")[..., :K]
    valid = np.isfinite(np.take_along_axis(dist, idx, axis=-1)) & active[:, :, None]
    return idx, valid


@dataclass
class NeighborContext:
    r_n: np.ndarray
    r_prime_n: np.ndarray
    u_n: np.ndarray
    neighbors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def neighbor_context(n: int, state: CrowdState, scene: Scene, k: int) -> NeighborContext:
    x, v = state.positions, state.velocities
    idx = knn_indices(x, n, k, state.active)
    pts, _ = nearest_wall_points(scene, x[n])
    return NeighborContext(r_n=x[idx] - x[n], r_prime_n=pts - x[n], u_n=v[idx] - v[n],
                           neighbors=idx)


def force_on_agent(n: int, state: CrowdState, scene: Scene, ff: ForceFieldParams) -> np.ndarray:
    """Total learned force on one agent, summed term by term."""
    ctx = neighbor_context(n, state, scene, ff.k_neighbors)
    L, V, R = ff.pos_scale, ff.vel_scale, ff.rel_scale
    x_n, v_n = state.positions[n], state.velocities[n]
    total = mlp_forward(ff.mot_spec, ff.theta_mot, np.concatenate([x_n / L, v_n / V]))
    for r, u in zip(ctx.r_n, ctx.u_n):
        inp = np.concatenate([r / R, u / V]) if ff.use_relative_velocity else r / R
        total = total + mlp_forward(ff.pair_spec, ff.theta_p, inp)
    for r in ctx.r_prime_n:
        total = total + mlp_forward(ff.wall_spec, ff.theta_o, r / R)
    return total


# --- batched evaluation ------------------------------------------------------

class ForceCache:
    __slots__ = ("active", "idx", "valid", "mot", "pair", "wall", "tangent", "interior",
                 "shape")


def forces_batched(ff: ForceFieldParams, scene: Scene, x, v, active=None,
                   with_cache: bool = False):
    """Learned forces for a stack of crowds ``x, v`` of shape (B, N, 2)."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    B, N, _ = x.shape
    if active is None:
        active = np.ones((B, N), dtype=bool)
    L, V, R = ff.pos_scale, ff.vel_scale, ff.rel_scale
    act = active[..., None]

    mot_in = np.concatenate([x / L, v / V], axis=-1)
    F, mot_cache = forward_cached(ff.mot_spec, ff.theta_mot, mot_in)

    idx, valid = _knn_batched(x, active, ff.k_neighbors)
    pair_cache = None
    if idx.shape[-1]:
        bi = np.arange(B)[:, None, None]
        r = (x[bi, idx] - x[:, :, None, :]) / R
        if ff.use_relative_velocity:
            r = np.concatenate([r, (v[bi, idx] - v[:, :, None, :]) / V], axis=-1)
        fp, pair_cache = forward_cached(ff.pair_spec, ff.theta_p, r)
        F = F + np.sum(np.where(valid[..., None], fp, 0.0), axis=2)

    pts, t = nearest_wall_points(scene, x)
    fo, wall_cache = forward_cached(ff.wall_spec, ff.theta_o, (pts - x[:, :, None, :]) / R)
    F = F + np.sum(fo, axis=2)
    F = np.where(act, F, 0.0)
    if not with_cache:
        return F
    c = ForceCache()
    c.active, c.idx, c.valid = active, idx, valid
    c.mot, c.pair, c.wall = mot_cache, pair_cache, wall_cache
    a, b = scene.wall_arrays
    seg = b - a
    c.tangent = seg / np.linalg.norm(seg, axis=-1, keepdims=True)
    c.interior = (t > 0.0) & (t < 1.0)
    c.shape = (B, N)
    return F, c


def forces_vjp(ff: ForceFieldParams, cache: ForceCache, cot):
    """Pull back a force cotangent (B, N, 2) to (d x, d v, d theta)."""
    B, N = cache.shape
    L, V, R = ff.pos_scale, ff.vel_scale, ff.rel_scale
    g = np.where(cache.active[..., None], cot, 0.0)
    dx = np.zeros((B, N, 2))
    dv = np.zeros((B, N, 2))

    d_mot, g_in = backward_cached(ff.mot_spec, cache.mot, g)
    dx += g_in[..., :2] / L
    dv += g_in[..., 2:] / V

    if cache.pair is not None:
        gp = np.where(cache.valid[..., None],
                      np.broadcast_to(g[:, :, None, :], cache.valid.shape + (2,)), 0.0)
        d_pair, g_in = backward_cached(ff.pair_spec, cache.pair, gp)
        bi = np.broadcast_to(np.arange(B)[:, None, None], cache.idx.shape)
        gr = g_in[..., :2] / R
        np.add.at(dx, (bi, cache.idx), gr)
        dx -= gr.sum(axis=2)
        if ff.use_relative_velocity:
            gu = g_in[..., 2:] / V
            np.add.at(dv, (bi, cache.idx), gu)
            dv -= gu.sum(axis=2)
    else:
        d_pair = np.zeros(ff.theta_p.size)

    gw = np.broadcast_to(g[:, :, None, :], g.shape[:2] + (cache.tangent.shape[0], 2))
    d_wall, g_in = backward_cached(ff.wall_spec, cache.wall, gw)
    gr = g_in / R
    # d(p - x)/dx = t t^T - I on the segment interior, -I at a clamped endpoint
    along = np.sum(gr * cache.tangent, axis=-1, keepdims=True) * cache.tangent
    dx += np.sum(np.where(cache.interior[..., None], along, 0.0) - gr, axis=2)

    return dx, dv, np.concatenate([d_mot, d_pair, d_wall])


def learned_derivative(ff: ForceFieldParams, scene: Scene):
    """Derivative function ``dx/dt = v, dv/dt = f / m`` for frozen-aware crowds."""

    def rhs(state: CrowdState):
        act = state.active
        F = forces_batched(ff, scene, state.positions[None], state.velocities[None],
                           act[None])[0]
        dx = np.where(act[:, None], state.velocities, 0.0)
        return dx, F / ff.mass

    return rhs


# --- checkpoints -------------------------------------------------------------

def _spec_from(d):
    return MlpSpec(int(d["input_dim"]), tuple(d["hidden_dims"]), int(d["output_dim"]),
                   d["activation"])


def checkpoint_dict(ff: ForceFieldParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "specs": {"mot": ff.mot_spec.to_dict(), "pair": ff.pair_spec.to_dict(),
                  "wall": ff.wall_spec.to_dict()},
        "theta": {"mot": [float(t) for t in ff.theta_mot],
                  "pair": [float(t) for t in ff.theta_p],
                  "wall": [float(t) for t in ff.theta_o]},
        "k_neighbors": ff.k_neighbors,
        "mass": ff.mass,
        "normalization": {"pos_scale": ff.pos_scale, "vel_scale": ff.vel_scale,
                          "rel_scale": ff.rel_scale},
        "use_relative_velocity": ff.use_relative_velocity,
        "config_digest": ff.config_digest,
    }


def save_checkpoint(ff: ForceFieldParams, path) -> str:
    """Write a JSON checkpoint (floats round-trip exactly). Returns its sha256."""
    text = json.dumps(checkpoint_dict(ff), indent=1, sort_keys=True) + "\n"
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> ForceFieldParams:
    d = json.loads(Path(path).read_text())
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    specs = d["specs"]
    return ForceFieldParams(
        _spec_from(specs["mot"]), _spec_from(specs["pair"]), _spec_from(specs["wall"]),
        np.array(d["theta"]["mot"]), np.array(d["theta"]["pair"]), np.array(d["theta"]["wall"]),
        k_neighbors=int(d["k_neighbors"]), mass=float(d["mass"]),
        pos_scale=float(d["normalization"]["pos_scale"]),
        vel_scale=float(d["normalization"]["vel_scale"]),
        rel_scale=float(d["normalization"]["rel_scale"]),
        use_relative_velocity=bool(d["use_relative_velocity"]),
        config_digest=d.get("config_digest", ""))
