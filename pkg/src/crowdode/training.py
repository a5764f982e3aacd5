"""Window slicing, L1 loss, gradients through the ODE solver, and the training loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from crowdode.dynamics import BLOWUP_LIMIT, CrowdState, IntegratorConfig, Trajectory, step_schedule
from crowdode.errors import NumericalBlowupError, ShapeError, TrainingDivergedError
from crowdode.forcefield import ForceFieldParams, forces_batched, forces_vjp
from crowdode.scene import Scene

log = logging.getLogger(__name__)

GRAD_MODES = ("backprop", "adjoint")


@dataclass
class WindowPair:
    z0: CrowdState
    z1: CrowdState
    dt_window: float
    sample_id: str = ""

    def __post_init__(self):
        if self.z0.n_agents != self.z1.n_agents:
            raise ShapeError("window endpoints must have the same number of agents")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    window_steps: int = 10
    stride: int = 10
    solver: IntegratorConfig = field(default_factory=lambda: IntegratorConfig("rk4", 0.01))
    grad_mode: str = "backprop"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1 or self.window_steps < 1 or self.stride < 1 or self.batch_size < 1:
            raise ValueError("epochs, window_steps, stride and batch_size must be >= 1")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def slice_windows(traj: Trajectory, window_steps: int, stride: int = 1) -> list[WindowPair]:
    """Sliding windows over recorded states.

    A window is kept only if the set of agents still in the room is the same
    at both ends, i.e. nobody leaves inside it. Agents that left earlier stay
    in the arrays as frozen, inactive entries. Windows after everyone has left
    are skipped.
    """
    if stride < 1 or window_steps < 1:
        raise ValueError("window_steps and stride must be >= 1")
    out = []
    tag = traj.meta.get("seed", "")
    T = traj.n_records
    span = window_steps * traj.record_interval
    for k in range(0, T - window_steps, stride):
        e = k + window_steps
        if np.any(traj.exited[e] != traj.exited[k]) or traj.exited[k].all():
            continue
        if abs(traj.times[e] - traj.times[k] - span) > 1e-9:
            continue  # off-grid terminal record
        out.append(WindowPair(traj.state(k), traj.state(e), float(traj.times[e] - traj.times[k]),
                              f"{tag}:{k}"))
    return out


def l1_loss(pred: CrowdState, target: CrowdState) -> float:
    if pred.positions.shape != target.positions.shape:
        raise ShapeError("prediction and target differ in shape")
    return float(np.sum(np.abs(pred.positions - target.positions)) +
                 np.sum(np.abs(pred.velocities - target.velocities)))


# --- batched solve with a tape ----------------------------------------------

RK4_WEIGHTS = (1.0, 2.0, 2.0, 1.0)


def _rhs(ff, scene, x, v, act, keep):
    F, cache = forces_batched(ff, scene, x, v, act, with_cache=True)
    kx = np.where(act[..., None], v, 0.0)
    return kx, F / ff.mass, (cache if keep else None)


def _solve(ff, scene, x, v, act, dt_window, solver, keep=True):
    """Integrate a stack of crowds; returns final (x, v) and the per-stage tape."""
    tape = []
    for h in step_schedule(0.0, dt_window, solver.step_size):
        if solver.method == "euler":
            kx, kv, c = _rhs(ff, scene, x, v, act, keep)
            tape.append((h, [(c, act)]))
            x, v = x + h * kx, v + h * kv
        else:
            stages = []
            k1x, k1v, c1 = _rhs(ff, scene, x, v, act, keep)
            k2x, k2v, c2 = _rhs(ff, scene, x + 0.5 * h * k1x, v + 0.5 * h * k1v, act, keep)
            k3x, k3v, c3 = _rhs(ff, scene, x + 0.5 * h * k2x, v + 0.5 * h * k2v, act, keep)
            k4x, k4v, c4 = _rhs(ff, scene, x + h * k3x, v + h * k3v, act, keep)
            stages = [(c1, act), (c2, act), (c3, act), (c4, act)]
            tape.append((h, stages))
            x = x + h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            v = v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    return x, v, tape


def _stage_vjp(ff, cache, act, ckx, ckv):
    """Pull a cotangent on (k_x, k_v) back to the stage input (x, v) and theta."""
    gx, gv, gth = forces_vjp(ff, cache, ckv / ff.mass)
    gv = gv + np.where(act[..., None], ckx, 0.0)
    return gx, gv, gth


def _backprop(ff, tape, ax, av, method):
    """Reverse accumulation through every integrator stage."""
    gtheta = np.zeros(ff.n_params)
    for h, stages in reversed(tape):
        if method == "euler":
            cache, act = stages[0]
            gx, gv, gth = _stage_vjp(ff, cache, act, h * ax, h * av)
            ax, av, gtheta = ax + gx, av + gv, gtheta + gth
            continue
        ckx = [h / 6.0 * w * ax for w in RK4_WEIGHTS]
        ckv = [h / 6.0 * w * av for w in RK4_WEIGHTS]
        nx, nv = ax.copy(), av.copy()
        # stage i's input is z + c_i * h * k_{i-1}
        feed = (None, 0.5 * h, 0.5 * h, h)
        for i in (3, 2, 1, 0):
            cache, act = stages[i]
            gx, gv, gth = _stage_vjp(ff, cache, act, ckx[i], ckv[i])
            gtheta += gth
            nx += gx
            nv += gv
            if i > 0:
                ckx[i - 1] = ckx[i - 1] + feed[i] * gx
                ckv[i - 1] = ckv[i - 1] + feed[i] * gv
        ax, av = nx, nv
    return gtheta


def _adjoint(ff, scene, x1, v1, act, ax, av, dt_window, solver):
    """Integrate state, adjoint and parameter-gradient ODEs backwards in time."""

    def aug(x, v, a_x, a_v):
        F, cache = forces_batched(ff, scene, x, v, act, with_cache=True)
        dx = -np.where(act[..., None], v, 0.0)
        dv = -F / ff.mass
        gx, gv, gth = _stage_vjp(ff, cache, act, a_x, a_v)
        return dx, dv, gx, gv, gth

    x, v = x1, v1
    g = np.zeros(ff.n_params)
    for h in reversed(step_schedule(0.0, dt_window, solver.step_size)):
        if solver.method == "euler":
            d = aug(x, v, ax, av)
            x, v, ax, av, g = x + h * d[0], v + h * d[1], ax + h * d[2], av + h * d[3], g + h * d[4]
            continue
        s = (x, v, ax, av, g)
        k1 = aug(*s[:4])
        k2 = aug(*[s[i] + 0.5 * h * k1[i] for i in range(4)])
        k3 = aug(*[s[i] + 0.5 * h * k2[i] for i in range(4)])
        k4 = aug(*[s[i] + h * k3[i] for i in range(4)])
        x, v, ax, av, g = [s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                           for i in range(5)]
    return g


def _stack(pairs):
    x0 = np.stack([p.z0.positions for p in pairs])
    v0 = np.stack([p.z0.velocities for p in pairs])
    x1 = np.stack([p.z1.positions for p in pairs])
    v1 = np.stack([p.z1.velocities for p in pairs])
    act = ~np.stack([p.z0.exited for p in pairs])
    return x0, v0, x1, v1, act


def _bad_samples(x, v):
    with np.errstate(invalid="ignore"):
        mag = np.maximum(np.max(np.abs(x), axis=(1, 2)), np.max(np.abs(v), axis=(1, 2)))
    return ~np.isfinite(mag) | (mag > BLOWUP_LIMIT)


def batch_loss_gradient(ff: ForceFieldParams, pairs: list[WindowPair], scene: Scene,
                        cfg: TrainConfig):
    """Per-sample losses, batch-mean gradient and skipped sample ids."""
    dt = pairs[0].dt_window
    if any(abs(p.dt_window - dt) > 1e-9 for p in pairs):
        raise ValueError("all windows in a batch must share dt_window")
    x0, v0, x1h, v1h, act = _stack(pairs)
    keep = cfg.grad_mode == "backprop"
    with np.errstate(over="ignore", invalid="ignore"):
        x1, v1, tape = _solve(ff, scene, x0, v0, act, dt, cfg.solver, keep)
    bad = _bad_samples(x1, v1)
    skipped = [pairs[i].sample_id for i in np.flatnonzero(bad)]
    if bad.any():
        good = np.flatnonzero(~bad)
        if good.size == 0:
            return np.full(len(pairs), np.nan), np.zeros(ff.n_params), skipped
        losses, grad, _ = batch_loss_gradient(ff, [pairs[i] for i in good], scene, cfg)
        full = np.full(len(pairs), np.nan)
        full[good] = losses
        return full, grad, skipped
    rx, rv = x1 - x1h, v1 - v1h
    losses = np.sum(np.abs(rx), axis=(1, 2)) + np.sum(np.abs(rv), axis=(1, 2))
    B = len(pairs)
    ax, av = np.sign(rx) / B, np.sign(rv) / B
    if keep:
        grad = _backprop(ff, tape, ax, av, cfg.solver.method)
    else:
        grad = _adjoint(ff, scene, x1, v1, act, ax, av, dt, cfg.solver)
    return losses, grad, skipped


def loss_gradient(ff: ForceFieldParams, pair: WindowPair, scene: Scene, cfg: TrainConfig):
    """Loss of one window and its exact gradient w.r.t. the flat parameter vector."""
    losses, grad, skipped = batch_loss_gradient(ff, [pair], scene, cfg)
    if skipped:
        raise NumericalBlowupError(f"forward solve blew up for sample {pair.sample_id!r}",
                                   sample_id=pair.sample_id)
    return float(losses[0]), grad


def predict_window(ff: ForceFieldParams, pair: WindowPair, scene: Scene,
                   solver: IntegratorConfig) -> CrowdState:
    x0, v0, _, _, act = _stack([pair])
    x1, v1, _ = _solve(ff, scene, x0, v0, act, pair.dt_window, solver, keep=False)
    return CrowdState(x1[0], v1[0], pair.z0.time + pair.dt_window, pair.z0.exited)


# --- optimiser ---------------------------------------------------------------

class Adam:
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    wall_time: float
    skipped: int = 0


def _group_key(p: WindowPair):
    return (p.z0.n_agents, round(p.dt_window, 9))


def train(dataset: list[WindowPair], scene: Scene, init: ForceFieldParams, cfg: TrainConfig,
          progress=None):
    """Mini-batch Adam for exactly ``cfg.epochs`` epochs.

    Epoch ``e`` shuffles with seed ``cfg.seed + e``. Batches are cut from the
    shuffled order and split further only when windows differ in size.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    ff = init
    theta = init.theta.copy()
    opt = Adam(theta.size, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    for epoch in range(cfg.epochs):
        t_start = time.perf_counter()
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(dataset))
        total, count, skipped = 0.0, 0, 0
        for s in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[s:s + cfg.batch_size]]
            groups = {}
            for p in batch:
                groups.setdefault(_group_key(p), []).append(p)
            grad = np.zeros(theta.size)
            n_ok = 0
            for members in groups.values():
                losses, g, skip = batch_loss_gradient(ff, members, scene, cfg)
                ok = np.isfinite(losses)
                k = int(ok.sum())
                if k:
                    # g is the mean over the group's finite samples
                    grad += g * k
                    total += float(losses[ok].sum())
                n_ok += k
                count += k
                skipped += len(skip)
                for sid in skip:
                    log.warning("epoch %d: skipped sample %s (blow-up)", epoch, sid)
            if n_ok:
                theta = opt.step(theta, grad / n_ok)
                ff = ff.with_theta(theta)
        if count == 0:
            raise TrainingDivergedError(f"every sample was skipped in epoch {epoch}")
        rec = EpochRecord(epoch, total / count, time.perf_counter() - t_start, skipped)
        history.append(rec)
        log.info("epoch %d mean loss %.6g (%.1fs)", epoch, rec.mean_loss, rec.wall_time)
        if progress:
            progress(rec)
    return ff, history
