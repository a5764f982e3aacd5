"""Independent reference computations used by several test modules."""
import math

import numpy as np

from crowdode.dynamics import CrowdState
from crowdode.forcefield import init_force_field
from crowdode.orca import HalfPlane
from crowdode.training import WindowPair


def lp_grid_oracle(halfplanes, v_pref, v_max, n=2001):
    """Brute-force argmin |v - v_pref| over a grid on the disk |v| <= v_max."""
    g = np.linspace(-v_max, v_max, n)
    vx, vy = np.meshgrid(g, g, indexing="ij")
    ok = vx * vx + vy * vy <= v_max * v_max
    for h in halfplanes:
        ok &= h.normal[0] * (vx - h.point[0]) + h.normal[1] * (vy - h.point[1]) >= 0
    if not ok.any():
        return None
    d = (vx - v_pref[0]) ** 2 + (vy - v_pref[1]) ** 2
    d = np.where(ok, d, np.inf)
    i = np.unravel_index(np.argmin(d), d.shape)
    return np.array([vx[i], vy[i]])


def random_feasible_lp(rng, v_max=1.0, max_constraints=8):
    """Random half-planes that all contain a common point of the speed disk."""
    m = int(rng.integers(1, max_constraints + 1))
    r = v_max * math.sqrt(rng.random()) * 0.9
    a = rng.uniform(0, 2 * math.pi)
    anchor = np.array([r * math.cos(a), r * math.sin(a)])
    planes = []
    for _ in range(m):
        phi = rng.uniform(0, 2 * math.pi)
        normal = np.array([math.cos(phi), math.sin(phi)])
        point = rng.uniform(-v_max, v_max, size=2)
        if normal @ (anchor - point) < 0:
            normal = -normal
        planes.append(HalfPlane(tuple(point), tuple(normal)))
    v_pref = rng.uniform(-1.5 * v_max, 1.5 * v_max, size=2)
    return planes, v_pref


def collides_within(rel_pos, rel_vel, radius, horizon, n=20001):
    """True if ``|rel_pos - t * rel_vel| < radius`` for some t in [0, horizon].

    ``rel_pos`` is the other body relative to us, ``rel_vel`` our velocity
    relative to it.
    """
    t = np.linspace(0.0, horizon, n)[:, None]
    return bool(np.min(np.linalg.norm(rel_pos - t * rel_vel, axis=1)) < radius)


def central_difference(fun, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (fun(theta + e) - fun(theta - e)) / (2 * h)
    return g


def min_pair_distance(positions, exited):
    """Smallest centre distance among agents still inside, over all records."""
    best = math.inf
    for x, out in zip(positions, exited):
        live = x[~out]
        if live.shape[0] < 2:
            continue
        d = np.linalg.norm(live[:, None] - live[None], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        best = min(best, float(d.min()))
    return best


def random_gradient_instance(seed, max_width=8):
    """Two agents, a small random force field and an arbitrary 0.1 s target."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 3))
    hidden = tuple(int(w) for w in rng.integers(2, max_width + 1, size=depth))
    ff = init_force_field(seed, hidden=hidden, rel_scale=1.0)
    ff = ff.with_theta(ff.theta + 0.3 * rng.normal(size=ff.n_params))
    x0 = np.array([[4.0, 5.0], [4.0, 5.0]]) + rng.uniform(-1, 1, size=(2, 2))
    z0 = CrowdState(x0, rng.normal(scale=0.5, size=(2, 2)))
    z1 = CrowdState(x0 + rng.normal(scale=0.1, size=(2, 2)), rng.normal(scale=0.5, size=(2, 2)))
    return ff, WindowPair(z0, z1, 0.1, f"rand{seed}")
