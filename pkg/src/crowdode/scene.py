"""Square room with a single exit.

The room is the axis-aligned square ``[0, H] x [0, H]``. One wall carries an
exit gap centred on its midpoint; the remaining perimeter is covered by wall
segments (5 in total). Points exactly on the perimeter count as inside.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from crowdode.errors import CapacityError

EXIT_WALLS = ("right", "left", "top", "bottom")


@dataclass(frozen=True)
class Segment:
    a: tuple[float, float]
    b: tuple[float, float]

    def __post_init__(self):
        if np.allclose(self.a, self.b, rtol=0.0, atol=0.0):
            raise ValueError("segment endpoints must differ")

    @property
    def length(self) -> float:
        return float(np.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1]))


@dataclass(frozen=True)
class Scene:
    side_length: float
    walls: tuple[Segment, ...]
    exit: Segment
    exit_center: tuple[float, float]
    exit_normal: tuple[float, float]
    exit_width: float
    exit_wall: str = "right"
    _wall_a: np.ndarray = field(init=False, repr=False, compare=False)
    _wall_b: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.side_length <= 0:
            raise ValueError("side_length must be positive")
        a = np.array([w.a for w in self.walls], dtype=float).reshape(-1, 2)
        b = np.array([w.b for w in self.walls], dtype=float).reshape(-1, 2)
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "_wall_a", a)
        object.__setattr__(self, "_wall_b", b)

    @property
    def n_walls(self) -> int:
        return len(self.walls)

    @property
    def wall_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Endpoints of all walls as two ``(W, 2)`` arrays."""
        return self._wall_a, self._wall_b

    def to_dict(self) -> dict:
        return {
            "side_length": self.side_length,
            "exit_width": self.exit_width,
            "exit_wall": self.exit_wall,
        }


def make_square_room(side_length: float = 10.0, exit_width: float = 1.0,
                     exit_wall: str = "right") -> Scene:
    """Build the square room. Walls run counter-clockwise from the origin."""
    H = float(side_length)
    if H <= 0:
        raise ValueError("side_length must be positive")
    if not 0 < exit_width < H:
        raise ValueError("exit_width must lie in (0, side_length)")
    if exit_wall not in EXIT_WALLS:
        raise ValueError(f"exit_wall must be one of {EXIT_WALLS}")

    corners = [(0.0, 0.0), (H, 0.0), (H, H), (0.0, H)]
    # side index -> (name, outward normal)
    sides = [("bottom", (0.0, -1.0)), ("right", (1.0, 0.0)),
             ("top", (0.0, 1.0)), ("left", (-1.0, 0.0))]
    lo = 0.5 * (H - exit_width)
    hi = 0.5 * (H + exit_width)

    walls = []
    exit_seg = None
    center = normal = None
    for i, (name, nrm) in enumerate(sides):
        p = np.array(corners[i])
        q = np.array(corners[(i + 1) % 4])
        if name != exit_wall:
            walls.append(Segment(tuple(p), tuple(q)))
            continue
        d = (q - p) / H
        g0 = p + lo * d
        g1 = p + hi * d
        walls.append(Segment(tuple(p), tuple(g0)))
        walls.append(Segment(tuple(g1), tuple(q)))
        exit_seg = Segment(tuple(g0), tuple(g1))
        center = tuple(0.5 * (g0 + g1))
        normal = nrm
    return Scene(side_length=H, walls=tuple(walls), exit=exit_seg,
                 exit_center=(float(center[0]), float(center[1])),
                 exit_normal=normal, exit_width=float(exit_width),
                 exit_wall=exit_wall)


def _project(a, b, x):
    """Nearest points on segments ``a->b`` to ``x`` and the clamped parameter t."""
    ab = b - a
    t = np.sum((x - a) * ab, axis=-1) / np.sum(ab * ab, axis=-1)
    t = np.clip(t, 0.0, 1.0)
    return a + t[..., None] * ab, t


def nearest_point_on_wall(scene: Scene, wall_index: int, x) -> np.ndarray:
    if not 0 <= wall_index < scene.n_walls:
        raise IndexError(f"wall_index {wall_index} out of range for {scene.n_walls} walls")
    a, b = scene.wall_arrays
    p, _ = _project(a[wall_index], b[wall_index], np.asarray(x, dtype=float))
    return p


def nearest_wall_points(scene: Scene, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised nearest points for every wall.

    ``x`` has shape ``(..., 2)``; returns points of shape ``(..., W, 2)`` and
    the segment parameters ``(..., W)``.
    """
    a, b = scene.wall_arrays
    return _project(a, b, np.asarray(x, dtype=float)[..., None, :])


def has_exited(scene: Scene, x) -> bool:
    x = np.asarray(x, dtype=float)
    H = scene.side_length
    return bool(np.any(x < 0.0) or np.any(x > H))


def outside_mask(scene: Scene, positions: np.ndarray) -> np.ndarray:
    """Row-wise has_exited for an ``(N, 2)`` array."""
    H = scene.side_length
    return np.any((positions < 0.0) | (positions > H), axis=-1)


def _exit_frame(scene: Scene):
    """Unit vectors (inward normal, tangent) at the exit wall."""
    n_in = -np.asarray(scene.exit_normal, dtype=float)
    tangent = np.array([-n_in[1], n_in[0]])
    return n_in, tangent


def sample_initial_state(scene: Scene, n_agents: int, mode: str = "uniform",
                         min_separation: float = 0.7, rng_seed: int = 0,
                         margin: float = 0.5, cluster_depth: float = 3.0,
                         max_rounds: int = 20, max_attempts: int = 2000):
    """Draw a resting crowd inside the room by rejection sampling.

    ``uniform`` spreads agents over the room shrunk by ``margin``.
    ``bimodal`` flips a fair coin per call and places the whole crowd either
    in a band of depth ``cluster_depth`` next to the exit wall or in the
    same-sized band next to the opposite wall, so evacuation times across
    repeated draws fall into two groups.
    """
    from crowdode.dynamics import CrowdState

    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if mode not in ("uniform", "bimodal"):
        raise ValueError(f"unknown spawn mode {mode!r}")
    H = scene.side_length
    rng = np.random.default_rng(rng_seed)

    n_in, tangent = _exit_frame(scene)
    center = np.asarray(scene.exit_center, dtype=float)
    if mode == "uniform":
        depth_lo, depth_hi = margin, H - margin
    else:
        near = rng.random() < 0.5
        if near:
            depth_lo, depth_hi = margin, margin + cluster_depth
        else:
            depth_lo, depth_hi = H - margin - cluster_depth, H - margin
    lat_lo, lat_hi = margin - 0.5 * H, 0.5 * H - margin
    if depth_hi <= depth_lo or lat_hi <= lat_lo:
        raise CapacityError("spawn region is empty")

    sep2 = min_separation ** 2
    for _ in range(max_rounds):
        pts = np.empty((0, 2))
        for _agent in range(n_agents):
            for _try in range(max_attempts):
                s = rng.uniform(depth_lo, depth_hi)
                u = rng.uniform(lat_lo, lat_hi)
                p = center + s * n_in + u * tangent
                if pts.shape[0] == 0 or np.min(np.sum((pts - p) ** 2, axis=1)) >= sep2:
                    pts = np.vstack([pts, p])
                    break
            else:
                break
        if pts.shape[0] == n_agents:
            return CrowdState(pts, np.zeros_like(pts), 0.0)
    raise CapacityError(
        f"could not place {n_agents} agents with separation {min_separation} m "
        f"after {max_rounds} rounds")
