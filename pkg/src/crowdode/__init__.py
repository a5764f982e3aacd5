"""Learning crowd dynamics with social-force-structured neural ODEs."""

from crowdode.scene import Scene, Segment, make_square_room, sample_initial_state
from crowdode.dynamics import CrowdState, IntegratorConfig, Trajectory, ode_solve, rollout

__all__ = [
    "CrowdState",
    "IntegratorConfig",
    "Scene",
    "Segment",
    "Trajectory",
    "make_square_room",
    "ode_solve",
    "rollout",
    "sample_initial_state",
]

__version__ = "0.1.0"
