"""Collision-respecting local navigation step.

Agents move toward desired displacements while the solver enforces pairwise
separation of two radii and obstacle/bounds clearance of one radius at every
substep. The step is an approximate projection: predict, then sweep pairwise
and obstacle constraints sequentially until feasible, falling back to a
bisected blend toward the (feasible) previous state if sweeps stall.

The inner solver exists twice: a Cython extension and a pure-Python
reference. They perform identical arithmetic and are selected at import
time; set BLOCKNAV_PURE_PY=1 to force the fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, TooFewAgents
from .geometry import Environment

from . import _solver_py

if os.environ.get("BLOCKNAV_PURE_PY"):
    _backend = _solver_py
else:
    try:
        from . import _solver as _backend  # type: ignore[no-redef]
    except ImportError:
        _backend = _solver_py


def solver_backend() -> str:
    """Name of the active solver implementation ('compiled' or 'python')."""
    return "compiled" if _backend.IS_COMPILED else "python"


@dataclass(frozen=True)
class SolverConfig:
    substeps: int = 4
    projection_sweeps: int = 16
    tolerance: float = 1e-4
    bisect_iters: int = 24


DEFAULT_RADIUS = 0.2
DEFAULT_V_MAX = 0.2


@dataclass
class AgentState:
    id: int
    pos: np.ndarray
    goal: np.ndarray
    spawn_pos: np.ndarray
    spawn_sd: float
    active: bool = True
    group: int = 0


@dataclass
class WorldState:
    env: Environment
    radius: float = DEFAULT_RADIUS
    time: int = 0
    dt: float = 1.0
    agents: list[AgentState] = field(default_factory=list)

    def active_agents(self) -> list[AgentState]:
        """Active agents in ascending id order (the canonical solver order)."""
        return sorted((a for a in self.agents if a.active), key=lambda a: a.id)

    def obstacle_array(self) -> np.ndarray:
        return np.array(
            [[o.x0, o.y0, o.x1, o.y1] for o in self.env.obstacles], dtype=float
        ).reshape(-1, 4)

    def bounds_array(self) -> np.ndarray:
        b = self.env.bounds
        return np.array([b.x0, b.y0, b.x1, b.y1], dtype=float)


def solve_positions(
    pos: np.ndarray,
    desired: np.ndarray,
    r: float,
    obstacles: np.ndarray,
    bounds: np.ndarray,
    config: SolverConfig = SolverConfig(),
    substep_out: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Raw-array solver entry point; returns (new positions, stalled substeps)."""
    pos = np.ascontiguousarray(pos, dtype=np.float64)
    desired = np.ascontiguousarray(desired, dtype=np.float64)
    if pos.shape != desired.shape or pos.ndim != 2 or pos.shape[1] != 2:
        raise ShapeMismatch(f"positions {pos.shape} vs desired {desired.shape}")
    return _backend.solve_step(
        pos,
        desired,
        r,
        np.ascontiguousarray(obstacles, dtype=np.float64).reshape(-1, 4),
        np.ascontiguousarray(bounds, dtype=np.float64),
        config.substeps,
        config.projection_sweeps,
        config.tolerance,
        config.bisect_iters,
        substep_out,
    )


@dataclass(frozen=True)
class StepResult:
    positions: dict[int, np.ndarray]
    stalled_substeps: int


def lnavi_step(
    world: WorldState,
    desired: dict[int, np.ndarray],
    config: SolverConfig = SolverConfig(),
    substep_out: np.ndarray | None = None,
) -> StepResult:
    """Advance the world one step toward per-agent desired displacements.

    `desired` must hold an entry for every active agent. Positions are
    updated in place on the agent states and returned by id; the world clock
    advances by one. `substep_out` (substeps, n, 2) captures the trajectory
    inside the step for invariant audits.
    """
    agents = world.active_agents()
    if not agents:
        world.time += 1
        return StepResult(positions={}, stalled_substeps=0)
    try:
        des = np.array([np.asarray(desired[a.id], dtype=float) for a in agents])
    except KeyError as exc:
        raise ShapeMismatch(f"no desired velocity for active agent {exc.args[0]}") from None
    pos = np.array([a.pos for a in agents], dtype=float)
    new_pos, stalls = solve_positions(
        pos, des, world.radius, world.obstacle_array(), world.bounds_array(), config, substep_out
    )
    out = {}
    for k, agent in enumerate(agents):
        agent.pos = new_pos[k].copy()
        out[agent.id] = new_pos[k].copy()
    world.time += 1
    return StepResult(positions=out, stalled_substeps=stalls)


def min_separation(world: WorldState) -> float:
    """Minimum pairwise distance over active agents."""
    agents = world.active_agents()
    if len(agents) < 2:
        raise TooFewAgents(f"need at least 2 active agents, have {len(agents)}")
    pos = np.array([a.pos for a in agents])
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.hypot(diff[..., 0], diff[..., 1])
    iu = np.triu_indices(len(agents), k=1)
    return float(d[iu].min())
