"""Scenarios, rollouts, travel metrics, and the procedural generator.

A scenario is an environment plus a set of persistent spawn points. Each
simulation step seeds agents at free spawn points, retires agents that
reached their goal block, queries the policy once for all active agents,
and advances the collision solver. Rewards summarize per-agent fraction of
travel with a soft-min that interpolates between mean and worst case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DEFAULT_RADIUS,
    DEFAULT_V_MAX,
    AgentState,
    SolverConfig,
    WorldState,
    lnavi_step,
)
from .errors import EmptyRollout, GenerationFailed, OutOfFreespace, ShapeMismatch
from .geometry import BlockGrid, Environment, Rect, decompose_blocks
from .nn import STREAM_EVAL, STREAM_ROLLOUT, STREAM_SCENARIO, rng_stream
from .policy import derive_rulebook, rule_graph_strongly_connected
from .visibility import PathPlanner, build_visibility_graph, point_rect_distance

SPAWN_MARGIN = 0.05


@dataclass(frozen=True)
class SpawnPoint:
    pos: tuple[float, float]
    goal: tuple[float, float]
    group: int = 0


@dataclass
class Scenario:
    env: Environment
    spawns: list[SpawnPoint]
    max_agents: int = 40
    horizon: int = 500
    radius: float = DEFAULT_RADIUS
    v_max: float = DEFAULT_V_MAX
    spawn_order: str = "fixed"  # or "shuffled": re-draw attempt order per step
    name: str = ""
    _grid: BlockGrid | None = field(default=None, repr=False, compare=False)

    def block_grid(self) -> BlockGrid:
        if self._grid is None:
            self._grid = decompose_blocks(self.env)
        return self._grid

    def to_dict(self) -> dict:
        return {
            "environment": self.env.to_dict(),
            "spawns": [
                {"pos": list(s.pos), "goal": list(s.goal), "group": s.group}
                for s in self.spawns
            ],
            "max_agents": self.max_agents,
            "horizon": self.horizon,
            "radius": self.radius,
            "v_max": self.v_max,
            "spawn_order": self.spawn_order,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        return cls(
            env=Environment.from_dict(d["environment"]),
            spawns=[
                SpawnPoint(pos=tuple(s["pos"]), goal=tuple(s["goal"]), group=int(s.get("group", 0)))
                for s in d["spawns"]
            ],
            max_agents=int(d.get("max_agents", 40)),
            horizon=int(d.get("horizon", 500)),
            radius=float(d.get("radius", DEFAULT_RADIUS)),
            v_max=float(d.get("v_max", DEFAULT_V_MAX)),
            spawn_order=str(d.get("spawn_order", "fixed")),
            name=str(d.get("name", "")),
        )


@dataclass
class AgentRecord:
    id: int
    group: int
    spawn_pos: np.ndarray
    goal: np.ndarray
    spawn_step: int
    spawn_sd: float
    exit_step: int | None = None
    final_pos: np.ndarray | None = None

    @property
    def exited(self) -> bool:
        return self.exit_step is not None


@dataclass
class Frame:
    step: int
    ids: np.ndarray
    pos: np.ndarray
    groups: np.ndarray


@dataclass
class RolloutResult:
    scenario: Scenario
    records: list[AgentRecord]
    fractions: np.ndarray
    stalled_substeps: int = 0
    frames: list[Frame] | None = None
    substep_log: list[np.ndarray] | None = None
    _reward_cache: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# Stepping


def seed_agents(
    world: WorldState,
    scenario: Scenario,
    planner: PathPlanner,
    rng: np.random.Generator | None = None,
) -> list[AgentState]:
    """Spawn one agent per unoccupied spawn point, capped at max_agents.

    Points are attempted in listed order (or a per-step shuffle when the
    scenario asks for one). A point is blocked when any active agent sits
    within 2r + margin; blocked points are skipped silently. New agents get
    ids above every id ever used in this world.
    """
    order = range(len(scenario.spawns))
    if scenario.spawn_order == "shuffled":
        if rng is None:
            raise ShapeMismatch("shuffled spawn order needs an rng")
        order = rng.permutation(len(scenario.spawns))
    active = world.active_agents()
    occupied = (
        np.array([a.pos for a in active]) if active else np.zeros((0, 2))
    )
    count = len(active)
    next_id = max((a.id for a in world.agents), default=-1) + 1
    obstacles = world.obstacle_array()
    bx0, by0, bx1, by1 = world.bounds_array()
    r = world.radius
    min_gap = 2.0 * r + SPAWN_MARGIN
    born: list[AgentState] = []
    for k in order:
        if count >= scenario.max_agents:
            break
        sp = scenario.spawns[k]
        p = np.array(sp.pos, dtype=np.float64)
        if occupied.size and np.hypot(*(occupied - p).T).min() < min_gap:
            continue
        if not (bx0 + r <= p[0] <= bx1 - r and by0 + r <= p[1] <= by1 - r):
            continue
        if obstacles.size and point_rect_distance(p, obstacles).min() < r:
            continue
        g = np.array(sp.goal, dtype=np.float64)
        sd = float(planner.distances(p[None, :], g[None, :])[0])
        agent = AgentState(
            id=next_id,
            pos=p.copy(),
            goal=g,
            spawn_pos=p.copy(),
            spawn_sd=sd,
            group=sp.group,
        )
        world.agents.append(agent)
        born.append(agent)
        occupied = np.vstack([occupied, p[None, :]])
        next_id += 1
        count += 1
    return born


def delete_agents(world: WorldState, scenario: Scenario) -> list[int]:
    """Retire exactly the active agents standing in their goal's block."""
    grid = scenario.block_grid()
    removed = []
    for agent in world.active_agents():
        try:
            here = grid.id_at(agent.pos)
        except OutOfFreespace:
            # Solver tolerance can leave a center marginally outside; keep it.
            continue
        if here == grid.id_at(agent.goal):
            agent.active = False
            removed.append(agent.id)
    return removed


def simulate(
    scenario: Scenario,
    policy,
    T: int | None = None,
    seed: int = 0,
    planner: PathPlanner | None = None,
    config: SolverConfig = SolverConfig(),
    collect_frames: bool = False,
    collect_substeps: bool = False,
) -> RolloutResult:
    """Run a full rollout; deterministic given (scenario, policy params, seed).

    Step t: seed agents, retire arrivals, query the policy once for the
    whole population, advance the solver. A final retirement pass runs at
    step T so agents arriving on the last step are credited.
    """
    if T is None:
        T = scenario.horizon
    if planner is None:
        planner = getattr(policy, "planner", None)
    if planner is None:
        planner = PathPlanner(build_visibility_graph(scenario.env, scenario.radius))
    prepare = getattr(policy, "prepare", None)
    if prepare is not None:
        prepare()
    rng = rng_stream(seed, STREAM_ROLLOUT) if scenario.spawn_order == "shuffled" else None
    world = WorldState(env=scenario.env, radius=scenario.radius)
    records: dict[int, AgentRecord] = {}
    frames: list[Frame] | None = [] if collect_frames else None
    substep_log: list[np.ndarray] | None = [] if collect_substeps else None
    stalls = 0

    def retire(step: int) -> None:
        for rid in delete_agents(world, scenario):
            rec = records[rid]
            rec.exit_step = step
            agent = next(a for a in world.agents if a.id == rid)
            rec.final_pos = agent.pos.copy()

    for t in range(T):
        for agent in seed_agents(world, scenario, planner, rng):
            records[agent.id] = AgentRecord(
                id=agent.id,
                group=agent.group,
                spawn_pos=agent.spawn_pos.copy(),
                goal=agent.goal.copy(),
                spawn_step=t,
                spawn_sd=agent.spawn_sd,
            )
        retire(t)
        agents = world.active_agents()
        if frames is not None:
            frames.append(
                Frame(
                    step=t,
                    ids=np.array([a.id for a in agents], dtype=np.int64),
                    pos=np.array([a.pos for a in agents], dtype=np.float64).reshape(-1, 2),
                    groups=np.array([a.group for a in agents], dtype=np.int64),
                )
            )
        if not agents:
            world.time += 1
            continue
        x = np.array([a.pos for a in agents])
        g = np.array([a.goal for a in agents])
        v = policy.eval_batch(x, g)
        desired = {a.id: v[k] for k, a in enumerate(agents)}
        sub = (
            np.empty((config.substeps, len(agents), 2)) if substep_log is not None else None
        )
        result = lnavi_step(world, desired, config, substep_out=sub)
        stalls += result.stalled_substeps
        if substep_log is not None:
            substep_log.append(sub)
    retire(T)
    for agent in world.agents:
        if agent.active:
            records[agent.id].final_pos = agent.pos.copy()
    if frames is not None:
        agents = world.active_agents()
        frames.append(
            Frame(
                step=T,
                ids=np.array([a.id for a in agents], dtype=np.int64),
                pos=np.array([a.pos for a in agents], dtype=np.float64).reshape(-1, 2),
                groups=np.array([a.group for a in agents], dtype=np.int64),
            )
        )
    ordered = [records[k] for k in sorted(records)]
    fractions = np.array([fraction_of_travel(rec, planner) for rec in ordered])
    return RolloutResult(
        scenario=scenario,
        records=ordered,
        fractions=fractions,
        stalled_substeps=stalls,
        frames=frames,
        substep_log=substep_log,
    )


# ---------------------------------------------------------------------------
# Metrics


def fraction_of_travel(record: AgentRecord, planner: PathPlanner) -> float:
    """F = 1 - SD(x_T, g)/SD(x_0, g), clipped to [0, 1]; arrivals score 1."""
    if record.exited:
        return 1.0
    if record.spawn_sd <= 0.0:
        return 1.0
    if record.final_pos is None:
        raise ShapeMismatch(f"agent {record.id} has no final position")
    left = float(planner.distances(record.final_pos[None, :], record.goal[None, :])[0])
    return float(np.clip(1.0 - left / record.spawn_sd, 0.0, 1.0))


def softmin_reward(fractions: np.ndarray, alpha: float) -> float:
    """Soft-min weighted mean: sum F e^(-aF) / sum e^(-aF).

    alpha = 0 is the arithmetic mean, alpha = inf the exact minimum; the
    exponent is shift-stabilized so large alpha cannot overflow.
    """
    F = np.asarray(fractions, dtype=np.float64)
    if F.size == 0:
        raise EmptyRollout("no agents emerged during the rollout")
    if alpha == np.inf:
        return float(F.min())
    if alpha == 0.0:
        return float(F.mean())
    z = -alpha * F
    z = z - z.max()
    w = np.exp(z)
    return float((F * w).sum() / w.sum())


def reward(result: RolloutResult, alpha: float) -> float:
    cached = result._reward_cache.get(alpha)
    if cached is None:
        cached = softmin_reward(result.fractions, alpha)
        result._reward_cache[alpha] = cached
    return cached


@dataclass(frozen=True)
class MetricsReport:
    r0_mean: float
    r0_std: float
    rinf_mean: float
    rinf_std: float
    r0_runs: np.ndarray
    rinf_runs: np.ndarray
    runs: int

    def to_dict(self) -> dict:
        return {
            "r0_mean": self.r0_mean,
            "r0_std": self.r0_std,
            "rinf_mean": self.rinf_mean,
            "rinf_std": self.rinf_std,
            "r0_runs": [float(v) for v in self.r0_runs],
            "rinf_runs": [float(v) for v in self.rinf_runs],
            "runs": self.runs,
        }


def metrics(
    make_policy,
    testset: list[Scenario],
    runs: int = 10,
    seed: int = 0,
    T: int | None = None,
) -> MetricsReport:
    """Average and worst fraction of travel on the 0-100 scale.

    `make_policy(env, radius, v_max)` builds a policy per environment.
    Every run replays all scenarios with a run-specific seed; the report
    carries mean and sample standard deviation over runs.
    """
    if not testset:
        raise EmptyRollout("empty test set")
    r0_runs = np.zeros(runs)
    rinf_runs = np.zeros(runs)
    policies = {}
    for i, scn in enumerate(testset):
        policies[i] = make_policy(scn.env, scn.radius, scn.v_max)
    for run in range(runs):
        r0_vals, rinf_vals = [], []
        for i, scn in enumerate(testset):
            run_seed = int(rng_stream(seed, STREAM_EVAL, run, i).integers(2**63))
            result = simulate(scn, policies[i], T=T, seed=run_seed)
            r0_vals.append(reward(result, 0.0))
            rinf_vals.append(reward(result, np.inf))
        r0_runs[run] = 100.0 * float(np.mean(r0_vals))
        rinf_runs[run] = 100.0 * float(np.mean(rinf_vals))
    ddof = 1 if runs > 1 else 0
    return MetricsReport(
        r0_mean=float(r0_runs.mean()),
        r0_std=float(r0_runs.std(ddof=ddof)),
        rinf_mean=float(rinf_runs.mean()),
        rinf_std=float(rinf_runs.std(ddof=ddof)),
        r0_runs=r0_runs,
        rinf_runs=rinf_runs,
        runs=runs,
    )


# ---------------------------------------------------------------------------
# Procedural generation


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the road-lattice generator; sizes are in 2x2 super-cells."""

    min_super: int = 3
    max_super: int = 5
    block_prob: float = 0.35
    n_groups: int = 2
    min_goal_hops: int = 2
    max_agents: int = 40
    horizon: int = 500
    radius: float = DEFAULT_RADIUS
    v_max: float = DEFAULT_V_MAX
    retries: int = 25


PRESETS = {
    "rl-train": (85, GenConfig()),
    "il-train": (120, GenConfig()),
    "test": (30, GenConfig()),
}


def _super_cell_layout(rng: np.random.Generator, cfg: GenConfig) -> np.ndarray:
    """Connected boolean (SW, SH) map of free super-cells."""
    sw = int(rng.integers(cfg.min_super, cfg.max_super + 1))
    sh = int(rng.integers(cfg.min_super, cfg.max_super + 1))
    free = np.ones((sw, sh), dtype=bool)

    def connected(mask):
        seeds = np.argwhere(mask)
        if seeds.size == 0:
            return False
        seen = np.zeros_like(mask)
        stack = [tuple(seeds[0])]
        seen[tuple(seeds[0])] = True
        while stack:
            cx, cy = stack.pop()
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = cx + dx, cy + dy
                if 0 <= nx < sw and 0 <= ny < sh and mask[nx, ny] and not seen[nx, ny]:
                    seen[nx, ny] = True
                    stack.append((nx, ny))
        return bool((seen == mask).all())

    order = rng.permutation(sw * sh)
    for flat in order:
        if rng.random() >= cfg.block_prob:
            continue
        cx, cy = int(flat) // sh, int(flat) % sh
        if free.sum() <= max(4, cfg.n_groups * 2):
            break
        free[cx, cy] = False
        if not connected(free):
            free[cx, cy] = True
    return free


def _layout_to_env(free_super: np.ndarray) -> Environment:
    sw, sh = free_super.shape
    obstacles = []
    for cx in range(sw):
        for cy in range(sh):
            if not free_super[cx, cy]:
                obstacles.append(Rect(2 * cx, 2 * cy, 2 * cx + 2, 2 * cy + 2))
    return Environment(bounds=Rect(0, 0, 2 * sw, 2 * sh), obstacles=tuple(obstacles))


def _super_hops(free_super: np.ndarray) -> np.ndarray:
    """All-pairs BFS hop counts over the free super-cell graph."""
    sw, sh = free_super.shape
    cells = [tuple(c) for c in np.argwhere(free_super)]
    index = {c: i for i, c in enumerate(cells)}
    n = len(cells)
    hops = np.full((n, n), -1, dtype=np.int64)
    for s, start in enumerate(cells):
        hops[s, s] = 0
        queue = [start]
        head = 0
        while head < len(queue):
            cx, cy = queue[head]
            head += 1
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nxt = (cx + dx, cy + dy)
                if nxt in index and hops[s, index[nxt]] < 0:
                    hops[s, index[nxt]] = hops[s, index[(cx, cy)]] + 1
                    queue.append(nxt)
    return hops


def _place_groups(
    rng: np.random.Generator, free_super: np.ndarray, cfg: GenConfig
) -> list[SpawnPoint] | None:
    cells = [tuple(c) for c in np.argwhere(free_super)]
    if len(cells) < 2 * cfg.n_groups:
        return None
    hops = _super_hops(free_super)
    chosen: list[tuple[int, int]] = []  # (spawn cell idx, goal cell idx)
    used: set[int] = set()
    for _ in range(cfg.n_groups):
        candidates = [i for i in range(len(cells)) if i not in used]
        rng.shuffle(candidates)
        placed = False
        for s in candidates:
            far = [
                gidx
                for gidx in candidates
                if gidx != s and hops[s, gidx] >= cfg.min_goal_hops
            ]
            if far:
                gidx = far[int(rng.integers(len(far)))]
                chosen.append((s, gidx))
                used.update((s, gidx))
                placed = True
                break
        if not placed:
            return None

    # The two lower cells of the spawn super-cell emit agents headed to the
    # two lower cell centers of the goal super-cell.
    spawns: list[SpawnPoint] = []
    for group, (s, gidx) in enumerate(chosen):
        (sx, sy), (gx, gy) = cells[s], cells[gidx]
        sites = [(2 * sx + 0.5, 2 * sy + 0.5), (2 * sx + 1.5, 2 * sy + 0.5)]
        goals = [(2 * gx + 0.5, 2 * gy + 0.5), (2 * gx + 1.5, 2 * gy + 0.5)]
        for site, goal in zip(sites, goals):
            spawns.append(SpawnPoint(pos=site, goal=goal, group=group))
    return spawns


def generate_scenario(cfg: GenConfig, seed: int, index: int = 0) -> Scenario:
    """One procedurally generated road-network scenario.

    Free space is a connected set of 2x2 super-cells, so every block is
    classifiable and corridors are two blocks wide. Retries draw fresh
    layouts; a layout is accepted once its traffic rules are derivable and
    strongly connected and the group sites are far enough apart.
    """
    for attempt in range(cfg.retries):
        rng = rng_stream(seed, STREAM_SCENARIO, index, attempt)
        free_super = _super_cell_layout(rng, cfg)
        env = _layout_to_env(free_super)
        grid = decompose_blocks(env)
        rulebook = derive_rulebook(grid)
        if not rule_graph_strongly_connected(rulebook):
            continue
        spawns = _place_groups(rng, free_super, cfg)
        if spawns is None:
            continue
        return Scenario(
            env=env,
            spawns=spawns,
            max_agents=cfg.max_agents,
            horizon=cfg.horizon,
            radius=cfg.radius,
            v_max=cfg.v_max,
            name=f"scn-{seed}-{index:03d}",
        )
    raise GenerationFailed(
        f"no valid layout for seed {seed} index {index} after {cfg.retries} attempts"
    )


def generate_scenarios(cfg: GenConfig, seed: int, n: int) -> list[Scenario]:
    """Deterministic scenario dataset; item i depends only on (cfg, seed, i)."""
    return [generate_scenario(cfg, seed, i) for i in range(n)]
