"""Per-block traffic field and the policies built on top of it.

A recurrent message-passing pass over the unit-block graph produces one
hidden vector per free block (the "rule field"). The steering head reads the
field at an agent's block and modulates the shortest-path velocity. The
module also contains the two non-learned references: a shortest-path
baseline and a right-hand-traffic expert derived from 2x2 super-cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dynamics import DEFAULT_V_MAX
from .errors import ShapeMismatch, UnclassifiableBlock
from .geometry import DIRECTIONS, BlockGrid, Environment, decompose_blocks
from .nn import (
    EDGE_SPEC,
    STEER_SPEC,
    UPDATE_SPEC,
    ParamVector,
    mlp_forward,
    mlp_forward_t,
    tensor_layers,
)
from .visibility import PathPlanner, build_visibility_graph

GRNN_HIDDEN = 32
CLAMP_EPS = 1e-6

# Rollout-level instrumentation: the field must be computed once per
# environment, not once per step. Tests reset this directly.
GRNN_INFER_CALLS = 0


def default_sweeps(grid: BlockGrid) -> int:
    """Enough Jacobi sweeps for information to cross the grid."""
    return grid.width + grid.height


def edge_arrays(grid: BlockGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed message edges (src, dst, offset) in a fixed direction-major
    order. offset = center(dst) - center(src), so it only depends on the
    direction, never on absolute coordinates."""
    src_parts, dst_parts = [], []
    for dst, src in grid.neighbor_pairs:
        dst_parts.append(dst)
        src_parts.append(src)
    src_idx = np.concatenate(src_parts).astype(np.int64)
    dst_idx = np.concatenate(dst_parts).astype(np.int64)
    offsets = grid.centers[dst_idx] - grid.centers[src_idx]
    return src_idx, dst_idx, offsets


@dataclass
class HiddenField:
    """Converged per-block hidden states plus a read counter for tests."""

    grid: BlockGrid
    values: np.ndarray  # (n_blocks, GRNN_HIDDEN)
    reads: int = 0

    def at(self, points: np.ndarray) -> np.ndarray:
        """Hidden rows for the blocks containing each point, shape (A, H)."""
        self.reads += 1
        return self.values[self.grid.ids_at(np.atleast_2d(points))]


def grnn_infer(params: ParamVector, grid: BlockGrid, sweeps: int | None = None) -> HiddenField:
    """Run the block-graph recurrence from a zero field.

    Every sweep recomputes all messages from the previous field (Jacobi
    style), aggregates them per receiving block by summation, and applies
    the state update. The update net ends in ReLU, so fields are
    elementwise nonnegative.
    """
    global GRNN_INFER_CALLS
    GRNN_INFER_CALLS += 1
    if sweeps is None:
        sweeps = default_sweeps(grid)
    n = grid.n_blocks
    src_idx, dst_idx, offsets = edge_arrays(grid)
    edge_layers = params.layers("edge", EDGE_SPEC)
    update_layers = params.layers("update", UPDATE_SPEC)
    h = np.zeros((n, GRNN_HIDDEN))
    for _ in range(sweeps):
        msg_in = np.concatenate([offsets, h[src_idx]], axis=1)
        msg = mlp_forward(EDGE_SPEC, edge_layers, msg_in)
        agg = np.zeros((n, GRNN_HIDDEN))
        np.add.at(agg, dst_idx, msg)
        h = mlp_forward(UPDATE_SPEC, update_layers, np.concatenate([h, agg], axis=1))
    return HiddenField(grid=grid, values=h)


def grnn_infer_t(leaves: dict, grid: BlockGrid, sweeps: int | None = None) -> ad.Tensor:
    """Autodiff twin of grnn_infer; same operations on Tensors.

    `leaves` maps "edge" and "update" to tensor layer lists (see
    nn.tensor_layers). The forward values match grnn_infer bitwise.
    """
    if sweeps is None:
        sweeps = default_sweeps(grid)
    n = grid.n_blocks
    src_idx, dst_idx, offsets = edge_arrays(grid)
    offsets_t = ad.constant(offsets)
    h = ad.constant(np.zeros((n, GRNN_HIDDEN)))
    for _ in range(sweeps):
        msg_in = ad.concat([offsets_t, ad.gather_rows(h, src_idx)])
        msg = mlp_forward_t(EDGE_SPEC, leaves["edge"], msg_in)
        agg = ad.scatter_sum(msg, dst_idx, n)
        h = mlp_forward_t(UPDATE_SPEC, leaves["update"], ad.concat([h, agg]))
    return h


def clamp_velocity(v: np.ndarray, v_max: float, eps: float = CLAMP_EPS) -> np.ndarray:
    """Row-wise speed limit v / max(1, (|v| + eps) / v_max).

    Matches autodiff.clamp_rows expression for expression so the training
    graph and rollout code produce identical floats.
    """
    v = np.asarray(v, dtype=np.float64)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[None, :]
    if v.shape[1] != 2:
        raise ShapeMismatch(f"velocities must be (A, 2), got {v.shape}")
    norms = np.hypot(v[:, 0], v[:, 1])
    denom = norms + eps
    scaled = denom > v_max
    factor = np.where(scaled, v_max / denom, 1.0)
    out = v * factor[:, None]
    return out[0] if squeeze else out


def rfu_modulate(
    params: ParamVector,
    h_rows: np.ndarray,
    rel: np.ndarray,
    v_bar: np.ndarray,
    v_max: float = DEFAULT_V_MAX,
) -> np.ndarray:
    """Steering head: (hidden, in-block offset, tentative velocity) -> velocity."""
    inp = np.concatenate([h_rows, rel, v_bar], axis=1)
    raw = mlp_forward(STEER_SPEC, params.layers("steer", STEER_SPEC), inp)
    return clamp_velocity(raw, v_max)


def rfu_modulate_t(
    steer_leaves: list,
    h_rows: ad.Tensor,
    rel: np.ndarray,
    v_bar: np.ndarray,
    v_max: float = DEFAULT_V_MAX,
) -> ad.Tensor:
    """Autodiff twin of rfu_modulate; forward values match bitwise."""
    inp = ad.concat([h_rows, ad.constant(rel), ad.constant(v_bar)])
    raw = mlp_forward_t(STEER_SPEC, steer_leaves, inp)
    return ad.clamp_rows(raw, v_max, CLAMP_EPS)


# ---------------------------------------------------------------------------
# Policies


class RulePolicy:
    """Learned policy: one field inference per environment, then cheap
    per-step steering queries."""

    def __init__(
        self,
        params: ParamVector,
        env: Environment,
        radius: float,
        v_max: float = DEFAULT_V_MAX,
        sweeps: int | None = None,
        grid: BlockGrid | None = None,
        planner: PathPlanner | None = None,
    ):
        self.params = params
        self.env = env
        self.v_max = v_max
        self.grid = decompose_blocks(env) if grid is None else grid
        self.sweeps = default_sweeps(self.grid) if sweeps is None else sweeps
        self.planner = (
            PathPlanner(build_visibility_graph(env, radius)) if planner is None else planner
        )
        self.field: HiddenField | None = None

    def prepare(self) -> HiddenField:
        """Compute (or reuse) the hidden field for the current parameters."""
        if self.field is None:
            self.field = grnn_infer(self.params, self.grid, self.sweeps)
        return self.field

    def refresh(self) -> None:
        """Drop the cached field after a parameter update."""
        self.field = None

    def eval_batch(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        field = self.prepare()
        v_bar = self.planner.tentative(x, g, self.v_max)
        h_rows = field.at(x)
        rel = x - self.grid.block_indices(x)
        return rfu_modulate(self.params, h_rows, rel, v_bar, self.v_max)

    def eval(self, x, g) -> np.ndarray:
        return self.eval_batch(np.asarray(x)[None, :], np.asarray(g)[None, :])[0]


class BaselinePolicy:
    """Clamped shortest-path follower; no traffic rules, no parameters."""

    def __init__(self, planner: PathPlanner, v_max: float = DEFAULT_V_MAX):
        self.planner = planner
        self.v_max = v_max

    def eval_batch(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        return clamp_velocity(self.planner.tentative(x, g, self.v_max), self.v_max)

    def eval(self, x, g) -> np.ndarray:
        return self.eval_batch(np.asarray(x)[None, :], np.asarray(g)[None, :])[0]


def baseline_eval(planner: PathPlanner, x, g, v_max: float = DEFAULT_V_MAX) -> np.ndarray:
    return BaselinePolicy(planner, v_max).eval_batch(x, g)


# Factories with a uniform (env, radius, v_max) signature, for code that
# builds one policy per environment (metrics, training probes, CLI).


def rule_policy_factory(params: ParamVector, sweeps: int | None = None):
    def make(env: Environment, radius: float, v_max: float) -> RulePolicy:
        return RulePolicy(params, env, radius, v_max=v_max, sweeps=sweeps)

    return make


def baseline_policy_factory():
    def make(env: Environment, radius: float, v_max: float) -> BaselinePolicy:
        return BaselinePolicy(PathPlanner(build_visibility_graph(env, radius)), v_max)

    return make


def expert_policy_factory():
    def make(env: Environment, radius: float, v_max: float) -> "ExpertPolicy":
        rulebook = derive_rulebook(decompose_blocks(env))
        planner = PathPlanner(build_visibility_graph(env, radius))
        return ExpertPolicy(rulebook, planner, v_max)

    return make


# ---------------------------------------------------------------------------
# Hand-built traffic rules

# Index map for a clockwise quarter turn: +x -> -y, +y -> +x, -x -> +y, -y -> -x.
_RIGHT_TURN = np.array([3, 0, 1, 2], dtype=np.int64)

# Counterclockwise circulation over a 2x2 super-cell, indexed by
# (local_x, local_y): BL moves +x, BR +y, TR -x, TL -y.
_CCW_BASE = {(0, 0): 0, (1, 0): 1, (1, 1): 2, (0, 1): 3}

_ARM_OFFSETS = {"E": (1, 0), "N": (0, 1), "W": (-1, 0), "S": (0, -1)}


@dataclass(frozen=True)
class Rulebook:
    """Allowed unit directions per block, (n_blocks, 4) in +x,+y,-x,-y order."""

    grid: BlockGrid
    allowed: np.ndarray

    def directions(self, block: int) -> list[str]:
        names = ["+x", "+y", "-x", "-y"]
        return [names[k] for k in range(4) if self.allowed[block, k]]


def derive_rulebook(grid: BlockGrid) -> Rulebook:
    """Right-hand traffic from 2x2 super-cells anchored at grid index (0,0).

    Super-cells that are fully free become lanes or roundabouts: a cell
    whose east and west neighbors (and only those) are free super-cells is
    a horizontal road (bottom lane eastbound, top lane westbound), the
    north/south analogue is a vertical road, and everything else circulates
    counterclockwise. Roundabout cells additionally get a right-turn exit
    wherever it feeds the downstream cell's own lane direction. Any free
    cell in a partially free super-cell cannot be classified.
    """
    free = grid.free
    w, h = grid.width, grid.height
    sw, sh = (w + 1) // 2, (h + 1) // 2
    full = np.zeros((sw, sh), dtype=bool)
    for sx in range(sw):
        for sy in range(sh):
            x0, y0 = 2 * sx, 2 * sy
            full[sx, sy] = (
                x0 + 1 < w and y0 + 1 < h and bool(free[x0 : x0 + 2, y0 : y0 + 2].all())
            )

    fx, fy = np.nonzero(free)
    bad = ~full[fx // 2, fy // 2]
    if bad.any():
        bx, by = fx[bad][0], fy[bad][0]
        raise UnclassifiableBlock(
            f"block at grid cell ({bx}, {by}) sits in a partially free 2x2 super-cell"
        )

    def classify(sx: int, sy: int) -> str:
        arms = set()
        for name, (dx, dy) in _ARM_OFFSETS.items():
            ax, ay = sx + dx, sy + dy
            if 0 <= ax < sw and 0 <= ay < sh and full[ax, ay]:
                arms.add(name)
        if arms == {"E", "W"}:
            return "horizontal"
        if arms == {"N", "S"}:
            return "vertical"
        return "junction"

    kind = {}
    for sx in range(sw):
        for sy in range(sh):
            if full[sx, sy]:
                kind[(sx, sy)] = classify(sx, sy)

    allowed = np.zeros((grid.n_blocks, 4), dtype=bool)
    base_dir = np.full(grid.n_blocks, -1, dtype=np.int64)
    for cx, cy in zip(fx, fy):
        block = grid.block_id[cx, cy]
        lx, ly = cx % 2, cy % 2
        k = kind[(cx // 2, cy // 2)]
        if k == "horizontal":
            d = 0 if ly == 0 else 2
        elif k == "vertical":
            d = 1 if lx == 1 else 3
        else:
            d = _CCW_BASE[(lx, ly)]
        base_dir[block] = d
        allowed[block, d] = True

    # Second pass: right-turn exits out of roundabout cells.
    for cx, cy in zip(fx, fy):
        if kind[(cx // 2, cy // 2)] != "junction":
            continue
        block = grid.block_id[cx, cy]
        e = int(_RIGHT_TURN[base_dir[block]])
        nx, ny = cx + DIRECTIONS[e, 0], cy + DIRECTIONS[e, 1]
        if not (0 <= nx < w and 0 <= ny < h) or not free[nx, ny]:
            continue
        if (nx // 2, ny // 2) == (cx // 2, cy // 2):
            continue
        if base_dir[grid.block_id[nx, ny]] == e:
            allowed[block, e] = True

    return Rulebook(grid=grid, allowed=allowed)


def rule_graph_strongly_connected(rulebook: Rulebook) -> bool:
    """True when every block can reach every other along allowed moves."""
    grid = rulebook.grid
    n = grid.n_blocks
    if n == 0:
        return False
    fwd: list[list[int]] = [[] for _ in range(n)]
    rev: list[list[int]] = [[] for _ in range(n)]
    fx, fy = np.nonzero(grid.free)
    for cx, cy in zip(fx, fy):
        block = int(grid.block_id[cx, cy])
        for k in range(4):
            if not rulebook.allowed[block, k]:
                continue
            nx, ny = cx + DIRECTIONS[k, 0], cy + DIRECTIONS[k, 1]
            if 0 <= nx < grid.width and 0 <= ny < grid.height and grid.free[nx, ny]:
                j = int(grid.block_id[nx, ny])
                fwd[block].append(j)
                rev[j].append(block)

    def covers(adj):
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        stack = [0]
        while stack:
            u = stack.pop()
            for vtx in adj[u]:
                if not seen[vtx]:
                    seen[vtx] = True
                    stack.append(vtx)
        return bool(seen.all())

    return covers(fwd) and covers(rev)


class ExpertPolicy:
    """Right-hand-traffic labels: among the block's allowed unit directions,
    pick the one best aligned with the shortest-path velocity; ties go to
    the earliest direction in +x,+y,-x,-y order. Output magnitude is v_max."""

    def __init__(self, rulebook: Rulebook, planner: PathPlanner, v_max: float = DEFAULT_V_MAX):
        self.rulebook = rulebook
        self.planner = planner
        self.v_max = v_max

    def eval_batch(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.atleast_2d(np.asarray(g, dtype=np.float64))
        v_bar = self.planner.tentative(x, g, self.v_max)
        ids = self.rulebook.grid.ids_at(x)
        scores = v_bar @ DIRECTIONS.T.astype(np.float64)
        scores = np.where(self.rulebook.allowed[ids], scores, -np.inf)
        best = np.argmax(scores, axis=1)
        return DIRECTIONS[best].astype(np.float64) * self.v_max

    def eval(self, x, g) -> np.ndarray:
        return self.eval_batch(np.asarray(x)[None, :], np.asarray(g)[None, :])[0]
