"""Visibility graph construction and clearance-aware shortest paths.

Nodes are obstacle corners pushed diagonally one radius per axis into
freespace (plus the four inset bounds corners). Two nodes are connected when
the straight segment between them keeps at least the agent radius from every
obstacle; distances between all node pairs are precomputed once. Point
queries stitch the query endpoints into that table.

All clearance tests use exact point/segment-to-rectangle distances rather
than sampling, so edge clearance holds everywhere along an edge, not just at
sample points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path as _sp_apsp

from .errors import InfeasibleClearance, Unreachable
from .geometry import Environment

# Slop applied when filtering nodes and edges at build time. Querying uses a
# larger slack (below) because agents sit at clearance r - solver_tol, and a
# segment from such a position back to the graph must still count as clear.
BUILD_TOL = 1e-9
QUERY_SLACK = 1e-3

# A valid environment has corridors at least 2 blocks wide, so a diameter-2r
# disc fits iff 2r < 2.
MIN_CORRIDOR = 2.0


def point_rect_distance(p: np.ndarray, rects: np.ndarray) -> np.ndarray:
    """Distance from points p (..., 2) to each solid rect (M, 4); result (..., M)."""
    px = p[..., 0, None]
    py = p[..., 1, None]
    cx = np.clip(px, rects[:, 0], rects[:, 2])
    cy = np.clip(py, rects[:, 1], rects[:, 3])
    return np.hypot(px - cx, py - cy)


def _point_segment_distance(c: np.ndarray, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Distance from point c (2,) to segments p->q ((K,2) each); result (K,)."""
    d = q - p
    dd = np.einsum("ij,ij->i", d, d)
    t = np.einsum("ij,ij->i", c - p, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(dd > 0.0, t / dd, 0.0)
    t = np.clip(t, 0.0, 1.0)
    closest = p + t[:, None] * d
    return np.hypot(closest[:, 0] - c[0], closest[:, 1] - c[1])


def segment_rect_distance(p: np.ndarray, q: np.ndarray, rect: np.ndarray) -> np.ndarray:
    """Exact distance between segments p->q ((K,2) each) and one solid rect (4,).

    Zero when a segment touches or crosses the rectangle. Otherwise the
    minimum is attained at a rectangle corner or a segment endpoint, so it
    suffices to check those six point distances.
    """
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    x0, y0, x1, y1 = float(rect[0]), float(rect[1]), float(rect[2]), float(rect[3])
    d = q - p

    # Liang-Barsky entry/exit parameters against each slab.
    t_lo = np.zeros(p.shape[0])
    t_hi = np.ones(p.shape[0])
    degenerate_outside = np.zeros(p.shape[0], dtype=bool)
    for axis, (lo, hi) in enumerate(((x0, x1), (y0, y1))):
        da = d[:, axis]
        pa = p[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_a = (lo - pa) / da
            t_b = (hi - pa) / da
        enter = np.minimum(t_a, t_b)
        exit_ = np.maximum(t_a, t_b)
        zero = da == 0.0
        inside = (pa >= lo) & (pa <= hi)
        enter = np.where(zero, np.where(inside, -np.inf, np.inf), enter)
        exit_ = np.where(zero, np.where(inside, np.inf, -np.inf), exit_)
        degenerate_outside |= zero & ~inside
        t_lo = np.maximum(t_lo, enter)
        t_hi = np.minimum(t_hi, exit_)
    intersects = (t_lo <= t_hi) & ~degenerate_outside

    corners = ((x0, y0), (x1, y0), (x1, y1), (x0, y1))
    rect_arr = np.asarray(rect, dtype=float)[None, :]
    dist = np.minimum(
        point_rect_distance(p, rect_arr)[:, 0], point_rect_distance(q, rect_arr)[:, 0]
    )
    for c in corners:
        dist = np.minimum(dist, _point_segment_distance(np.asarray(c, dtype=float), p, q))
    return np.where(intersects, 0.0, dist)


def _segments_clear(
    p: np.ndarray, q: np.ndarray, obstacles: np.ndarray, thresholds: np.ndarray
) -> np.ndarray:
    """True per segment when every obstacle keeps its per-(segment,obstacle) threshold."""
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    ok = np.ones(p.shape[0], dtype=bool)
    for m in range(obstacles.shape[0]):
        need = thresholds[:, m] if thresholds.ndim == 2 else thresholds
        ok &= segment_rect_distance(p, q, obstacles[m]) >= need
    return ok


@dataclass(frozen=True)
class VisibilityGraph:
    """Immutable clearance-r roadmap over an environment.

    nodes : (n, 2) float array of roadmap vertices.
    edges : (E, 2) int array of node index pairs with clear sightlines.
    dist  : (n, n) all-pairs shortest distances along the roadmap.
    """

    env: Environment
    radius: float
    nodes: np.ndarray
    edges: np.ndarray
    dist: np.ndarray
    _obstacles: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]


def build_visibility_graph(env: Environment, r: float) -> VisibilityGraph:
    """Construct the roadmap for agent radius r.

    Raises InfeasibleClearance when a diameter-2r disc cannot fit through the
    guaranteed minimum corridor width of 2 blocks.
    """
    if r <= 0.0:
        raise InfeasibleClearance(f"agent radius must be positive, got {r}")
    if 2.0 * r >= MIN_CORRIDOR:
        raise InfeasibleClearance(
            f"agent diameter {2.0 * r} does not fit the minimum corridor width {MIN_CORRIDOR}"
        )
    obstacles = np.array(
        [[ob.x0, ob.y0, ob.x1, ob.y1] for ob in env.obstacles], dtype=float
    ).reshape(-1, 4)
    w, h = float(env.bounds.x1), float(env.bounds.y1)

    cand = [(r, r), (w - r, r), (w - r, h - r), (r, h - r)]
    for ob in env.obstacles:
        cand.append((ob.x0 - r, ob.y0 - r))
        cand.append((ob.x1 + r, ob.y0 - r))
        cand.append((ob.x1 + r, ob.y1 + r))
        cand.append((ob.x0 - r, ob.y1 + r))
    pts = np.asarray(cand, dtype=float)

    inside = (
        (pts[:, 0] >= r - BUILD_TOL)
        & (pts[:, 0] <= w - r + BUILD_TOL)
        & (pts[:, 1] >= r - BUILD_TOL)
        & (pts[:, 1] <= h - r + BUILD_TOL)
    )
    if obstacles.shape[0]:
        clear = point_rect_distance(pts, obstacles).min(axis=1) >= r - BUILD_TOL
    else:
        clear = np.ones(pts.shape[0], dtype=bool)
    nodes = pts[inside & clear]
    n = nodes.shape[0]

    ii, jj = np.triu_indices(n, k=1)
    if ii.size and obstacles.shape[0]:
        keep = _segments_clear(
            nodes[ii], nodes[jj], obstacles, np.full(ii.shape[0], r - BUILD_TOL)
        )
    else:
        keep = np.ones(ii.shape[0], dtype=bool)
    ei, ej = ii[keep], jj[keep]
    edges = np.stack([ei, ej], axis=1) if ei.size else np.zeros((0, 2), dtype=np.int64)
    weights = np.hypot(nodes[ei, 0] - nodes[ej, 0], nodes[ei, 1] - nodes[ej, 1])

    graph = csr_matrix((weights, (ei, ej)), shape=(n, n))
    dist = _sp_apsp(graph, method="D", directed=False) if n else np.zeros((0, 0))
    return VisibilityGraph(
        env=env, radius=r, nodes=nodes, edges=edges, dist=dist, _obstacles=obstacles
    )


def _query_thresholds(vg: VisibilityGraph, points: np.ndarray) -> np.ndarray:
    """Per-(point, obstacle) clearance floor for segments with that endpoint.

    A segment is allowed to pass no closer to an obstacle than min(r, how
    close its endpoint already is), minus slack. For well-cleared endpoints
    this is simply r - slack; it also keeps queries from points inside the
    inflation zone well-defined rather than spuriously unreachable.
    """
    if vg._obstacles.shape[0] == 0:
        return np.zeros((np.atleast_2d(points).shape[0], 0))
    d = point_rect_distance(np.atleast_2d(points), vg._obstacles)
    return np.maximum(np.minimum(vg.radius, d) - QUERY_SLACK, 0.0)


class PathPlanner:
    """Per-rollout query frontend with a distance cache per goal.

    The graph itself is immutable and shared; each rollout owns one planner,
    so cache mutation needs no synchronization.
    """

    def __init__(self, vg: VisibilityGraph):
        self.vg = vg
        self._goal_cost: dict[bytes, np.ndarray] = {}

    def goal_cost(self, g: np.ndarray) -> np.ndarray:
        """cost[u] = shortest roadmap distance from node u onward to goal g."""
        g = np.asarray(g, dtype=float)
        key = g.tobytes()
        cached = self._goal_cost.get(key)
        if cached is not None:
            return cached
        vg = self.vg
        n = vg.n_nodes
        if n == 0:
            cost = np.zeros(0)
        else:
            thr = np.broadcast_to(_query_thresholds(vg, g), (n, vg._obstacles.shape[0]))
            vis = _segments_clear(vg.nodes, np.broadcast_to(g, (n, 2)), vg._obstacles, thr)
            leg = np.where(vis, np.hypot(vg.nodes[:, 0] - g[0], vg.nodes[:, 1] - g[1]), np.inf)
            with np.errstate(invalid="ignore"):
                cost = np.min(vg.dist + leg[None, :], axis=1)
            cost = np.minimum(cost, leg)
        self._goal_cost[key] = cost
        return cost

    def query(
        self, x: np.ndarray, g: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Batched shortest-path query.

        Parameters are (A, 2) starts and goals. Returns (lengths (A,),
        waypoints (A, 2), direct (A,) bool). The waypoint is the first corner
        of the shortest path, or the goal itself when directly visible.
        """
        vg = self.vg
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.atleast_2d(np.asarray(g, dtype=float))
        thr_x = _query_thresholds(vg, x)
        thr_g = _query_thresholds(vg, g)
        direct = _segments_clear(x, g, vg._obstacles, np.minimum(thr_x, thr_g))
        lengths = np.hypot(g[:, 0] - x[:, 0], g[:, 1] - x[:, 1])
        waypoints = g.copy()

        todo = np.nonzero(~direct)[0]
        if todo.size:
            if vg.n_nodes == 0:
                raise Unreachable("no roadmap nodes and no direct sightline")
            nodes = vg.nodes
            n = nodes.shape[0]
            k = todo.size
            seg_p = np.repeat(x[todo], n, axis=0)
            seg_q = np.tile(nodes, (k, 1))
            thr = np.repeat(thr_x[todo], n, axis=0)
            vis = _segments_clear(seg_p, seg_q, vg._obstacles, thr).reshape(k, n)
            enter = np.hypot(
                x[todo, 0, None] - nodes[None, :, 0], x[todo, 1, None] - nodes[None, :, 1]
            )
            enter = np.where(vis, enter, np.inf)
            onward = np.stack([self.goal_cost(g[i]) for i in todo])
            total = enter + onward
            u = np.argmin(total, axis=1)
            best = total[np.arange(k), u]
            if not np.isfinite(best).all():
                bad = todo[~np.isfinite(best)][0]
                raise Unreachable(
                    f"no clearance-respecting path from {tuple(x[bad])} to {tuple(g[bad])}"
                )
            lengths[todo] = best
            waypoints[todo] = nodes[u]
        return lengths, waypoints, direct

    def distances(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        return self.query(x, g)[0]

    def tentative(self, x: np.ndarray, g: np.ndarray, v_max: float) -> np.ndarray:
        """Full-speed velocities toward the first shortest-path waypoint.

        The terminal step is scaled to land on the goal exactly instead of
        overshooting it.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = np.atleast_2d(np.asarray(g, dtype=float))
        _, waypoints, direct = self.query(x, g)
        delta = waypoints - x
        norm = np.hypot(delta[:, 0], delta[:, 1])
        terminal = direct & (norm < v_max)
        safe = np.where(norm > 0.0, norm, 1.0)
        v = delta / safe[:, None] * v_max
        v[terminal] = delta[terminal]
        v[norm == 0.0] = 0.0
        return v


def shortest_distance(vg: VisibilityGraph, x, g) -> float:
    """Length of the shortest clearance-respecting path from x to g."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    return float(PathPlanner(vg).distances(x[None, :], g[None, :])[0])


def tentative_velocity(vg: VisibilityGraph, x, g, v_max: float) -> np.ndarray:
    """Velocity of magnitude v_max along the shortest path from x toward g."""
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    return PathPlanner(vg).tentative(x[None, :], g[None, :], v_max)[0]
