"""Pure-Python reference implementation of the collision-projection solver.

This is the fallback used when the compiled extension is unavailable, and the
behavioural reference the extension is tested against: both perform the same
floating-point operations in the same order, so results are bit-identical.
Keep every arithmetic expression in sync with ``_solver.pyx``.
"""

from __future__ import annotations

import math

import numpy as np

IS_COMPILED = False


def _gather_pairs(cur: np.ndarray, cutoff: float) -> list[tuple[int, int]]:
    """Candidate pairs within `cutoff`, found via a uniform hash grid.

    Cell size equals the cutoff, so a 3x3 neighbourhood suffices. The result
    is sorted by (i, j); membership depends only on the distance filter, so
    any discovery order yields the same list.
    """
    n = cur.shape[0]
    buckets: dict[tuple[int, int], list[int]] = {}
    qx = np.floor(cur[:, 0] / cutoff).astype(np.int64)
    qy = np.floor(cur[:, 1] / cutoff).astype(np.int64)
    for i in range(n):
        buckets.setdefault((int(qx[i]), int(qy[i])), []).append(i)
    c2 = cutoff * cutoff
    pairs = []
    for i in range(n):
        for dxc in (-1, 0, 1):
            for dyc in (-1, 0, 1):
                b = buckets.get((int(qx[i]) + dxc, int(qy[i]) + dyc))
                if b is None:
                    continue
                for j in b:
                    if j <= i:
                        continue
                    dx = cur[i, 0] - cur[j, 0]
                    dy = cur[i, 1] - cur[j, 1]
                    if dx * dx + dy * dy < c2:
                        pairs.append((i, j))
    pairs.sort()
    return pairs


def _project_point(p: np.ndarray, obstacles: np.ndarray, bounds: np.ndarray, r: float) -> bool:
    """Push p out of every obstacle inflation and into the deflated bounds."""
    moved = False
    px, py = p[0], p[1]
    for m in range(obstacles.shape[0]):
        x0, y0, x1, y1 = obstacles[m, 0], obstacles[m, 1], obstacles[m, 2], obstacles[m, 3]
        cx = min(max(px, x0), x1)
        cy = min(max(py, y0), y1)
        dx = px - cx
        dy = py - cy
        d2 = dx * dx + dy * dy
        if d2 >= r * r:
            continue
        if d2 > 0.0:
            s = r / math.sqrt(d2)
            px = cx + dx * s
            py = cy + dy * s
        else:
            left = px - x0
            right = x1 - px
            down = py - y0
            up = y1 - py
            if left <= right and left <= down and left <= up:
                px = x0 - r
            elif right <= down and right <= up:
                px = x1 + r
            elif down <= up:
                py = y0 - r
            else:
                py = y1 + r
        moved = True
    bx0 = bounds[0] + r
    by0 = bounds[1] + r
    bx1 = bounds[2] - r
    by1 = bounds[3] - r
    if px < bx0:
        px = bx0
        moved = True
    elif px > bx1:
        px = bx1
        moved = True
    if py < by0:
        py = by0
        moved = True
    elif py > by1:
        py = by1
        moved = True
    p[0] = px
    p[1] = py
    return moved


def _feasible(
    x: np.ndarray, obstacles: np.ndarray, bounds: np.ndarray, r: float, two_r: float, tol: float
) -> bool:
    n = x.shape[0]
    pth = two_r - tol
    pth2 = pth * pth
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            if dx * dx + dy * dy < pth2:
                return False
    rth = r - tol
    rth2 = rth * rth
    for i in range(n):
        px, py = x[i, 0], x[i, 1]
        if (
            px - bounds[0] < rth
            or bounds[2] - px < rth
            or py - bounds[1] < rth
            or bounds[3] - py < rth
        ):
            return False
        for m in range(obstacles.shape[0]):
            cx = min(max(px, obstacles[m, 0]), obstacles[m, 2])
            cy = min(max(py, obstacles[m, 1]), obstacles[m, 3])
            dx = px - cx
            dy = py - cy
            if dx * dx + dy * dy < rth2:
                return False
    return True


def solve_step(
    pos: np.ndarray,
    desired: np.ndarray,
    r: float,
    obstacles: np.ndarray,
    bounds: np.ndarray,
    substeps: int,
    sweeps: int,
    tol: float,
    bisect_iters: int,
    substep_out: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Advance positions by one step of `substeps` projected substeps.

    Returns (new positions, number of substeps that needed the bisection
    fallback). Every returned substep state satisfies pairwise separation
    >= 2r - tol and obstacle/bounds clearance >= r - tol.
    """
    n = pos.shape[0]
    cur = np.array(pos, dtype=np.float64)
    two_r = 2.0 * r
    stalls = 0

    step_max = 0.0
    for i in range(n):
        s = math.sqrt(desired[i, 0] * desired[i, 0] + desired[i, 1] * desired[i, 1])
        if s > step_max:
            step_max = s
    step_max /= substeps
    cutoff = 2.0 * two_r + 2.0 * step_max

    for s_idx in range(substeps):
        x = np.empty_like(cur)
        for i in range(n):
            x[i, 0] = cur[i, 0] + desired[i, 0] / substeps
            x[i, 1] = cur[i, 1] + desired[i, 1] / substeps
        pairs = _gather_pairs(cur, cutoff)
        for _ in range(sweeps):
            moved = False
            for i, j in pairs:
                dx = x[i, 0] - x[j, 0]
                dy = x[i, 1] - x[j, 1]
                d2 = dx * dx + dy * dy
                if d2 < two_r * two_r:
                    if d2 > 0.0:
                        scale = 0.5 * (two_r - math.sqrt(d2)) / math.sqrt(d2)
                        ox = dx * scale
                        oy = dy * scale
                    else:
                        ox = 0.5 * two_r
                        oy = 0.0
                    x[i, 0] += ox
                    x[i, 1] += oy
                    x[j, 0] -= ox
                    x[j, 1] -= oy
                    moved = True
            for i in range(n):
                if _project_point(x[i], obstacles, bounds, r):
                    moved = True
            if not moved:
                break
        if not _feasible(x, obstacles, bounds, r, two_r, tol):
            stalls += 1
            lo, hi = 0.0, 1.0
            best = cur.copy()
            for _ in range(bisect_iters):
                lam = 0.5 * (lo + hi)
                cand = np.empty_like(cur)
                for i in range(n):
                    cand[i, 0] = cur[i, 0] + lam * (x[i, 0] - cur[i, 0])
                    cand[i, 1] = cur[i, 1] + lam * (x[i, 1] - cur[i, 1])
                if _feasible(cand, obstacles, bounds, r, two_r, tol):
                    lo = lam
                    best = cand
                else:
                    hi = lam
            x = best
        cur = x
        if substep_out is not None:
            substep_out[s_idx] = cur
    return cur, stalls
