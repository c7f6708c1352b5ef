# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled collision-projection solver.

Performs exactly the same floating-point operations in the same order as
``_solver_py.solve_step``; the two are interchangeable and bit-identical.
Build flags disable FMA contraction to keep that true (see setup.py).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor, sqrt
from libc.stdlib cimport free, malloc, qsort

cnp.import_array()

IS_COMPILED = True


cdef struct KeyIdx:
    long long key
    int idx


cdef int _cmp_keyidx(const void* a, const void* b) noexcept nogil:
    cdef KeyIdx* ka = <KeyIdx*> a
    cdef KeyIdx* kb = <KeyIdx*> b
    if ka.key < kb.key:
        return -1
    if ka.key > kb.key:
        return 1
    if ka.idx < kb.idx:
        return -1
    if ka.idx > kb.idx:
        return 1
    return 0


cdef int _cmp_ll(const void* a, const void* b) noexcept nogil:
    cdef long long va = (<long long*> a)[0]
    cdef long long vb = (<long long*> b)[0]
    if va < vb:
        return -1
    if va > vb:
        return 1
    return 0


cdef inline long long _pack_cell(long long qx, long long qy) noexcept nogil:
    return (qx << 32) | (qy & 0xffffffffLL)


cdef int _lower_bound(KeyIdx* arr, int n, long long key) noexcept nogil:
    cdef int lo = 0
    cdef int hi = n
    cdef int mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if arr[mid].key < key:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef int _gather_pairs(
    double[:, ::1] cur, int n, double cutoff, KeyIdx* cells, long long* pairs
) noexcept nogil:
    """Fill `pairs` with packed (i << 32 | j) candidates, return the count."""
    cdef int i, j, k, start, npairs
    cdef int dxc, dyc
    cdef long long qxi, qyi, key
    cdef double c2 = cutoff * cutoff
    cdef double dx, dy
    for i in range(n):
        cells[i].key = _pack_cell(
            <long long> floor(cur[i, 0] / cutoff), <long long> floor(cur[i, 1] / cutoff)
        )
        cells[i].idx = i
    qsort(cells, n, sizeof(KeyIdx), _cmp_keyidx)
    npairs = 0
    for i in range(n):
        qxi = <long long> floor(cur[i, 0] / cutoff)
        qyi = <long long> floor(cur[i, 1] / cutoff)
        for dxc in range(-1, 2):
            for dyc in range(-1, 2):
                key = _pack_cell(qxi + dxc, qyi + dyc)
                start = _lower_bound(cells, n, key)
                k = start
                while k < n and cells[k].key == key:
                    j = cells[k].idx
                    k += 1
                    if j <= i:
                        continue
                    dx = cur[i, 0] - cur[j, 0]
                    dy = cur[i, 1] - cur[j, 1]
                    if dx * dx + dy * dy < c2:
                        pairs[npairs] = (<long long> i << 32) | <long long> j
                        npairs += 1
    qsort(pairs, npairs, sizeof(long long), _cmp_ll)
    return npairs


cdef bint _project_point(
    double* p, double[:, ::1] obstacles, int n_obs, double[::1] bounds, double r
) noexcept nogil:
    cdef bint moved = False
    cdef double px = p[0]
    cdef double py = p[1]
    cdef double x0, y0, x1, y1, cx, cy, dx, dy, d2, s
    cdef double left, right, down, up
    cdef double bx0, by0, bx1, by1
    cdef int m
    for m in range(n_obs):
        x0 = obstacles[m, 0]
        y0 = obstacles[m, 1]
        x1 = obstacles[m, 2]
        y1 = obstacles[m, 3]
        cx = px if px > x0 else x0
        cx = cx if cx < x1 else x1
        cy = py if py > y0 else y0
        cy = cy if cy < y1 else y1
        dx = px - cx
        dy = py - cy
        d2 = dx * dx + dy * dy
        if d2 >= r * r:
            continue
        if d2 > 0.0:
            s = r / sqrt(d2)
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


cdef bint _feasible(
    double[:, ::1] x,
    int n,
    double[:, ::1] obstacles,
    int n_obs,
    double[::1] bounds,
    double r,
    double two_r,
    double tol,
) noexcept nogil:
    cdef int i, j, m
    cdef double pth = two_r - tol
    cdef double pth2 = pth * pth
    cdef double rth = r - tol
    cdef double rth2 = rth * rth
    cdef double dx, dy, px, py, cx, cy
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            if dx * dx + dy * dy < pth2:
                return False
    for i in range(n):
        px = x[i, 0]
        py = x[i, 1]
        if (
            px - bounds[0] < rth
            or bounds[2] - px < rth
            or py - bounds[1] < rth
            or bounds[3] - py < rth
        ):
            return False
        for m in range(n_obs):
            cx = px if px > obstacles[m, 0] else obstacles[m, 0]
            cx = cx if cx < obstacles[m, 2] else obstacles[m, 2]
            cy = py if py > obstacles[m, 1] else obstacles[m, 1]
            cy = cy if cy < obstacles[m, 3] else obstacles[m, 3]
            dx = px - cx
            dy = py - cy
            if dx * dx + dy * dy < rth2:
                return False
    return True


def solve_step(
    pos,
    desired,
    double r,
    obstacles,
    bounds,
    int substeps,
    int sweeps,
    double tol,
    int bisect_iters,
    substep_out=None,
):
    """See ``_solver_py.solve_step``; identical contract and results."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cur_arr = np.array(pos, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] des_arr = np.ascontiguousarray(
        desired, dtype=np.float64
    )
    cdef cnp.ndarray[cnp.float64_t, ndim=2] obs_arr = np.ascontiguousarray(
        obstacles, dtype=np.float64
    ).reshape(-1, 4)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] bnd_arr = np.ascontiguousarray(
        bounds, dtype=np.float64
    )
    cdef int n = cur_arr.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x_arr = np.empty_like(cur_arr)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] cand_arr = np.empty_like(cur_arr)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] best_arr = np.empty_like(cur_arr)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] tmp_arr

    cdef double[:, ::1] cur = cur_arr
    cdef double[:, ::1] x = x_arr
    cdef double[:, ::1] cand = cand_arr
    cdef double[:, ::1] best = best_arr
    cdef double[:, ::1] des = des_arr
    cdef double[:, ::1] obs = obs_arr
    cdef double[::1] bnd = bnd_arr
    cdef double[:, ::1] tmp

    cdef int n_obs = obs_arr.shape[0]
    cdef double two_r = 2.0 * r
    cdef int stalls = 0
    cdef double step_max = 0.0
    cdef double cutoff
    cdef double s, dx, dy, d2, scale, ox, oy, lo, hi, lam
    cdef int i, j, s_idx, sweep, p_idx, npairs, it
    cdef long long packed
    cdef bint moved

    cdef KeyIdx* cells = NULL
    cdef long long* pairs = NULL
    if n > 0:
        cells = <KeyIdx*> malloc(n * sizeof(KeyIdx))
        pairs = <long long*> malloc((<size_t> n * (n - 1) // 2 + 1) * sizeof(long long))
        if cells == NULL or pairs == NULL:
            free(cells)
            free(pairs)
            raise MemoryError()

    try:
        for i in range(n):
            s = sqrt(des[i, 0] * des[i, 0] + des[i, 1] * des[i, 1])
            if s > step_max:
                step_max = s
        step_max = step_max / (<double> substeps)
        cutoff = 2.0 * two_r + 2.0 * step_max

        for s_idx in range(substeps):
            for i in range(n):
                x[i, 0] = cur[i, 0] + des[i, 0] / (<double> substeps)
                x[i, 1] = cur[i, 1] + des[i, 1] / (<double> substeps)
            npairs = 0
            if n > 1:
                with nogil:
                    npairs = _gather_pairs(cur, n, cutoff, cells, pairs)
            with nogil:
                for sweep in range(sweeps):
                    moved = False
                    for p_idx in range(npairs):
                        packed = pairs[p_idx]
                        i = <int> (packed >> 32)
                        j = <int> (packed & 0xffffffffLL)
                        dx = x[i, 0] - x[j, 0]
                        dy = x[i, 1] - x[j, 1]
                        d2 = dx * dx + dy * dy
                        if d2 < two_r * two_r:
                            if d2 > 0.0:
                                scale = 0.5 * (two_r - sqrt(d2)) / sqrt(d2)
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
                        if _project_point(&x[i, 0], obs, n_obs, bnd, r):
                            moved = True
                    if not moved:
                        break
                if not _feasible(x, n, obs, n_obs, bnd, r, two_r, tol):
                    stalls += 1
                    lo = 0.0
                    hi = 1.0
                    for i in range(n):
                        best[i, 0] = cur[i, 0]
                        best[i, 1] = cur[i, 1]
                    for it in range(bisect_iters):
                        lam = 0.5 * (lo + hi)
                        for i in range(n):
                            cand[i, 0] = cur[i, 0] + lam * (x[i, 0] - cur[i, 0])
                            cand[i, 1] = cur[i, 1] + lam * (x[i, 1] - cur[i, 1])
                        if _feasible(cand, n, obs, n_obs, bnd, r, two_r, tol):
                            lo = lam
                            for i in range(n):
                                best[i, 0] = cand[i, 0]
                                best[i, 1] = cand[i, 1]
                        else:
                            hi = lam
                    for i in range(n):
                        x[i, 0] = best[i, 0]
                        x[i, 1] = best[i, 1]
            tmp = cur
            cur = x
            x = tmp
            tmp_arr = cur_arr
            cur_arr = x_arr
            x_arr = tmp_arr
            if substep_out is not None:
                substep_out[s_idx] = cur_arr
    finally:
        free(cells)
        free(pairs)
    return cur_arr.copy(), stalls
