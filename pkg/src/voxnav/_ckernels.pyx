# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: voxel ray traversal and 8-connected grid A*.

Both routines mirror ``_pykernels`` operation for operation so the two
backends return bit-identical results.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs, sqrt, INFINITY
from libcpp.queue cimport priority_queue
from libcpp.pair cimport pair
from libcpp.vector cimport vector

cnp.import_array()

ctypedef long long i64
ctypedef pair[double, i64] entry


def raycast(const unsigned char[:, :, ::1] occ, double[::1] origin,
            double[:, ::1] dirs, double voxel, double max_range):
    """Distance along each unit direction to the first occupied voxel.

    Rays that leave the volume or exceed ``max_range`` get ``inf``.
    """
    cdef Py_ssize_t n = dirs.shape[0]
    cdef int nx = occ.shape[0], ny = occ.shape[1], nz = occ.shape[2]
    out_arr = np.full(n, np.inf, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t r
    cdef int a, i0, i1, i2, s0, s1, s2
    cdef double t, d, tm0, tm1, tm2, td0, td1, td2
    cdef double o0 = origin[0], o1 = origin[1], o2 = origin[2]
    cdef int b0 = <int>floor(o0 / voxel)
    cdef int b1 = <int>floor(o1 / voxel)
    cdef int b2 = <int>floor(o2 / voxel)

    for r in range(n):
        i0 = b0
        i1 = b1
        i2 = b2
        d = dirs[r, 0]
        if d > 0:
            s0 = 1
            tm0 = ((i0 + 1) * voxel - o0) / d
            td0 = voxel / d
        elif d < 0:
            s0 = -1
            tm0 = (i0 * voxel - o0) / d
            td0 = -voxel / d
        else:
            s0 = 0
            tm0 = INFINITY
            td0 = INFINITY
        d = dirs[r, 1]
        if d > 0:
            s1 = 1
            tm1 = ((i1 + 1) * voxel - o1) / d
            td1 = voxel / d
        elif d < 0:
            s1 = -1
            tm1 = (i1 * voxel - o1) / d
            td1 = -voxel / d
        else:
            s1 = 0
            tm1 = INFINITY
            td1 = INFINITY
        d = dirs[r, 2]
        if d > 0:
            s2 = 1
            tm2 = ((i2 + 1) * voxel - o2) / d
            td2 = voxel / d
        elif d < 0:
            s2 = -1
            tm2 = (i2 * voxel - o2) / d
            td2 = -voxel / d
        else:
            s2 = 0
            tm2 = INFINITY
            td2 = INFINITY

        while True:
            if tm0 <= tm1 and tm0 <= tm2:
                t = tm0
                if t > max_range:
                    break
                i0 += s0
                if i0 < 0 or i0 >= nx:
                    break
                tm0 += td0
            elif tm1 <= tm2:
                t = tm1
                if t > max_range:
                    break
                i1 += s1
                if i1 < 0 or i1 >= ny:
                    break
                tm1 += td1
            else:
                t = tm2
                if t > max_range:
                    break
                i2 += s2
                if i2 < 0 or i2 >= nz:
                    break
                tm2 += td2
            if occ[i0, i1, i2]:
                out[r] = t
                break
    return out_arr


cdef int[8] DX = [1, -1, 0, 0, 1, 1, -1, -1]
cdef int[8] DY = [0, 0, 1, -1, 1, -1, 1, -1]


cdef inline double octile(int x, int y, int gx, int gy, double sqrt2):
    cdef double dx = fabs(<double>(x - gx))
    cdef double dy = fabs(<double>(y - gy))
    return (dx + dy) + (sqrt2 - 2.0) * (dx if dx < dy else dy)


def astar(const unsigned char[:, ::1] blocked, int sx, int sy, int gx, int gy):
    """Cells of a minimum-cost 8-connected path, or None when unreachable."""
    cdef int w = blocked.shape[0], h = blocked.shape[1]
    cdef double sqrt2 = sqrt(2.0)
    g_arr = np.full((w, h), np.inf, dtype=np.float64)
    parent_arr = np.full((w, h), -1, dtype=np.int64)
    closed_arr = np.zeros((w, h), dtype=np.uint8)
    cdef double[:, ::1] g = g_arr
    cdef long long[:, ::1] parent = parent_arr
    cdef unsigned char[:, ::1] closed = closed_arr
    cdef priority_queue[entry] heap
    cdef vector[i64] entry_node
    cdef long long counter = 0
    cdef long long cur
    cdef int x, y, k, nx_, ny_
    cdef double ng, step
    cdef bint found = False

    g[sx, sy] = 0.0
    heap.push(entry(-octile(sx, sy, gx, gy, sqrt2), -counter))
    entry_node.push_back(<long long>sx * h + sy)
    counter += 1

    while not heap.empty():
        cur = entry_node[-heap.top().second]
        heap.pop()
        x = <int>(cur // h)
        y = <int>(cur % h)
        if closed[x, y]:
            continue
        if x == gx and y == gy:
            found = True
            break
        closed[x, y] = 1
        for k in range(8):
            nx_ = x + DX[k]
            ny_ = y + DY[k]
            if nx_ < 0 or nx_ >= w or ny_ < 0 or ny_ >= h:
                continue
            if blocked[nx_, ny_] or closed[nx_, ny_]:
                continue
            if k >= 4:
                if blocked[nx_, y] or blocked[x, ny_]:
                    continue
                step = sqrt2
            else:
                step = 1.0
            ng = g[x, y] + step
            if ng < g[nx_, ny_]:
                g[nx_, ny_] = ng
                parent[nx_, ny_] = cur
                heap.push(entry(
                    -(ng + octile(nx_, ny_, gx, gy, sqrt2)), -counter))
                entry_node.push_back(<long long>nx_ * h + ny_)
                counter += 1

    if not found:
        return None
    cells = []
    cur = <long long>gx * h + gy
    while cur != -1:
        cells.append((cur // h, cur % h))
        cur = parent[cur // h, cur % h]
    cells.reverse()
    return np.asarray(cells, dtype=np.int64)


ctypedef fused real:
    float
    double


def im2col(real[:, :, :, :, ::1] xp, int k, int s, int od, int oh, int ow):
    """Patch matrix (C*k^3, N*od*oh*ow); row = (channel, kd, kh, kw)."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    dtype = np.float32 if real is float else np.float64
    out = np.empty((c * k * k * k, n * od * oh * ow), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t ci, ni, a, b, e, d, h, w, row, col
    with nogil:
        for ci in range(c):
            for a in range(k):
                for b in range(k):
                    for e in range(k):
                        row = ((ci * k + a) * k + b) * k + e
                        col = 0
                        for ni in range(n):
                            for d in range(od):
                                for h in range(oh):
                                    for w in range(ow):
                                        cols[row, col] = xp[ni, ci, a + s * d, b + s * h, e + s * w]
                                        col += 1
    return out


def col2im(real[:, ::1] cols, int n, int c, int dp, int hp, int wp, int k, int s,
           int od, int oh, int ow):
    """Scatter-add of a patch matrix back into a padded volume.

    Kernel offsets are accumulated in increasing (kd, kh, kw) order per
    element, matching the numpy fallback.
    """
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, c, dp, hp, wp), dtype=dtype)
    cdef real[:, :, :, :, ::1] xp = out
    cdef Py_ssize_t ci, ni, a, b, e, d, h, w, row, col
    with nogil:
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    for ci in range(c):
                        row = ((ci * k + a) * k + b) * k + e
                        col = 0
                        for ni in range(n):
                            for d in range(od):
                                for h in range(oh):
                                    for w in range(ow):
                                        xp[ni, ci, a + s * d, b + s * h, e + s * w] += cols[row, col]
                                        col += 1
    return out
