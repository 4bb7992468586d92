"""Pure numpy / heapq versions of the compiled kernels.

Every arithmetic step matches ``_ckernels.pyx`` so results agree bit for bit.
"""

import heapq
import math

import numpy as np

_DX = (1, -1, 0, 0, 1, 1, -1, -1)
_DY = (0, 0, 1, -1, 1, -1, 1, -1)


def raycast(occ, origin, dirs, voxel, max_range):
    """Distance along each unit direction to the first occupied voxel.

    Rays are marched together; each iteration advances every live ray by
    one voxel boundary.
    """
    occ = np.asarray(occ, dtype=np.uint8)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = dirs.shape[0]
    shape = np.array(occ.shape)
    out = np.full(n, np.inf)
    origin = np.asarray(origin, dtype=np.float64)
    base = np.floor(origin / voxel).astype(np.int64)

    idx = np.tile(base, (n, 1))
    step = np.zeros((n, 3), dtype=np.int64)
    tmax = np.full((n, 3), np.inf)
    tdelta = np.full((n, 3), np.inf)
    for a in range(3):
        d = dirs[:, a]
        pos = d > 0
        neg = d < 0
        step[pos, a] = 1
        step[neg, a] = -1
        tmax[pos, a] = ((base[a] + 1) * voxel - origin[a]) / d[pos]
        tmax[neg, a] = (base[a] * voxel - origin[a]) / d[neg]
        tdelta[pos, a] = voxel / d[pos]
        tdelta[neg, a] = -voxel / d[neg]

    live = np.arange(n)
    while live.size:
        tm = tmax[live]
        t0, t1, t2 = tm[:, 0], tm[:, 1], tm[:, 2]
        axis = np.where((t0 <= t1) & (t0 <= t2), 0, np.where(t1 <= t2, 1, 2))
        rows = np.arange(live.size)
        t = tm[rows, axis]
        alive = t <= max_range
        live, axis, t, rows = live[alive], axis[alive], t[alive], rows[alive]
        idx[live, axis] += step[live, axis]
        cell = idx[live]
        inside = np.all((cell >= 0) & (cell < shape), axis=1)
        live, axis, t, cell = live[inside], axis[inside], t[inside], cell[inside]
        tmax[live, axis] += tdelta[live, axis]
        hit = occ[cell[:, 0], cell[:, 1], cell[:, 2]] != 0
        out[live[hit]] = t[hit]
        live = live[~hit]
    return out


def _octile(x, y, gx, gy, sqrt2):
    dx = float(abs(x - gx))
    dy = float(abs(y - gy))
    return (dx + dy) + (sqrt2 - 2.0) * (dx if dx < dy else dy)


def astar(blocked, sx, sy, gx, gy):
    """Cells of a minimum-cost 8-connected path, or None when unreachable."""
    blocked = np.asarray(blocked, dtype=np.uint8)
    w, h = blocked.shape
    sqrt2 = math.sqrt(2.0)
    g = np.full((w, h), np.inf)
    parent = np.full((w, h), -1, dtype=np.int64)
    closed = np.zeros((w, h), dtype=bool)
    blk = blocked.tolist()

    g[sx, sy] = 0.0
    heap = [(_octile(sx, sy, gx, gy, sqrt2), 0, sx * h + sy)]
    counter = 1
    found = False
    while heap:
        _, _, cur = heapq.heappop(heap)
        x, y = divmod(cur, h)
        if closed[x, y]:
            continue
        if x == gx and y == gy:
            found = True
            break
        closed[x, y] = True
        gxy = g[x, y]
        for k in range(8):
            nx, ny = x + _DX[k], y + _DY[k]
            if nx < 0 or nx >= w or ny < 0 or ny >= h:
                continue
            if blk[nx][ny] or closed[nx, ny]:
                continue
            if k >= 4:
                if blk[nx][y] or blk[x][ny]:
                    continue
                step = sqrt2
            else:
                step = 1.0
            ng = gxy + step
            if ng < g[nx, ny]:
                g[nx, ny] = ng
                parent[nx, ny] = cur
                heapq.heappush(heap, (ng + _octile(nx, ny, gx, gy, sqrt2), counter, nx * h + ny))
                counter += 1

    if not found:
        return None
    cells = []
    cur = gx * h + gy
    while cur != -1:
        x, y = divmod(cur, h)
        cells.append((x, y))
        cur = parent[x, y]
    cells.reverse()
    return np.asarray(cells, dtype=np.int64)


def im2col(xp, k, s, od, oh, ow):
    """Patch matrix (C*k^3, N*od*oh*ow); row = (channel, kd, kh, kw)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k * k * k, n, od, oh, ow), dtype=xp.dtype)
    idx = 0
    for a in range(k):
        for b in range(k):
            for e in range(k):
                patch = xp[:, :, a:a + s * od:s, b:b + s * oh:s, e:e + s * ow:s]
                cols[:, idx] = patch.transpose(1, 0, 2, 3, 4)
                idx += 1
    return cols.reshape(c * k * k * k, n * od * oh * ow)


def col2im(cols, n, c, dp, hp, wp, k, s, od, oh, ow):
    """Scatter-add of a patch matrix back into a padded (n, c, dp, hp, wp) volume."""
    cols = cols.reshape(c, k * k * k, n, od, oh, ow)
    xp = np.zeros((n, c, dp, hp, wp), dtype=cols.dtype)
    idx = 0
    for a in range(k):
        for b in range(k):
            for e in range(k):
                xp[:, :, a:a + s * od:s, b:b + s * oh:s, e:e + s * ow:s] += \
                    cols[:, idx].transpose(1, 0, 2, 3, 4)
                idx += 1
    return xp
