"""2D occupancy utilities shared by the world and the expert.

Maps are boolean arrays indexed ``[ix, iy]`` (world X, world Y); cell
``(i, j)`` covers ``[i*c, (i+1)*c) x [j*c, (j+1)*c)``.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import kernels

SQRT2 = math.sqrt(2.0)


class NoPathError(RuntimeError):
    pass


def disk_offsets(radius_cells: float) -> np.ndarray:
    r = int(math.floor(radius_cells + 1e-9))
    d = np.arange(-r, r + 1)
    dx, dy = np.meshgrid(d, d, indexing="ij")
    keep = dx * dx + dy * dy <= radius_cells * radius_cells + 1e-9
    return np.stack([dx[keep], dy[keep]], axis=1)


def inflate_occupancy(floor_map: np.ndarray, radius: float, cell_size: float = 1.0) -> np.ndarray:
    """Dilate occupied cells by a Euclidean disk of ``radius`` meters (center to center)."""
    if radius < 0:
        raise ValueError("radius must be non-negative")
    occ = np.asarray(floor_map, dtype=bool)
    out = occ.copy()
    w, h = occ.shape
    for dx, dy in disk_offsets(radius / cell_size):
        if dx == 0 and dy == 0:
            continue
        src = occ[max(0, -dx):w - max(0, dx), max(0, -dy):h - max(0, dy)]
        out[max(0, dx):w - max(0, -dx), max(0, dy):h - max(0, -dy)] |= src
    return out


@dataclass(frozen=True, eq=False)
class Path:
    cells: np.ndarray  # (L, 2) int
    cell_size: float

    @property
    def waypoints(self) -> np.ndarray:
        return (self.cells + 0.5) * self.cell_size

    @property
    def moves(self) -> tuple[int, int]:
        """(straight, diagonal) move counts."""
        steps = np.abs(np.diff(self.cells, axis=0)).sum(axis=1)
        return int((steps == 1).sum()), int((steps == 2).sum())

    @property
    def cost(self) -> float:
        """Path cost in cell units."""
        straight, diagonal = self.moves
        return straight + SQRT2 * diagonal

    @property
    def total_length(self) -> float:
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        return float(seg.sum())


def plan_astar(blocked: np.ndarray, start: tuple[int, int], goal: tuple[int, int],
               cell_size: float = 1.0) -> Path:
    """Minimum-cost 8-connected path without corner cutting."""
    blocked = np.ascontiguousarray(blocked, dtype=np.uint8)
    for name, (x, y) in (("start", start), ("goal", goal)):
        if not (0 <= x < blocked.shape[0] and 0 <= y < blocked.shape[1]) or blocked[x, y]:
            raise NoPathError(f"{name} cell {(x, y)} is not free")
    cells = kernels.astar(blocked, int(start[0]), int(start[1]), int(goal[0]), int(goal[1]))
    if cells is None:
        raise NoPathError(f"no path from {start} to {goal}")
    return Path(cells, cell_size)


def geodesic_field(blocked: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Dijkstra cost (cell units) from ``start`` to every cell; inf if unreachable."""
    blocked = np.asarray(blocked, dtype=bool)
    w, h = blocked.shape
    blk = blocked.tolist()
    dist = [[math.inf] * h for _ in range(w)]
    dist[start[0]][start[1]] = 0.0
    heap = [(0.0, start[0], start[1])]
    moves = [(1, 0, 1.0), (-1, 0, 1.0), (0, 1, 1.0), (0, -1, 1.0),
             (1, 1, SQRT2), (1, -1, SQRT2), (-1, 1, SQRT2), (-1, -1, SQRT2)]
    while heap:
        d, x, y = heapq.heappop(heap)
        if d > dist[x][y]:
            continue
        for dx, dy, c in moves:
            nx, ny = x + dx, y + dy
            if not (0 <= nx < w and 0 <= ny < h) or blk[nx][ny]:
                continue
            if dx and dy and (blk[nx][y] or blk[x][ny]):
                continue
            nd = d + c
            if nd < dist[nx][ny]:
                dist[nx][ny] = nd
                heapq.heappush(heap, (nd, nx, ny))
    return np.array(dist)


def largest_component(free: np.ndarray) -> np.ndarray:
    """Mask of the largest 4-connected component of ``free``.

    4-connectivity equals reachability for the planner, which forbids
    diagonal moves past a blocked cardinal neighbor.
    """
    free = np.asarray(free, dtype=bool)
    labels = np.zeros(free.shape, dtype=np.int64)
    w, h = free.shape
    best, best_size, label = 0, 0, 0
    for x0, y0 in zip(*np.nonzero(free)):
        if labels[x0, y0]:
            continue
        label += 1
        labels[x0, y0] = label
        size = 0
        queue = deque([(x0, y0)])
        while queue:
            x, y = queue.popleft()
            size += 1
            for nx, ny in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
                if 0 <= nx < w and 0 <= ny < h and free[nx, ny] and not labels[nx, ny]:
                    labels[nx, ny] = label
                    queue.append((nx, ny))
        if size > best_size:
            best, best_size = label, size
    return labels == best if best else np.zeros_like(free)
