"""Procedural scenes, unicycle kinematics, collisions and episode termination."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path as FsPath

import numpy as np

from .planning import geodesic_field, inflate_occupancy, largest_component, plan_astar
from .voxgrid import GridSpec, VoxelGrid, grid_from_bytes, grid_to_bytes, project_to_floor

LAYOUTS = ("clutter", "rooms", "maze")


class SceneGenerationError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RobotLimits:
    v_max: float = 0.5
    w_max: float = 1.0
    radius: float = 0.18
    height: float = 1.2
    camera_height: float = 0.5


DEFAULT_LIMITS = RobotLimits()


@dataclass(frozen=True)
class SceneParams:
    size: float = 8.0
    obstacle_density: float = 0.08
    layout: str = "clutter"
    cell_size: float = 0.1
    obstacle_height: float = 1.6
    # clearance added to the robot radius when inflating for planning/sampling
    plan_margin: float = 0.12


@dataclass(frozen=True, eq=False)
class Scene:
    id: str
    seed: int
    params: SceneParams
    world_grid: VoxelGrid
    floor_map: np.ndarray
    plan_map: np.ndarray  # inflated obstacles the expert plans against
    free_mask: np.ndarray  # feasible start/goal cells
    limits: RobotLimits = DEFAULT_LIMITS

    @property
    def cell_size(self) -> float:
        return self.world_grid.spec.l_v

    @property
    def free_cells(self) -> np.ndarray:
        return np.argwhere(self.free_mask)

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def cell_center(self, cell) -> tuple[float, float]:
        return ((cell[0] + 0.5) * self.cell_size, (cell[1] + 0.5) * self.cell_size)


def scene_from_floor(floor_map: np.ndarray, params: SceneParams, seed: int = 0,
                     scene_id: str | None = None, limits: RobotLimits = DEFAULT_LIMITS,
                     free_mask: np.ndarray | None = None) -> Scene:
    """Extrude a 2D obstacle map into a scene."""
    floor = np.asarray(floor_map, dtype=bool)
    c = params.cell_size
    layers = int(round(params.obstacle_height / c))
    cells = np.repeat(floor[:, None, :], layers, axis=1)
    world = VoxelGrid(GridSpec(floor.shape[0], layers, floor.shape[1], c), cells)
    floor = project_to_floor(world, limits.height)
    plan_map = inflate_occupancy(floor, limits.radius + params.plan_margin, c)
    if free_mask is None:
        free_mask = largest_component(~plan_map)
    sid = scene_id or f"{params.layout}-{seed}"
    return Scene(sid, seed, params, world, floor, plan_map, np.asarray(free_mask, dtype=bool), limits)


def _box(occ, rng, c, lo_m, hi_m):
    w, h = occ.shape
    sx = max(1, int(round(rng.uniform(lo_m, hi_m) / c)))
    sy = max(1, int(round(rng.uniform(lo_m, hi_m) / c)))
    x = int(rng.integers(0, w - sx + 1))
    y = int(rng.integers(0, h - sy + 1))
    occ[x:x + sx, y:y + sy] = True


def _pillar(occ, rng, c, r_lo, r_hi):
    w, h = occ.shape
    r = rng.uniform(r_lo, r_hi) / c
    cx, cy = rng.uniform(0, w), rng.uniform(0, h)
    xs = np.arange(w)[:, None] + 0.5
    ys = np.arange(h)[None, :] + 0.5
    occ |= (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r


def _rooms(occ, rng, n, wall):
    """2x2 rooms with a 1 m door in each wall segment."""
    door = 10
    mx = int(rng.integers(n // 3, 2 * n // 3))
    my = int(rng.integers(n // 3, 2 * n // 3))
    occ[mx:mx + wall, :] = True
    occ[:, my:my + wall] = True
    for lo, hi in ((wall, my), (my + wall, n - wall)):
        d = int(rng.integers(lo + 1, max(lo + 2, hi - door - 1)))
        occ[mx:mx + wall, d:d + door] = False
    for lo, hi in ((wall, mx), (mx + wall, n - wall)):
        d = int(rng.integers(lo + 1, max(lo + 2, hi - door - 1)))
        occ[d:d + door, my:my + wall] = False


def _maze(occ, rng, n, wall):
    """Perfect maze on a coarse lattice with passages of roughly 1.6 m."""
    k = max(2, (n - wall) // 16)
    pitch = (n - wall) // k
    for i in range(k + 1):
        occ[i * pitch:i * pitch + wall, :] = True
        occ[:, i * pitch:i * pitch + wall] = True
    seen = np.zeros((k, k), dtype=bool)
    stack = [(0, 0)]
    seen[0, 0] = True
    while stack:
        x, y = stack[-1]
        nbrs = [(x + dx, y + dy) for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1))
                if 0 <= x + dx < k and 0 <= y + dy < k and not seen[x + dx, y + dy]]
        if not nbrs:
            stack.pop()
            continue
        nx, ny = nbrs[int(rng.integers(len(nbrs)))]
        seen[nx, ny] = True
        if nx != x:
            wx = max(x, nx) * pitch
            occ[wx:wx + wall, y * pitch + wall:(y + 1) * pitch] = False
        else:
            wy = max(y, ny) * pitch
            occ[x * pitch + wall:(x + 1) * pitch, wy:wy + wall] = False
        stack.append((nx, ny))


def generate_scene(params: SceneParams = SceneParams(), seed: int = 0,
                   limits: RobotLimits = DEFAULT_LIMITS, max_retries: int = 20,
                   scene_id: str | None = None) -> Scene:
    """Deterministic procedural scene with boundary walls.

    Raises SceneGenerationError if no attempt leaves a connected free region
    covering at least 30% of the floor.
    """
    if not 0 <= params.obstacle_density <= 0.5:
        raise ValueError("obstacle_density must lie in [0, 0.5]")
    if params.layout not in LAYOUTS:
        raise ValueError(f"unknown layout {params.layout!r}")
    c = params.cell_size
    n = int(round(params.size / c))
    wall = 2
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        occ = np.zeros((n, n), dtype=bool)
        if params.layout == "rooms":
            _rooms(occ, rng, n, wall // 2 or 1)
        elif params.layout == "maze":
            _maze(occ, rng, n, wall // 2 or 1)
        target = params.obstacle_density * n * n
        guard = 0
        while occ.sum() < target and guard < 10_000:
            guard += 1
            if rng.random() < 0.6:
                _box(occ, rng, c, 0.2, 0.8)
            else:
                _pillar(occ, rng, c, 0.1, 0.3)
        occ[:wall, :] = occ[-wall:, :] = True
        occ[:, :wall] = occ[:, -wall:] = True
        scene = scene_from_floor(occ, params, seed, scene_id, limits)
        if scene.free_mask.sum() >= 0.3 * n * n:
            return scene
    raise SceneGenerationError(
        f"no feasible layout for {params} with seed {seed} after {max_retries} attempts")


def save_scene(scene: Scene, directory) -> FsPath:
    """Write ``<id>.json`` (manifest) and ``<id>.grid`` (binary world grid)."""
    directory = FsPath(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = directory / f"{scene.id}.grid"
    blob.write_bytes(grid_to_bytes(scene.world_grid))
    manifest = {
        "id": scene.id,
        "seed": scene.seed,
        "dims": list(scene.world_grid.spec.shape),
        "cell_size": scene.cell_size,
        "layout": asdict(scene.params),
        "limits": asdict(scene.limits),
        "grid_file": blob.name,
    }
    path = directory / f"{scene.id}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_scene(path) -> Scene:
    path = FsPath(path)
    manifest = json.loads(path.read_text())
    params = SceneParams(**manifest["layout"])
    limits = RobotLimits(**manifest["limits"])
    grid = grid_from_bytes((path.parent / manifest["grid_file"]).read_bytes())
    floor = project_to_floor(grid, limits.height)
    scene = scene_from_floor(floor, replace(params, cell_size=grid.spec.l_v), manifest["seed"],
                             manifest["id"], limits)
    if scene.world_grid != grid:
        raise ValueError(f"{path}: world grid is not an extruded floor map")
    return scene


# --- robot state and kinematics ---

def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(theta, 2 * math.pi)
    return math.pi if w <= -math.pi else w


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    heading: float
    radius: float = DEFAULT_LIMITS.radius
    last_action: tuple[float, float] = (0.0, 0.0)

    @property
    def pose(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.heading)


@dataclass(frozen=True)
class EpisodeConfig:
    goal: tuple[float, float]
    success_radius: float = 0.36
    max_steps: int = 500
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        if self.success_radius <= 0 or self.max_steps < 1 or self.dt <= 0:
            raise ValueError(f"invalid episode config {self}")


class Status(enum.Enum):
    RUNNING = "running"
    SUCCESS = "success"
    COLLISION = "collision"
    TIMEOUT = "timeout"


def clamp_action(action, limits: RobotLimits = DEFAULT_LIMITS) -> tuple[float, float]:
    v, w = float(action[0]), float(action[1])
    v = min(max(v, 0.0), limits.v_max)
    w = min(max(w, -limits.w_max), limits.w_max)
    return v, w


def step_kinematics(state: RobotState, action, dt: float,
                    limits: RobotLimits = DEFAULT_LIMITS) -> RobotState:
    """Forward-Euler unicycle step with clamped commands."""
    v, w = clamp_action(action, limits)
    th = state.heading
    return replace(
        state,
        x=state.x + v * math.cos(th) * dt,
        y=state.y + v * math.sin(th) * dt,
        heading=wrap_angle(th + w * dt),
        last_action=(v, w),
    )


def check_collision(scene: Scene, state: RobotState) -> bool:
    """True iff an occupied floor cell lies within the robot disk, or out of bounds."""
    c = scene.cell_size
    w, h = scene.floor_map.shape
    x, y, r = state.x, state.y, state.radius
    if not (r <= x <= w * c - r and r <= y <= h * c - r):
        return True
    i0, i1 = int(math.floor((x - r) / c)), int(math.floor((x + r) / c))
    j0, j1 = int(math.floor((y - r) / c)), int(math.floor((y + r) / c))
    block = scene.floor_map[max(i0, 0):i1 + 1, max(j0, 0):j1 + 1]
    if not block.any():
        return False
    ii = np.arange(max(i0, 0), min(i1, w - 1) + 1)[:, None]
    jj = np.arange(max(j0, 0), min(j1, h - 1) + 1)[None, :]
    dx = np.maximum(np.maximum(ii * c - x, 0.0), x - (ii + 1) * c)
    dy = np.maximum(np.maximum(jj * c - y, 0.0), y - (jj + 1) * c)
    return bool(np.any(block & (dx * dx + dy * dy <= r * r)))


def episode_status(scene: Scene, state: RobotState, config: EpisodeConfig, step_count: int) -> Status:
    """Success beats collision beats timeout."""
    if math.hypot(state.x - config.goal[0], state.y - config.goal[1]) <= config.success_radius:
        return Status.SUCCESS
    if check_collision(scene, state):
        return Status.COLLISION
    if step_count >= config.max_steps:
        return Status.TIMEOUT
    return Status.RUNNING


@dataclass(frozen=True)
class StartGoal:
    start: RobotState
    goal: tuple[float, float]
    geodesic: float  # meters, A* on the planning map


def sample_start_goal(scene: Scene, seed, min_geo: float = 2.0, max_geo: float | None = 5.0,
                      max_tries: int = 50) -> StartGoal:
    """Random feasible start pose and goal point at geodesic distance in [min_geo, max_geo]."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    free = scene.free_cells
    if len(free) == 0:
        raise SamplingError(f"scene {scene.id} has no feasible cells")
    c = scene.cell_size
    for _ in range(max_tries):
        start = tuple(int(v) for v in free[int(rng.integers(len(free)))])
        dist = geodesic_field(scene.plan_map, start) * c
        ok = scene.free_mask & (dist >= min_geo - 1e-9)
        if max_geo is not None:
            ok &= dist <= max_geo + 1e-9
        cand = np.argwhere(ok)
        if len(cand) == 0:
            continue
        goal = tuple(int(v) for v in cand[int(rng.integers(len(cand)))])
        geo = plan_astar(scene.plan_map, start, goal, c).total_length
        heading = wrap_angle(float(rng.uniform(-math.pi, math.pi)))
        sx, sy = scene.cell_center(start)
        state = RobotState(sx, sy, heading, scene.limits.radius)
        return StartGoal(state, scene.cell_center(goal), geo)
    raise SamplingError(f"no start/goal pair with geodesic >= {min_geo} m in scene {scene.id}")
