"""Privileged expert: A* on the global map, PD tracking, demonstration collection."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path as FsPath

import numpy as np

from .nets import encode_goal
from .planning import Path, plan_astar
from .voxgrid import (CameraIntrinsics, CameraPose, GridSpec, VoxelGrid, depth_to_grid,
                      egocentric_crop, grid_from_bytes, grid_nbytes, grid_to_bytes,
                      raycast_depth)
from .world import (EpisodeConfig, RobotLimits, RobotState, Scene, Status, episode_status,
                    sample_start_goal, step_kinematics, wrap_angle)

OBSERVATION_MODES = ("gt_depth_grid", "omniscient_crop")
DATASET_VERSION = 1
_FRAME_TAIL = struct.Struct("<8f")


class DataCollectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PDGains:
    kp: float = 2.0
    kd: float = 0.1
    lookahead: float = 0.5
    theta_slow: float = math.pi / 3  # slower arcs at large heading error keep clear of nearby walls
    replan_every: int = 15


def lookahead_point(path_xy: np.ndarray, x: float, y: float, distance: float) -> np.ndarray:
    """Point ``distance`` meters further along the polyline than its closest point to (x, y)."""
    if len(path_xy) == 1:
        return path_xy[0]
    a, b = path_xy[:-1], path_xy[1:]
    seg = b - a
    seg_len = np.linalg.norm(seg, axis=1)
    p = np.array([x, y])
    t = np.clip(((p - a) * seg).sum(axis=1) / np.maximum(seg_len**2, 1e-12), 0.0, 1.0)
    proj = a + t[:, None] * seg
    k = int(np.argmin(np.linalg.norm(proj - p, axis=1)))
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = min(cum[k] + t[k] * seg_len[k] + distance, cum[-1])
    j = min(int(np.searchsorted(cum, s, side="right")) - 1, len(seg) - 1)
    frac = (s - cum[j]) / seg_len[j] if seg_len[j] > 0 else 0.0
    return a[j] + frac * seg[j]


def pd_control(state: RobotState, path: Path | np.ndarray, prev_heading_error: float,
               gains: PDGains = PDGains(), limits: RobotLimits = RobotLimits(),
               dt: float = 1.0 / 30.0):
    """PD heading control toward a lookahead waypoint.

    Returns ``((v, w), heading_error)``; feed the error back on the next call.
    """
    xy = path.waypoints if isinstance(path, Path) else np.asarray(path, dtype=float)
    if len(xy) == 0:
        raise ValueError("empty path")
    tx, ty = lookahead_point(xy, state.x, state.y, gains.lookahead)
    e = wrap_angle(math.atan2(ty - state.y, tx - state.x) - state.heading)
    w = gains.kp * e + gains.kd * (e - prev_heading_error) / dt
    w = min(max(w, -limits.w_max), limits.w_max)
    v = limits.v_max * max(0.0, 1.0 - abs(e) / gains.theta_slow)
    return (v, w), e


def observe(scene: Scene, state: RobotState, spec: GridSpec, mode: str = "gt_depth_grid",
            intrinsics: CameraIntrinsics | None = None) -> VoxelGrid:
    """Egocentric grid seen from the robot's camera."""
    pose = CameraPose(state.x, state.y, state.heading, scene.limits.camera_height)
    if mode == "gt_depth_grid":
        intr = intrinsics or CameraIntrinsics(max_range=spec.n_z * spec.l_v)
        return depth_to_grid(raycast_depth(scene.world_grid, pose, intr), spec)
    if mode == "omniscient_crop":
        return egocentric_crop(scene.world_grid, pose, spec)
    raise ValueError(f"unknown observation mode {mode!r}")


class ExpertAgent:
    """Tracks an A* path on the inflated global map, replanning periodically."""

    label = "expert"

    def __init__(self, scene: Scene, goal, gains: PDGains = PDGains(), dt: float = 1.0 / 30.0):
        self.scene = scene
        self.goal = tuple(goal)
        self.gains = gains
        self.dt = dt
        self.path = None
        self.prev_error = 0.0
        self.steps = 0

    def _replan(self, state: RobotState):
        sc = self.scene
        start = sc.cell_of(state.x, state.y)
        if not (0 <= start[0] < sc.plan_map.shape[0] and 0 <= start[1] < sc.plan_map.shape[1]) \
                or sc.plan_map[start]:
            # drifted into the inflation band: plan from the nearest feasible cell
            free = sc.free_cells
            d = np.hypot((free[:, 0] + 0.5) * sc.cell_size - state.x,
                         (free[:, 1] + 0.5) * sc.cell_size - state.y)
            start = tuple(int(v) for v in free[int(np.argmin(d))])
        path = plan_astar(sc.plan_map, start, sc.cell_of(*self.goal), sc.cell_size)
        xy = path.waypoints
        xy[-1] = self.goal
        self.path = xy

    def act(self, state: RobotState, observation=None):
        if self.path is None or self.steps % self.gains.replan_every == 0:
            self._replan(state)
        self.steps += 1
        action, self.prev_error = pd_control(state, self.path, self.prev_error, self.gains,
                                             self.scene.limits, self.dt)
        return action


@dataclass(eq=False)
class Demonstration:
    scene_id: str
    spec: GridSpec
    grids: np.ndarray  # (T, packed bytes) uint8, voxgrid serialization
    goals: np.ndarray  # (T, 3) float32
    actions: np.ndarray  # (T, 2) float32
    poses: np.ndarray  # (T, 3) float32
    outcome: Status

    def __len__(self):
        return len(self.goals)

    def grid_array(self) -> np.ndarray:
        """Unpacked observations, (T, n_x, n_y, n_z) bool."""
        return np.stack([grid_from_bytes(row.tobytes()).cells for row in self.grids]) \
            if len(self) else np.zeros((0,) + self.spec.shape, dtype=bool)


@dataclass(eq=False)
class Dataset:
    spec: GridSpec
    seed: int
    observation_mode: str
    scene_ids: list
    demos: list

    def __len__(self):
        return len(self.demos)

    @property
    def frame_count(self) -> int:
        return sum(len(d) for d in self.demos)


def episode_seed(seed: int, scene_id: str, index: int, attempt: int = 0) -> np.random.Generator:
    """Per-episode stream, independent of collection order."""
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode()), index, attempt])


def run_expert_episode(scene: Scene, rng, spec: GridSpec, mode: str = "gt_depth_grid",
                       success_radius: float = 0.36, max_steps: int = 500,
                       gains: PDGains = PDGains(), dt: float = 1.0 / 30.0,
                       intrinsics: CameraIntrinsics | None = None) -> Demonstration:
    sg = sample_start_goal(scene, rng)
    config = EpisodeConfig(sg.goal, success_radius, max_steps, dt)
    agent = ExpertAgent(scene, sg.goal, gains, dt)
    state = sg.start
    grids, goals, actions, poses = [], [], [], []
    step = 0
    while True:
        status = episode_status(scene, state, config, step)
        if status is not Status.RUNNING:
            break
        obs = observe(scene, state, spec, mode, intrinsics)
        g = encode_goal(state.pose, sg.goal)
        action = agent.act(state)
        grids.append(np.frombuffer(grid_to_bytes(obs), dtype=np.uint8))
        goals.append((g.d, g.cos_theta, g.sin_theta))
        actions.append(action)
        poses.append(state.pose)
        state = step_kinematics(state, action, dt, scene.limits)
        step += 1
    nbytes = grid_nbytes(spec)
    return Demonstration(
        scene.id, spec,
        np.array(grids, dtype=np.uint8).reshape(-1, nbytes),
        np.array(goals, dtype=np.float32).reshape(-1, 3),
        np.array(actions, dtype=np.float32).reshape(-1, 2),
        np.array(poses, dtype=np.float32).reshape(-1, 3),
        status,
    )


def _collect_one(args):
    scene, index, seed, spec, mode, max_attempts, kwargs = args
    failures = 0
    for attempt in range(max_attempts):
        demo = run_expert_episode(scene, episode_seed(seed, scene.id, index, attempt), spec,
                                  mode, **kwargs)
        if demo.outcome is Status.SUCCESS:
            return demo, failures
        failures += 1
    return None, failures


def collect_demonstrations(scenes, per_scene_count: int, seed: int = 0,
                           observation_mode: str = "gt_depth_grid",
                           spec: GridSpec = GridSpec.cubic(64), workers: int = 1,
                           max_attempts: int = 5, max_failure_rate: float = 0.2,
                           **episode_kwargs) -> Dataset:
    """Successful expert trajectories, ``per_scene_count`` per scene.

    Failed rollouts (collision or timeout) are discarded and resampled with
    the next attempt index.
    """
    if per_scene_count < 1:
        raise ValueError("per_scene_count must be >= 1")
    if observation_mode not in OBSERVATION_MODES:
        raise ValueError(f"unknown observation mode {observation_mode!r}")
    tasks = [(sc, i, seed, spec, observation_mode, max_attempts, episode_kwargs)
             for sc in scenes for i in range(per_scene_count)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_collect_one, tasks, chunksize=1))
    else:
        results = [_collect_one(t) for t in tasks]

    demos = []
    for k, sc in enumerate(scenes):
        chunk = results[k * per_scene_count:(k + 1) * per_scene_count]
        failures = sum(f for _, f in chunk)
        rate = failures / (failures + per_scene_count)
        if rate > max_failure_rate or any(d is None for d, _ in chunk):
            raise DataCollectionError(
                f"expert failure rate {rate:.2f} on scene {sc.id} exceeds {max_failure_rate}")
        demos.extend(d for d, _ in chunk)
    return Dataset(spec, seed, observation_mode, [sc.id for sc in scenes], demos)


# --- on-disk layout ---

def _record_bytes(demo: Demonstration) -> bytes:
    out = bytearray()
    for i in range(len(demo)):
        payload = demo.grids[i].tobytes() + _FRAME_TAIL.pack(
            *demo.goals[i], *demo.actions[i], *demo.poses[i])
        out += struct.pack("<I", len(payload)) + payload
    return bytes(out)


def save_dataset(dataset: Dataset, directory) -> FsPath:
    directory = FsPath(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    for i, demo in enumerate(dataset.demos):
        name = f"traj_{i:05d}.bin"
        blob = _record_bytes(demo)
        (directory / name).write_bytes(blob)
        index.append({"file": name, "scene_id": demo.scene_id, "frames": len(demo),
                      "outcome": demo.outcome.value, "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "version": DATASET_VERSION,
        "seed": dataset.seed,
        "observation_mode": dataset.observation_mode,
        "grid_spec": asdict(dataset.spec),
        "scenes": dataset.scene_ids,
        "trajectories": index,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_dataset(directory) -> Dataset:
    directory = FsPath(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')}")
    spec = GridSpec(**manifest["grid_spec"])
    nbytes = grid_nbytes(spec)
    demos = []
    for entry in manifest["trajectories"]:
        blob = (directory / entry["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise ValueError(f"{entry['file']}: checksum mismatch")
        grids, tails, pos = [], [], 0
        while pos < len(blob):
            if pos + 4 > len(blob):
                raise ValueError(f"{entry['file']}: truncated record header")
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            if n != nbytes + _FRAME_TAIL.size or pos + n > len(blob):
                raise ValueError(f"{entry['file']}: corrupt frame record")
            grids.append(np.frombuffer(blob, np.uint8, nbytes, pos))
            tails.append(_FRAME_TAIL.unpack_from(blob, pos + nbytes))
            pos += n
        tails = np.array(tails, dtype=np.float32).reshape(-1, 8)
        demos.append(Demonstration(
            entry["scene_id"], spec, np.array(grids, dtype=np.uint8).reshape(-1, nbytes),
            tails[:, 0:3], tails[:, 3:5], tails[:, 5:8], Status(entry["outcome"])))
    return Dataset(spec, manifest["seed"], manifest["observation_mode"], manifest["scenes"], demos)
