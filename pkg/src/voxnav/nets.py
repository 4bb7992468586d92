"""Navigation policy, perception proxy and the depth-noise model that feeds it."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (BatchNorm1d, Conv3d, ConvTranspose3d, Flatten, Layer, Linear, ReLU,
                     Sequential, Sigmoid)
from .voxgrid import GridSpec, ProbGrid, ShapeError, VoxelGrid

H_O = 256
H_G = 16
DEFAULT_CHANNELS = (4, 8, 6, 32)
DEFAULT_HIDDEN = (128, 64, 32)


@dataclass(frozen=True)
class PointGoal:
    d: float
    cos_theta: float
    sin_theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.cos_theta, self.sin_theta], dtype=np.float32)


def encode_goal(robot_pose, goal_point) -> PointGoal:
    """Goal as (distance, cos, sin) of its bearing relative to the heading."""
    x, y, heading = robot_pose
    dx, dy = goal_point[0] - x, goal_point[1] - y
    d = math.hypot(dx, dy)
    if d == 0.0:
        return PointGoal(0.0, 1.0, 0.0)
    theta = math.atan2(dy, dx) - heading
    return PointGoal(d, math.cos(theta), math.sin(theta))


def encoder_geometry(n: int, channels=DEFAULT_CHANNELS):
    """(c_in, c_out, k, stride, padding) per obstacle-encoder layer.

    Layers with spatial size >= 2 use k=4, s=2, p=1 and halve it; once the
    volume is a single voxel, k=3, s=1, p=1 keeps it there.
    """
    layers, c_in, size = [], 1, n
    for c_out in channels:
        if size >= 2:
            layers.append((c_in, c_out, 4, 2, 1))
            size //= 2
        else:
            layers.append((c_in, c_out, 3, 1, 1))
        c_in = c_out
    return layers, size


def _as_float(a):
    """Keep floating inputs as they are (float64 for gradient checks), else float32."""
    a = np.asarray(a)
    return a if a.dtype.kind == "f" else a.astype(np.float32)


def _as_volume(grids, n):
    x = _as_float(grids)
    if x.ndim == 4:
        x = x[:, None]
    if x.ndim != 5 or x.shape[1:] != (1, n, n, n):
        raise ShapeError(f"expected grids of shape (N, {n}, {n}, {n}), got {x.shape}")
    return x


class PolicyNet(Layer):
    """Obstacle encoder + goal encoder + MLP head predicting (v, w)."""

    name = "policy"

    def __init__(self, grid_n: int = 64, channels=DEFAULT_CHANNELS, hidden=DEFAULT_HIDDEN,
                 seed: int = 0):
        rng = np.random.default_rng(seed)
        self.grid_n = grid_n
        self.channels = tuple(channels)
        self.hidden = tuple(hidden)
        geom, size = encoder_geometry(grid_n, channels)
        enc = []
        for i, (ci, co, k, s, p) in enumerate(geom):
            enc.append(Conv3d(ci, co, k, s, p, rng=rng))
            if i < len(geom) - 1:
                enc.append(ReLU())
        enc += [Flatten(), Linear(channels[-1] * size ** 3, H_O, rng=rng)]
        self.encoder = Sequential(*enc)
        self.goal_encoder = Sequential(Linear(3, H_G, rng=rng), ReLU())
        head, width = [], H_O + H_G
        for h in hidden:
            head += [Linear(width, h, rng=rng), BatchNorm1d(h), ReLU()]
            width = h
        head.append(Linear(width, 2, rng=rng))
        self.head = Sequential(*head)
        self.input_shape = (1, grid_n, grid_n, grid_n)

    def _parts(self):
        return (("encoder.", self.encoder), ("goal.", self.goal_encoder), ("head.", self.head))

    def params(self):
        return {pre + k: v for pre, m in self._parts() for k, v in m.params().items()}

    def buffers(self):
        return {pre + k: v for pre, m in self._parts() for k, v in m.buffers().items()}

    def geometry(self):
        return {"network": self.name, "grid_n": self.grid_n, "channels": list(self.channels),
                "hidden": list(self.hidden)}

    def cost(self, shape=None):
        m1, p1, _ = self.encoder.cost(self.input_shape)
        m2, p2, _ = self.goal_encoder.cost((3,))
        m3, p3, _ = self.head.cost((H_O + H_G,))
        return m1 + m2 + m3, p1 + p2 + p3, (2,)

    def obstacle_features(self, grids, train=False):
        return self.encoder.forward(_as_volume(grids, self.grid_n), train)

    def goal_features(self, goals, train=False):
        return self.goal_encoder.forward(_as_float(goals).reshape(-1, 3), train)

    def forward(self, grids, goals, train=False):
        h_o = self.obstacle_features(grids, train)
        h_g = self.goal_features(goals, train)
        return self.head.forward(np.concatenate([h_o, h_g], axis=1), train)

    def backward(self, grad):
        """Accumulates parameter gradients; returns d/d(grid input), (N, 1, n, n, n)."""
        g = self.head.backward(grad)
        self.goal_encoder.backward(g[:, H_O:])
        return self.encoder.backward(np.ascontiguousarray(g[:, :H_O]))


class ProxyNet(Sequential):
    """Voxel-to-voxel denoiser producing occupancy probabilities."""

    name = "proxy"

    def __init__(self, grid_n: int = 64, seed: int = 0):
        if grid_n < 4 or grid_n % 4:
            raise ShapeError("proxy grid size must be a multiple of 4")
        rng = np.random.default_rng(seed)
        super().__init__(
            Conv3d(1, 8, 4, 2, 1, rng=rng), ReLU(),
            Conv3d(8, 16, 4, 2, 1, rng=rng), ReLU(),
            ConvTranspose3d(16, 8, 4, 2, 1, rng=rng), ReLU(),
            ConvTranspose3d(8, 1, 4, 2, 1, rng=rng), Sigmoid(),
        )
        self.grid_n = grid_n
        self.input_shape = (1, grid_n, grid_n, grid_n)

    def geometry(self):
        return {"network": self.name, "grid_n": self.grid_n}

    def forward(self, grids, train=False):
        return super().forward(_as_volume(grids, self.grid_n), train)


def build_network(geometry: dict) -> Layer:
    """Reconstruct an untrained network from a checkpoint geometry block."""
    kind = geometry.get("network")
    if kind == PolicyNet.name:
        return PolicyNet(geometry["grid_n"], geometry["channels"], geometry["hidden"])
    if kind == ProxyNet.name:
        return ProxyNet(geometry["grid_n"])
    raise ValueError(f"unknown network {kind!r}")


def policy_forward(net: PolicyNet, grid, goal: PointGoal, mode: str = "eval") -> tuple[float, float]:
    """Single-observation action; ``grid`` is a VoxelGrid or ProbGrid."""
    if grid.spec.shape != (net.grid_n,) * 3:
        raise ShapeError(f"grid {grid.spec.shape} does not match policy size {net.grid_n}")
    out = net.forward(grid.cells[None].astype(np.float32), goal.as_array()[None],
                      train=(mode == "train"))
    return float(out[0, 0]), float(out[0, 1])


def proxy_forward(net: ProxyNet, noisy: VoxelGrid) -> ProbGrid:
    if noisy.spec.shape != (net.grid_n,) * 3:
        raise ShapeError(f"grid {noisy.spec.shape} does not match proxy size {net.grid_n}")
    out = net.forward(noisy.cells[None].astype(np.float32))
    return ProbGrid(noisy.spec, out[0, 0])


@dataclass(frozen=True)
class NoiseModel:
    """Range-dependent dropout of occupied voxels plus uniform clutter."""

    p_drop0: float = 0.1
    p_drop_range: float = 0.3
    p_add: float = 0.01

    def __post_init__(self):
        for v in (self.p_drop0, self.p_drop_range, self.p_add):
            if not 0 <= v <= 1:
                raise ValueError(f"noise probabilities must lie in [0, 1]: {self}")


def corrupt_cells(cells: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Corrupt one boolean (n_x, n_y, n_z) array."""
    nz = cells.shape[2]
    z = np.arange(nz) / max(nz - 1, 1)
    p_drop = np.clip(noise.p_drop0 + noise.p_drop_range * z, 0.0, 1.0)
    u = rng.random(cells.shape)
    drop = cells & (u < p_drop[None, None, :])
    add = ~cells & (u < noise.p_add)
    return (cells & ~drop) | add


def corrupt_grid(clean: VoxelGrid, noise: NoiseModel, seed) -> VoxelGrid:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return VoxelGrid(clean.spec, corrupt_cells(clean.cells, noise, rng))


def policy_spec(grid_n: int, extent: float = 6.4) -> GridSpec:
    return GridSpec.cubic(grid_n, extent)
