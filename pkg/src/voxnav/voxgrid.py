"""Voxel occupancy grids, IoU losses and depth sensing.

Robot-centric grids use x left, y up, z forward with the origin at the
camera: x spans +-n_x*l_v/2, y spans +-n_y*l_v/2 around camera height and
z spans [0, n_z*l_v].  World grids share the same array layout with axes
(world X, height, world Y) and the origin at the world corner.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

SOFT_IOU_EPS = 1e-7
_OVERLAP_TOL = 1e-9
_HEADER = struct.Struct("<IIIf")


class ShapeError(ValueError):
    """Grids or tensors with incompatible geometry."""


class PoseError(ValueError):
    """Camera or robot pose outside the admissible region."""


@dataclass(frozen=True)
class GridSpec:
    n_x: int
    n_y: int
    n_z: int
    l_v: float = 0.1

    def __post_init__(self):
        if min(self.n_x, self.n_y, self.n_z) < 1:
            raise ShapeError(f"voxel counts must be >= 1, got {self.shape}")
        if not self.l_v > 0:
            raise ShapeError(f"voxel size must be positive, got {self.l_v}")

    @classmethod
    def cubic(cls, n: int, extent: float = 6.4) -> "GridSpec":
        """An n^3 grid covering ``extent`` meters per axis."""
        return cls(n, n, n, extent / n)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_x, self.n_y, self.n_z)

    @property
    def extent(self) -> tuple[float, float, float]:
        return (self.n_x * self.l_v, self.n_y * self.l_v, self.n_z * self.l_v)

    @property
    def size(self) -> int:
        return self.n_x * self.n_y * self.n_z


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    spec: GridSpec
    cells: np.ndarray

    def __post_init__(self):
        cells = np.ascontiguousarray(self.cells, dtype=bool)
        if cells.shape != self.spec.shape:
            raise ShapeError(f"cells {cells.shape} do not match spec {self.spec.shape}")
        cells.flags.writeable = False
        object.__setattr__(self, "cells", cells)

    @classmethod
    def empty(cls, spec: GridSpec) -> "VoxelGrid":
        return cls(spec, np.zeros(spec.shape, dtype=bool))

    @property
    def count(self) -> int:
        return int(self.cells.sum())

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.cells, other.cells)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ProbGrid:
    spec: GridSpec
    cells: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.float32)
        if cells.shape != self.spec.shape:
            raise ShapeError(f"cells {cells.shape} do not match spec {self.spec.shape}")
        if cells.size and (cells.min() < 0 or cells.max() > 1):
            raise ValueError("occupancy probabilities must lie in [0, 1]")
        object.__setattr__(self, "cells", cells)

    def threshold(self, level: float = 0.5) -> VoxelGrid:
        return VoxelGrid(self.spec, self.cells > level)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole depth camera with square pixels; ``max_range`` in meters."""

    width: int = 168
    height: int = 94
    hfov: float = math.pi / 2
    max_range: float = 6.4

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(self.hfov / 2)

    def ray_dirs(self) -> np.ndarray:
        """Unit ray directions (height*width, 3) in the camera frame, row-major."""
        f = self.focal
        u = (np.arange(self.width) + 0.5 - self.width / 2) / f
        v = (np.arange(self.height) + 0.5 - self.height / 2) / f
        vv, uu = np.meshgrid(v, u, indexing="ij")
        d = np.stack([-uu, -vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass(frozen=True)
class CameraPose:
    x: float
    y: float
    heading: float
    height: float = 0.5


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel range in meters; ``inf`` marks rays with no hit."""

    intrinsics: CameraIntrinsics
    values: np.ndarray = field(repr=False)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @property
    def hfov(self) -> float:
        return self.intrinsics.hfov


def _check_specs(a, b):
    if a.spec.shape != b.spec.shape:
        raise ShapeError(f"grid shapes differ: {a.spec.shape} vs {b.spec.shape}")


def iou_loss(g: VoxelGrid, g_hat: VoxelGrid) -> float:
    """1 - |G n G^| / |G u G^|; two empty grids count as perfect agreement."""
    _check_specs(g, g_hat)
    union = np.count_nonzero(g.cells | g_hat.cells)
    if union == 0:
        return 0.0
    inter = np.count_nonzero(g.cells & g_hat.cells)
    # (u - i) / u rounds once, so hand values like 2/3 come out exact
    return (union - inter) / union


def soft_iou(target: np.ndarray, pred: np.ndarray):
    """Batched soft IoU loss over the leading axis.

    Returns per-sample losses and d(loss)/d(pred), both float64.
    """
    t = np.asarray(target, dtype=np.float64).reshape(len(target), -1)
    p = np.asarray(pred, dtype=np.float64).reshape(len(pred), -1)
    if t.shape != p.shape:
        raise ShapeError(f"target {t.shape} vs prediction {p.shape}")
    inter = (t * p).sum(axis=1)
    raw_union = (t + p - t * p).sum(axis=1)
    union = raw_union + SOFT_IOU_EPS
    loss = 1.0 - inter / union
    grad = -(t * union[:, None] - inter[:, None] * (1.0 - t)) / (union**2)[:, None]
    degenerate = raw_union == 0
    loss[degenerate] = 0.0
    grad[degenerate] = 0.0
    return loss, grad.reshape(np.shape(pred))


def soft_iou_loss(g: VoxelGrid, g_hat: ProbGrid, return_grad: bool = False):
    """Differentiable IoU relaxation 1 - sum(g*p) / (sum(g + p - g*p) + eps)."""
    _check_specs(g, g_hat)
    loss, grad = soft_iou(g.cells[None], g_hat.cells[None])
    if return_grad:
        return float(loss[0]), grad[0]
    return float(loss[0])


def downsample(g: VoxelGrid, factor: int) -> VoxelGrid:
    """Coarse voxel is occupied iff any voxel of its factor^3 block is."""
    if factor < 1 or any(n % factor for n in g.spec.shape):
        raise ShapeError(f"factor {factor} does not divide grid shape {g.spec.shape}")
    nx, ny, nz = (n // factor for n in g.spec.shape)
    blocks = g.cells.reshape(nx, factor, ny, factor, nz, factor)
    spec = GridSpec(nx, ny, nz, g.spec.l_v * factor)
    return VoxelGrid(spec, blocks.any(axis=(1, 3, 5)))


def _to_world(dirs_cam: np.ndarray, heading: float) -> np.ndarray:
    """Camera-frame vectors to world-grid axes (X, height, Y)."""
    c, s = math.cos(heading), math.sin(heading)
    x, y, z = dirs_cam[:, 0], dirs_cam[:, 1], dirs_cam[:, 2]
    return np.ascontiguousarray(np.stack([z * c - x * s, y, z * s + x * c], axis=1))


def raycast_depth(scene_grid: VoxelGrid, pose: CameraPose,
                  intrinsics: CameraIntrinsics = CameraIntrinsics()) -> DepthMap:
    """Simulated range image by exact voxel traversal of the world grid."""
    lv = scene_grid.spec.l_v
    origin = np.array([pose.x, pose.height, pose.y], dtype=np.float64)
    cell = np.floor(origin / lv).astype(int)
    if np.any(cell < 0) or np.any(cell >= scene_grid.spec.shape):
        raise PoseError(f"camera at {origin} lies outside the scene")
    if scene_grid.cells[tuple(cell)]:
        raise PoseError(f"camera at {origin} is inside an occupied voxel")
    dirs = _to_world(intrinsics.ray_dirs(), pose.heading)
    occ = scene_grid.cells.view(np.uint8)
    ranges = kernels.raycast(occ, origin, dirs, float(lv), float(intrinsics.max_range))
    return DepthMap(intrinsics, ranges.reshape(intrinsics.height, intrinsics.width))


def depth_to_grid(depth: DepthMap, spec: GridSpec) -> VoxelGrid:
    """Back-project every hit pixel into the robot-centric grid."""
    r = depth.values.reshape(-1)
    hit = np.isfinite(r)
    pts = depth.intrinsics.ray_dirs()[hit] * r[hit, None]
    lv = spec.l_v
    ix = np.floor((pts[:, 0] + spec.n_x * lv / 2) / lv).astype(np.int64)
    iy = np.floor((pts[:, 1] + spec.n_y * lv / 2) / lv).astype(np.int64)
    iz = np.floor(pts[:, 2] / lv).astype(np.int64)
    keep = ((ix >= 0) & (ix < spec.n_x) & (iy >= 0) & (iy < spec.n_y)
            & (iz >= 0) & (iz < spec.n_z))
    cells = np.zeros(spec.shape, dtype=bool)
    cells[ix[keep], iy[keep], iz[keep]] = True
    return VoxelGrid(spec, cells)


def egocentric_crop(scene_grid: VoxelGrid, pose: CameraPose, spec: GridSpec) -> VoxelGrid:
    """Omniscient robot-centric view of the world grid.

    An egocentric voxel is occupied iff its (closed) box overlaps an occupied
    world voxel.  Heading is a pure yaw, so the height axis is shared and the
    horizontal test is a 2D separating-axis check between squares.
    """
    c = scene_grid.spec.l_v
    lv = spec.l_v
    wx, wh, wy = scene_grid.spec.shape
    ch, sh = math.cos(pose.heading), math.sin(pose.heading)
    fwd = np.array([ch, sh])
    left = np.array([-sh, ch])
    cam = np.array([pose.x, pose.y])

    # egocentric column centers in the world plane, shape (n_x, n_z, 2)
    xc = -spec.n_x * lv / 2 + (np.arange(spec.n_x) + 0.5) * lv
    zc = (np.arange(spec.n_z) + 0.5) * lv
    centers = cam + xc[:, None, None] * left + zc[None, :, None] * fwd
    half = lv / 2 * (abs(ch) + abs(sh))
    lo = np.floor((centers - half - _OVERLAP_TOL) / c).astype(np.int64)
    k = int(math.ceil(2 * half / c)) + 2
    off = np.arange(k)
    ca = lo[..., 0, None, None] + off[:, None]  # (n_x, n_z, k, 1)
    cb = lo[..., 1, None, None] + off[None, :]  # (n_x, n_z, 1, k)
    ca, cb = np.broadcast_arrays(ca, cb)

    cell_ctr = np.stack([(ca + 0.5) * c, (cb + 0.5) * c], axis=-1)
    rel = cell_ctr - centers[:, :, None, None, :]
    cell_half = c / 2
    overlap = (np.abs(rel[..., 0]) <= half + cell_half + _OVERLAP_TOL)
    overlap &= np.abs(rel[..., 1]) <= half + cell_half + _OVERLAP_TOL
    cell_proj = cell_half * (abs(ch) + abs(sh))
    overlap &= np.abs(rel @ fwd) <= lv / 2 + cell_proj + _OVERLAP_TOL
    overlap &= np.abs(rel @ left) <= lv / 2 + cell_proj + _OVERLAP_TOL
    overlap &= (ca >= 0) & (ca < wx) & (cb >= 0) & (cb < wy)

    # per egocentric layer, the range of world height layers it touches
    ylo = pose.height - spec.n_y * lv / 2 + np.arange(spec.n_y) * lv
    mlo = np.clip(np.floor((ylo - _OVERLAP_TOL) / c).astype(np.int64), 0, wh)
    mhi = np.clip(np.floor((ylo + lv + _OVERLAP_TOL) / c).astype(np.int64) + 1, 0, wh)

    cum = np.zeros((wx, wh + 1, wy), dtype=np.int32)
    np.cumsum(scene_grid.cells, axis=1, out=cum[:, 1:, :])
    a = np.clip(ca, 0, wx - 1)
    b = np.clip(cb, 0, wy - 1)
    col = cum[a, :, b]  # (n_x, n_z, k, k, wh + 1)
    filled = (col[..., mhi] - col[..., mlo]) > 0  # (..., n_y)
    filled &= overlap[..., None]
    cells = filled.any(axis=(2, 3)).transpose(0, 2, 1)
    return VoxelGrid(spec, cells)


def project_to_floor(g: VoxelGrid, robot_height: float = 1.2) -> np.ndarray:
    """2D map (n_x, n_z): a column is occupied iff a voxel below robot height is."""
    layers = int(math.ceil(robot_height / g.spec.l_v - 1e-9))
    layers = max(0, min(layers, g.spec.n_y))
    return g.cells[:, :layers, :].any(axis=1)


def grid_to_bytes(g: VoxelGrid) -> bytes:
    """Header <u32 n_x, n_y, n_z, f32 l_v> then bits, x fastest, LSB first."""
    bits = np.packbits(g.cells.ravel(order="F"), bitorder="little")
    return _HEADER.pack(*g.spec.shape, g.spec.l_v) + bits.tobytes()


def grid_from_bytes(data: bytes) -> VoxelGrid:
    if len(data) < _HEADER.size:
        raise ValueError("truncated grid header")
    nx, ny, nz, lv = _HEADER.unpack_from(data)
    spec = GridSpec(nx, ny, nz, float(str(np.float32(lv))))
    nbytes = (spec.size + 7) // 8
    if len(data) < _HEADER.size + nbytes:
        raise ValueError("truncated grid payload")
    payload = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=_HEADER.size)
    flat = np.unpackbits(payload, bitorder="little", count=spec.size).astype(bool)
    return VoxelGrid(spec, flat.reshape(spec.shape, order="F"))


def grid_nbytes(spec: GridSpec) -> int:
    return _HEADER.size + (spec.size + 7) // 8
