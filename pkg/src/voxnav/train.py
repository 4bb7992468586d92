"""Behavior cloning with the three-phase modular schedule.

Phase 1 fits the perception proxy to clean grids from corrupted ones with
the soft IoU loss, phase 2 fits the policy to expert actions on
ground-truth grids, and phase 3 fine-tunes both on L_p + alpha * L_o with
policy gradients flowing into the proxy.  The non-modular baseline runs
phase 3 alone from random initialisation.  Each phase starts a fresh Adam
state.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .expert import Dataset
from .nets import NoiseModel, PolicyNet, ProxyNet, build_network, corrupt_cells
from .tensor import (GeometryError, ParamSet, load_checkpoint, mse_loss, read_checkpoint,
                     save_checkpoint)
from .voxgrid import grid_from_bytes, soft_iou

_PHASE_PERCEPTION, _PHASE_POLICY, _PHASE_JOINT, _PHASE_VAL = 1, 2, 3, 9


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    alpha: float = 0.1
    epochs_perception: int = 150
    epochs_policy: int = 50
    epochs_joint: int = 300
    batch_size: int = 32
    split_fraction: float = 0.8
    seed: int = 0
    grid_size: int = 64
    modular: bool = True
    frame_stride: int = 1
    noise: NoiseModel = field(default_factory=NoiseModel)
    channels: tuple = (4, 8, 6, 32)

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must lie in (0, 1)")
        if min(self.epochs_perception, self.epochs_policy, self.epochs_joint) < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 2 or self.frame_stride < 1:
            raise ValueError("batch_size must be >= 2 and frame_stride >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseModel(**d["noise"])
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


# --- data ---

def split_dataset(dataset: Dataset, fraction: float = 0.8, seed: int = 0):
    """Split whole trajectories into (train, validation) datasets."""
    n = len(dataset)
    n_train = int(round(fraction * n))
    if n_train < 1 or n - n_train < 1:
        raise ValueError(f"cannot split {n} trajectories at {fraction}")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    pick = lambda idx: Dataset(dataset.spec, dataset.seed, dataset.observation_mode,  # noqa: E731
                               dataset.scene_ids, [dataset.demos[i] for i in sorted(idx)])
    return pick(perm[:n_train]), pick(perm[n_train:])


@dataclass(eq=False)
class Frames:
    grids: np.ndarray  # (F, n, n, n) bool
    goals: np.ndarray  # (F, 3) float32
    actions: np.ndarray  # (F, 2) float32
    ids: np.ndarray  # (F,) stable identifiers for noise seeding

    def __len__(self):
        return len(self.goals)


def frames_from(dataset: Dataset, grid_size: int | None = None, stride: int = 1) -> Frames:
    """Flatten trajectories into frame arrays, optionally block-downsampled."""
    n = dataset.spec.n_x
    grid_size = grid_size or n
    if n % grid_size:
        raise GeometryError(f"dataset grid {n} cannot be reduced to {grid_size}")
    f = n // grid_size
    grids, goals, actions, ids = [], [], [], []
    for t, demo in enumerate(dataset.demos):
        sel = np.arange(0, len(demo), stride)
        for i in sel:
            cells = grid_from_bytes(demo.grids[i].tobytes()).cells
            if f > 1:
                cells = cells.reshape(grid_size, f, grid_size, f, grid_size, f).any(axis=(1, 3, 5))
            grids.append(cells)
        goals.append(demo.goals[sel])
        actions.append(demo.actions[sel])
        ids.append(t * (1 << 20) + sel)
    if not grids:
        shape = (0, grid_size, grid_size, grid_size)
        return Frames(np.zeros(shape, bool), np.zeros((0, 3), np.float32),
                      np.zeros((0, 2), np.float32), np.zeros(0, np.int64))
    return Frames(np.stack(grids), np.concatenate(goals).astype(np.float32),
                  np.concatenate(actions).astype(np.float32), np.concatenate(ids))


def _noisy(frames: Frames, idx, noise: NoiseModel, seed: int, phase: int, epoch: int):
    out = np.empty((len(idx),) + frames.grids.shape[1:], dtype=np.float32)
    for j, i in enumerate(idx):
        rng = np.random.default_rng([seed, phase, epoch, int(frames.ids[i])])
        out[j] = corrupt_cells(frames.grids[i], noise, rng)
    return out


def _batches(n: int, batch_size: int, seed: int, phase: int, epoch: int):
    perm = np.random.default_rng([seed, phase, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _check(value: float, phase: str, epoch: int):
    if not math.isfinite(value):
        raise TrainingDivergence(f"{phase} loss became non-finite at epoch {epoch}")


def _row(epoch, split, lp=None, lo=None, total=None):
    return {"epoch": epoch, "split": split, "L_p": lp, "L_o": lo, "total": total}


# --- evaluation helpers ---

def perception_loss(proxy: ProxyNet, frames: Frames, config: TrainConfig, chunk: int = 256):
    """Mean soft IoU on fixed per-frame noise draws."""
    if len(frames) == 0:
        return float("nan")
    total = 0.0
    for s in range(0, len(frames), chunk):
        idx = np.arange(s, min(s + chunk, len(frames)))
        pred = proxy.forward(_noisy(frames, idx, config.noise, config.seed, _PHASE_VAL, 0))
        loss, _ = soft_iou(frames.grids[idx], pred[:, 0])
        total += loss.sum()
    return total / len(frames)


def policy_loss(policy: PolicyNet, frames: Frames, config: TrainConfig, proxy=None,
                chunk: int = 256):
    """Validation (L_p, L_o) with the policy reading GT grids or proxy output."""
    if len(frames) == 0:
        return float("nan"), float("nan")
    lp_sum, se_sum = 0.0, 0.0
    for s in range(0, len(frames), chunk):
        idx = np.arange(s, min(s + chunk, len(frames)))
        if proxy is None:
            obs = frames.grids[idx].astype(np.float32)
        else:
            pred = proxy.forward(_noisy(frames, idx, config.noise, config.seed, _PHASE_VAL, 0))
            lp, _ = soft_iou(frames.grids[idx], pred[:, 0])
            lp_sum += lp.sum()
            obs = pred[:, 0]
        out = policy.forward(obs, frames.goals[idx])
        se_sum += float(((out.astype(np.float64) - frames.actions[idx]) ** 2).sum())
    lo = se_sum / (2 * len(frames))
    lp = lp_sum / len(frames) if proxy is not None else float("nan")
    return lp, lo


def mean_action_mse(train: Frames, val: Frames) -> float:
    """Validation MSE of the constant predictor that outputs the train mean action."""
    mean = train.actions.astype(np.float64).mean(axis=0)
    return float(((val.actions - mean) ** 2).mean())


# --- phases ---

def train_perception(proxy: ProxyNet, train: Frames, val: Frames, config: TrainConfig,
                     epochs: int | None = None):
    """Fit the proxy to clean grids from corrupted ones; returns the loss curve."""
    epochs = config.epochs_perception if epochs is None else epochs
    params = ParamSet.of(proxy)
    curve = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), config.batch_size, config.seed, _PHASE_PERCEPTION, epoch):
            noisy = _noisy(train, idx, config.noise, config.seed, _PHASE_PERCEPTION, epoch)
            pred = proxy.forward(noisy, train=True)
            loss, grad = soft_iou(train.grids[idx], pred[:, 0])
            params.zero_grad()
            proxy.backward((grad / len(idx)).astype(np.float32)[:, None])
            params.adam_step(config.lr)
            total += loss.sum()
            count += len(idx)
        lp = total / max(count, 1)
        _check(lp, "perception", epoch)
        curve.append(_row(epoch, "train", lp, None, lp))
        vlp = perception_loss(proxy, val, config)
        curve.append(_row(epoch, "val", vlp, None, vlp))
    proxy.optimizer_state = params
    return curve


def train_policy(policy: PolicyNet, train: Frames, val: Frames, config: TrainConfig,
                 observation: str = "ground_truth_grid", proxy: ProxyNet | None = None,
                 epochs: int | None = None):
    """Behavior cloning on MSE to expert actions; returns the loss curve."""
    epochs = config.epochs_policy if epochs is None else epochs
    if observation not in ("ground_truth_grid", "frozen_proxy_output"):
        raise ValueError(f"unknown observation {observation!r}")
    if observation == "frozen_proxy_output" and proxy is None:
        raise ValueError("frozen_proxy_output needs a proxy network")
    params = ParamSet.of(policy)
    curve = []
    for epoch in range(1, epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(len(train), config.batch_size, config.seed, _PHASE_POLICY, epoch):
            if observation == "ground_truth_grid":
                obs = train.grids[idx].astype(np.float32)
            else:
                noisy = _noisy(train, idx, config.noise, config.seed, _PHASE_POLICY, epoch)
                obs = proxy.forward(noisy)[:, 0]
            out = policy.forward(obs, train.goals[idx], train=True)
            lo, grad = mse_loss(out, train.actions[idx])
            params.zero_grad()
            policy.backward(grad)
            params.adam_step(config.lr)
            total += lo * len(idx)
            count += len(idx)
        lo = total / max(count, 1)
        _check(lo, "policy", epoch)
        curve.append(_row(epoch, "train", None, lo, lo))
        _, vlo = policy_loss(policy, val, config,
                             proxy if observation == "frozen_proxy_output" else None)
        curve.append(_row(epoch, "val", None, vlo, vlo))
    policy.optimizer_state = params
    return curve


def train_joint(proxy: ProxyNet, policy: PolicyNet, train: Frames, val: Frames,
                config: TrainConfig, epochs: int | None = None):
    """End-to-end fine-tuning on L_p + alpha * L_o.

    Returns ``(curve, steps)``; ``steps`` logs L_p, L_o and total per batch.
    """
    epochs = config.epochs_joint if epochs is None else epochs
    params = ParamSet.of(proxy, "proxy.").merged(ParamSet.of(policy, "policy."))
    alpha = config.alpha
    curve, steps = [], []
    for epoch in range(1, epochs + 1):
        sums = np.zeros(3)
        count = 0
        for idx in _batches(len(train), config.batch_size, config.seed, _PHASE_JOINT, epoch):
            n = len(idx)
            noisy = _noisy(train, idx, config.noise, config.seed, _PHASE_JOINT, epoch)
            pred = proxy.forward(noisy, train=True)
            lp_each, g_p = soft_iou(train.grids[idx], pred[:, 0])
            lp = float(lp_each.mean())
            out = policy.forward(pred[:, 0], train.goals[idx], train=True)
            lo, g_o = mse_loss(out, train.actions[idx])
            total = lp + alpha * lo
            params.zero_grad()
            g_grid = policy.backward((alpha * g_o).astype(np.float32))
            g_pred = g_grid + (g_p / n).astype(np.float32)[:, None]
            proxy.backward(g_pred.astype(np.float32))
            params.adam_step(config.lr)
            steps.append({"epoch": epoch, "L_p": lp, "L_o": lo, "total": total})
            sums += np.array([lp, lo, total]) * n
            count += n
        lp, lo, total = sums / max(count, 1)
        _check(total, "joint", epoch)
        curve.append(_row(epoch, "train", lp, lo, total))
        vlp, vlo = policy_loss(policy, val, config, proxy)
        curve.append(_row(epoch, "val", vlp, vlo, vlp + alpha * vlo))
    proxy.optimizer_state = params
    policy.optimizer_state = params
    return curve, steps


@dataclass(eq=False)
class TrainedModels:
    proxy: ProxyNet
    policy: PolicyNet
    curve: list  # rows tagged with "phase"
    steps: list


def run_pipeline(train: Frames, val: Frames, config: TrainConfig) -> TrainedModels:
    """Modular (perception, policy, joint) or joint-only training from one seed.

    Both variants start from identically seeded networks and share the
    joint-phase data order and noise draws.
    """
    proxy = ProxyNet(config.grid_size, seed=config.seed)
    policy = PolicyNet(config.grid_size, config.channels, seed=config.seed + 1)
    curve = []
    if config.modular:
        for row in train_perception(proxy, train, val, config):
            curve.append({"phase": "perception", **row})
        for row in train_policy(policy, train, val, config):
            curve.append({"phase": "policy", **row})
    joint, steps = train_joint(proxy, policy, train, val, config)
    curve += [{"phase": "joint", **row} for row in joint]
    return TrainedModels(proxy, policy, curve, steps)


def train_gt_policy(train: Frames, val: Frames, config: TrainConfig, epochs: int | None = None):
    """Policy trained on ground-truth grids only (the GT Grid agent)."""
    policy = PolicyNet(config.grid_size, config.channels, seed=config.seed + 1)
    curve = train_policy(policy, train, val, config, "ground_truth_grid", epochs=epochs)
    return policy, curve


# --- persistence ---

def save_model(path, net, config: TrainConfig | dict | None = None) -> None:
    params = getattr(net, "optimizer_state", None)
    own = ParamSet.of(net)
    if params is not None:
        # carry over Adam moments; joint-phase sets prefix names with the network name
        for name in own.params:
            for key in (name, f"{net.name}.{name}"):
                if key in params.params:
                    own.m[name], own.v[name] = params.m[key], params.v[key]
                    own.steps[name] = params.steps[key]
    cfg = config.to_dict() if isinstance(config, TrainConfig) else (config or {})
    save_checkpoint(path, net.name, net.geometry(), own, cfg)


def load_model(path, expected_grid_size: int | None = None):
    """Rebuild a network from its checkpoint; returns ``(net, header)``."""
    header, _ = read_checkpoint(path)
    geometry = header["geometry"]
    if expected_grid_size is not None and geometry.get("grid_n") != expected_grid_size:
        raise GeometryError(f"{path}: checkpoint grid size {geometry.get('grid_n')} "
                            f"!= expected {expected_grid_size}")
    net = build_network(geometry)
    params = ParamSet.of(net)
    load_checkpoint(path, params, geometry)
    net.optimizer_state = params
    return net, header


def write_curve_csv(rows, path) -> None:
    cols = ["phase", "epoch", "split", "L_p", "L_o", "total"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else (repr(float(r[k])) if k in
                        ("L_p", "L_o", "total") else r.get(k, ""))) for k in cols})


def load_config(path) -> TrainConfig:
    with open(path) as f:
        return TrainConfig.from_dict(json.load(f))


def with_overrides(config: TrainConfig, **kw) -> TrainConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
