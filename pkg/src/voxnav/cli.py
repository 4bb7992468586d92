"""``voxnav`` command line: scenes, demonstrations, training, evaluation, ablations."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .expert import OBSERVATION_MODES, collect_demonstrations, load_dataset, save_dataset
from .nets import PolicyNet, ProxyNet
from .train import (TrainConfig, frames_from, load_model, run_pipeline, save_model,
                    split_dataset, train_gt_policy, write_curve_csv)
from .voxgrid import GridSpec
from .world import LAYOUTS, SceneParams, load_scene, save_scene

log = logging.getLogger("voxnav")

_TRAIN_DEFAULTS = TrainConfig()

DEFAULTS = {
    "seed": 0,
    "out": "runs/default",
    "workers": 1,
    # scenes
    "scenes": 5,
    "layout": "clutter",
    "obstacle_density": 0.08,
    "novel_scenes": 2,
    # demonstrations
    "per_scene": 100,
    "grid_size": 64,
    "observation_mode": "gt_depth_grid",
    # training
    "lr": _TRAIN_DEFAULTS.lr,
    "alpha": _TRAIN_DEFAULTS.alpha,
    "epochs_perception": _TRAIN_DEFAULTS.epochs_perception,
    "epochs_policy": _TRAIN_DEFAULTS.epochs_policy,
    "epochs_joint": _TRAIN_DEFAULTS.epochs_joint,
    "batch_size": _TRAIN_DEFAULTS.batch_size,
    "split_fraction": _TRAIN_DEFAULTS.split_fraction,
    "frame_stride": _TRAIN_DEFAULTS.frame_stride,
    "modular": True,
    # evaluation
    "agent": "snn_proxy_policy",
    "episodes": 10,
    "max_steps": 500,
    "ne_mode": "all",
    "axis": "grid",
    "grid_sizes": [64, 16, 4],
    "repetitions": 100,
    "format": "csv",
}

_HELP = {
    "config": "JSON config file; its keys are the long flag names with '_' for '-'",
    "seed": "experiment seed (integer)",
    "out": "output directory holding every artifact (path)",
    "workers": "worker processes for rollouts and evaluation (count)",
    "scenes": "number of seen training scenes (count)",
    "layout": f"seen-scene layout, one of {', '.join(LAYOUTS)}",
    "obstacle_density": "target fraction of occupied floor cells (0-0.5)",
    "novel_scenes": "held-out scenes evaluated as 'novel' (count)",
    "per_scene": "expert demonstrations per scene (trajectories)",
    "grid_size": "voxels per side of the egocentric grid (cells); training may "
                 "use a divisor of the collected size",
    "observation_mode": f"demonstration observations, one of {', '.join(OBSERVATION_MODES)}",
    "lr": "Adam learning rate (unitless)",
    "alpha": "weight of the policy loss in the joint phase (unitless, >= 0)",
    "epochs_perception": "perception-proxy epochs (epochs)",
    "epochs_policy": "policy epochs (epochs)",
    "epochs_joint": "joint fine-tuning epochs (epochs)",
    "batch_size": "frames per optimisation step (frames)",
    "split_fraction": "fraction of trajectories used for training (0-1)",
    "frame_stride": "keep every n-th frame of each trajectory (frames)",
    "modular": "true: perception, policy then joint; false: joint phase only from random init",
    "agent": "evaluated agent: gt_grid_policy, snn_proxy_policy or expert",
    "episodes": "evaluation episodes per scene (episodes)",
    "max_steps": "episode step limit (steps of 1/30 s)",
    "ne_mode": "navigation error average: 'all' episodes (default) or 'failures' only",
    "axis": "ablation axis: grid or modular",
    "grid_sizes": "grid sizes compared by the grid ablation (comma-separated cells)",
    "repetitions": "forward passes timed by bench (count)",
    "format": "report output format: csv or json",
}


class ConfigError(ValueError):
    pass


class DependencyError(RuntimeError):
    pass


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_sizes(text):
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def _coerce(key, value):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, list):
            return _parse_sizes(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("expected an integer")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field {key!r}: {exc}") from None


def validate(cfg: dict) -> dict:
    def need(ok, key, msg):
        if not ok:
            raise ConfigError(f"field {key!r}: {msg} (got {cfg[key]!r})")

    need(cfg["workers"] >= 1, "workers", "must be >= 1")
    need(cfg["scenes"] >= 1, "scenes", "must be >= 1")
    need(cfg["novel_scenes"] >= 0, "novel_scenes", "must be >= 0")
    need(cfg["layout"] in LAYOUTS, "layout", f"must be one of {LAYOUTS}")
    need(0 <= cfg["obstacle_density"] <= 0.5, "obstacle_density", "must lie in [0, 0.5]")
    need(cfg["per_scene"] >= 1, "per_scene", "must be >= 1")
    need(cfg["grid_size"] >= 4 and cfg["grid_size"] % 4 == 0, "grid_size",
         "must be a positive multiple of 4")
    need(cfg["observation_mode"] in OBSERVATION_MODES, "observation_mode",
         f"must be one of {OBSERVATION_MODES}")
    need(cfg["lr"] > 0, "lr", "must be > 0")
    need(cfg["alpha"] >= 0, "alpha", "must be >= 0")
    for k in ("epochs_perception", "epochs_policy", "epochs_joint"):
        need(cfg[k] >= 0, k, "must be >= 0")
    need(cfg["batch_size"] >= 2, "batch_size", "must be >= 2")
    need(0 < cfg["split_fraction"] < 1, "split_fraction", "must lie in (0, 1)")
    need(cfg["frame_stride"] >= 1, "frame_stride", "must be >= 1")
    need(cfg["agent"] in ("gt_grid_policy", "snn_proxy_policy", "expert"), "agent",
         "unknown agent")
    need(cfg["episodes"] >= 1, "episodes", "must be >= 1")
    need(cfg["max_steps"] >= 1, "max_steps", "must be >= 1")
    need(cfg["ne_mode"] in ev.NE_MODES, "ne_mode", f"must be one of {ev.NE_MODES}")
    need(cfg["axis"] in ("grid", "modular"), "axis", "must be grid or modular")
    need(all(n >= 4 and n % 4 == 0 for n in cfg["grid_sizes"]) and cfg["grid_sizes"],
         "grid_sizes", "must be multiples of 4")
    need(cfg["repetitions"] >= 10, "repetitions", "must be >= 10")
    need(cfg["format"] in ("csv", "json"), "format", "must be csv or json")
    return cfg


def resolve_config(args: argparse.Namespace, environ=os.environ) -> dict:
    """Defaults, then the config file, then VOXNAV_* variables, then flags."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for k, v in data.items():
            if k not in DEFAULTS:
                raise ConfigError(f"field {k!r}: unknown config key")
            cfg[k] = _coerce(k, v)
    for k in DEFAULTS:
        env = environ.get("VOXNAV_" + k.upper())
        if env is not None:
            cfg[k] = _coerce(k, env)
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = _coerce(k, v)
    return validate(cfg)


def train_config(cfg: dict, **over) -> TrainConfig:
    tc = TrainConfig(lr=cfg["lr"], alpha=cfg["alpha"], epochs_perception=cfg["epochs_perception"],
                     epochs_policy=cfg["epochs_policy"], epochs_joint=cfg["epochs_joint"],
                     batch_size=cfg["batch_size"], split_fraction=cfg["split_fraction"],
                     seed=cfg["seed"], grid_size=cfg["grid_size"], modular=cfg["modular"],
                     frame_stride=cfg["frame_stride"])
    return replace(tc, **over)


# --- artifact layout ---

def _paths(cfg):
    out = Path(cfg["out"])
    return {"out": out, "scenes": out / "scenes", "dataset": out / "dataset",
            "train": out / "train", "eval": out / "eval", "bench": out / "bench"}


def _log_config(cfg, command):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{command}.config.json", "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
        f.write("\n")
    log.info("%s resolved config: %s", command, json.dumps(cfg, sort_keys=True))


def _load_scenes(cfg):
    d = _paths(cfg)["scenes"]
    files = sorted(d.glob("*.json")) if d.is_dir() else []
    if not files:
        raise DependencyError(f"no scenes in {d}; run 'voxnav gen-scenes' first")
    return [load_scene(f) for f in files]


def _load_dataset(cfg):
    d = _paths(cfg)["dataset"]
    if not (d / "manifest.json").is_file():
        raise DependencyError(f"no dataset in {d}; run 'voxnav collect' first")
    return load_dataset(d)


def _require(path: Path, hint: str):
    if not path.is_file():
        raise DependencyError(f"missing {path}; run 'voxnav {hint}' first")
    return path


# --- commands ---

def cmd_gen_scenes(cfg):
    params = SceneParams(obstacle_density=cfg["obstacle_density"], layout=cfg["layout"])
    d = _paths(cfg)["scenes"]
    d.mkdir(parents=True, exist_ok=True)
    for old in d.glob("*"):
        old.unlink()
    for sc in ev.make_scenes(cfg["seed"], cfg["scenes"], "seen", params):
        save_scene(sc, d)
    log.info("wrote %d scenes to %s", cfg["scenes"], d)


def cmd_collect(cfg):
    scenes = _load_scenes(cfg)
    ds = collect_demonstrations(scenes, cfg["per_scene"], cfg["seed"], cfg["observation_mode"],
                                GridSpec.cubic(cfg["grid_size"]), cfg["workers"])
    save_dataset(ds, _paths(cfg)["dataset"])
    log.info("collected %d trajectories (%d frames)", len(ds), ds.frame_count)


def _frames(cfg, ds, grid_size):
    tc = train_config(cfg, grid_size=grid_size)
    tr, va = split_dataset(ds, tc.split_fraction, tc.seed)
    return tc, frames_from(tr, grid_size, tc.frame_stride), frames_from(va, grid_size, tc.frame_stride)


def cmd_train(cfg):
    ds = _load_dataset(cfg)
    tc, tr, va = _frames(cfg, ds, cfg["grid_size"])
    models = run_pipeline(tr, va, tc)
    gt_policy, gt_curve = train_gt_policy(tr, va, tc)
    d = _paths(cfg)["train"]
    d.mkdir(parents=True, exist_ok=True)
    save_model(d / "proxy.ckpt", models.proxy, tc)
    save_model(d / "policy.ckpt", models.policy, tc)
    save_model(d / "gt_policy.ckpt", gt_policy, tc)
    write_curve_csv(models.curve + [{"phase": "gt_policy", **r} for r in gt_curve],
                    d / "loss_curve.csv")
    with open(d / "steps.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("step", "epoch", "L_p", "L_o", "total"))
        for i, s in enumerate(models.steps):
            w.writerow((i, s["epoch"], repr(s["L_p"]), repr(s["L_o"]), repr(s["total"])))
    with open(d / "train_config.json", "w") as f:
        json.dump(tc.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")
    log.info("trained %s pipeline at %d^3 on %d frames", "modular" if tc.modular else
             "non-modular", tc.grid_size, len(tr))


def _agent(cfg, ds_spec):
    if cfg["agent"] == "expert":
        return ev.ExpertPolicy()
    d = _paths(cfg)["train"]
    if cfg["agent"] == "gt_grid_policy":
        policy, _ = load_model(_require(d / "gt_policy.ckpt", "train"))
        return ev.GridPolicyAgent(policy, ds_spec)
    policy, _ = load_model(_require(d / "policy.ckpt", "train"))
    proxy, _ = load_model(_require(d / "proxy.ckpt", "train"), policy.grid_n)
    return ev.GridPolicyAgent(policy, ds_spec, proxy)


def _episodes(cfg, scenes):
    eps = ev.make_episodes(scenes, cfg["episodes"], cfg["seed"], "seen")
    if cfg["novel_scenes"]:
        novel = ev.make_scenes(cfg["seed"], cfg["novel_scenes"], "novel",
                               SceneParams(obstacle_density=cfg["obstacle_density"]))
        eps += ev.make_episodes(novel, cfg["episodes"], cfg["seed"], "novel")
    return eps


def cmd_evaluate(cfg):
    scenes = _load_scenes(cfg)
    ds = _load_dataset(cfg) if cfg["agent"] != "expert" else None
    agent = _agent(cfg, ds.spec if ds else None)
    results = ev.evaluate_agent(agent, _episodes(cfg, scenes), cfg["workers"],
                                max_steps=cfg["max_steps"])
    report = ev.build_report(results, cfg["ne_mode"])
    d = _paths(cfg)["eval"]
    d.mkdir(parents=True, exist_ok=True)
    ev.emit_report(report, d / "report.json", "json")
    ev.emit_report(report, d / "report.csv", "csv")
    with open(d / "episodes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("scene", "split", "outcome", "path_length", "shortest_path",
                    "final_goal_distance", "steps", "agent"))
        for r in results:
            w.writerow((r.scene_id, r.split, r.outcome.value, repr(r.path_length),
                        repr(r.shortest_path), repr(r.final_goal_distance), r.steps, r.agent))
    for r in report.rows:
        if r.scene.endswith("average"):
            log.info("%s SR %.3f SPL %.3f NE %.3f (%d episodes)", r.scene, r.SR, r.SPL, r.NE,
                     r.episodes)


def cmd_ablate(cfg):
    scenes = _load_scenes(cfg)
    ds = _load_dataset(cfg)
    episodes = ev.make_episodes(scenes, cfg["episodes"], cfg["seed"], "seen")
    arms = {}
    if cfg["axis"] == "grid":
        for n in cfg["grid_sizes"]:
            def arm(n=n):
                tc, tr, va = _frames(cfg, ds, n)
                policy, _ = train_gt_policy(tr, va, tc)
                return ev.GridPolicyAgent(policy, ds.spec)
            arms[f"grid_{n}"] = arm
    else:
        for modular in (True, False):
            def arm(modular=modular):
                tc, tr, va = _frames(cfg, ds, cfg["grid_size"])
                m = run_pipeline(tr, va, replace(tc, modular=modular))
                return ev.GridPolicyAgent(m.policy, ds.spec, m.proxy)
            arms["modular" if modular else "non-modular"] = arm
    rows = ev.run_ablation(arms, episodes, cfg["workers"], cfg["ne_mode"],
                           max_steps=cfg["max_steps"])
    d = _paths(cfg)["eval"]
    d.mkdir(parents=True, exist_ok=True)
    table = ev.ablation_table(rows)
    (d / f"ablation_{cfg['axis']}.csv").write_text(table)
    sys.stdout.write(table)


def cmd_bench(cfg):
    rows = []
    rng = np.random.default_rng(cfg["seed"])
    for n in cfg["grid_sizes"]:
        policy = PolicyNet(n, seed=cfg["seed"])
        obs = [((rng.random((n, n, n)) < 0.1), (1.0, 1.0, 0.0)) for _ in range(4)]
        for agent in (ev.GridPolicyAgent(policy), ev.GridPolicyAgent(policy, proxy=ProxyNet(n))):
            r = ev.benchmark_agent(agent, obs, cfg["repetitions"])
            r["agent"] = f"{r['agent']}_{n}"
            rows.append(r)
    d = _paths(cfg)["bench"]
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "bench.json", "w") as f:
        json.dump(rows, f, indent=1)
        f.write("\n")
    for r in rows:
        sys.stdout.write(f"{r['agent']}: {r['macs']} MACs, {r['params']} params, "
                         f"{r['hz']:.1f} Hz, real_time={r['real_time']}\n")


def cmd_report(cfg):
    d = _paths(cfg)["eval"]
    report = ev.read_report(_require(d / "report.json", "evaluate"))
    bench = _paths(cfg)["bench"] / "bench.json"
    if bench.is_file():
        report.cost = json.loads(bench.read_text())
    target = d / f"summary.{cfg['format']}"
    ev.emit_report(report, target, cfg["format"])
    sys.stdout.write(target.read_text())


COMMANDS = {
    "gen-scenes": (cmd_gen_scenes, "generate seen procedural scenes"),
    "collect": (cmd_collect, "roll out the privileged expert and save demonstrations"),
    "train": (cmd_train, "train proxy and policy (modular or joint-only) plus a GT-grid policy"),
    "evaluate": (cmd_evaluate, "closed-loop evaluation on seen and novel scenes"),
    "ablate": (cmd_ablate, "compare grid sizes or modular vs joint-only training"),
    "bench": (cmd_bench, "MACs, parameters and forward-pass rate per grid size"),
    "report": (cmd_report, "render the evaluation report with the cost table"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS,
                        help=_HELP["config"])
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        shown = ",".join(map(str, default)) if isinstance(default, list) else \
            str(default).lower() if isinstance(default, bool) else default
        common.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.upper(),
                            help=f"{_HELP[key]} [default: {shown}]")
    parser = argparse.ArgumentParser(
        prog="voxnav", parents=[common],
        description="Voxel-grid point-goal navigation: scenes, expert data, modular "
                    "training and evaluation.  Every flag may also be set in the JSON "
                    "config file or as a VOXNAV_<NAME> environment variable; flags win.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        _log_config(cfg, args.command)
        COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        log.error("invalid config: %s", exc)
        return 2
    except DependencyError as exc:
        log.error("dependency error: %s", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
