"""Closed-loop rollouts, SR/SPL/NE metrics, ablation drivers and reports."""

from __future__ import annotations

import csv
import io
import json
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .expert import ExpertAgent, PDGains, observe
from .nets import NoiseModel, PolicyNet, ProxyNet, corrupt_cells, encode_goal
from .planning import plan_astar
from .tensor import count_cost
from .voxgrid import CameraIntrinsics, GridSpec, downsample
from .world import (EpisodeConfig, RobotState, Scene, SceneParams, Status, episode_status,
                    generate_scene, sample_start_goal, step_kinematics)

REPORT_VERSION = 1
REPORT_COLUMNS = ("scene", "SR", "SPL", "NE", "episodes", "split")
COST_COLUMNS = ("agent", "macs", "params", "hz", "real_time")
NE_MODES = ("all", "failures")

SEEN_SEED_BASE = 0
NOVEL_SEED_BASE = 1_000_000
_SEEDS_PER_EXPERIMENT = 1000
NOVEL_LAYOUTS = ("rooms", "clutter")

# reference rows from the original experiments, for documentation only
REFERENCE_GRID_SR = {64: 0.52, 16: 0.39, 4: 0.22}
REFERENCE_MODULAR_SR = {"modular": 0.35, "non-modular": 0.22}


class EvaluationError(RuntimeError):
    pass


# --- agents ---
#
# An agent is a factory: ``start(scene, goal, rng)`` returns a controller
# whose ``act(state)`` maps the current pose to a (v, w) command.  Learned
# agents are purely reactive: each action depends only on the current
# observation and goal.

class ZeroAgent:
    """Never moves."""

    label = "zero"

    def start(self, scene, goal, rng):
        return self

    def act(self, state):
        return (0.0, 0.0)

    def networks(self):
        return []


class ExpertPolicy:
    label = "expert"

    def __init__(self, gains: PDGains = PDGains(), dt: float = 1.0 / 30.0):
        self.gains = gains
        self.dt = dt

    def start(self, scene, goal, rng):
        return ExpertAgent(scene, goal, self.gains, self.dt)

    def networks(self):
        return []


class _GridController:
    def __init__(self, agent, scene, goal, rng):
        self.agent, self.scene, self.goal, self.rng = agent, scene, goal, rng

    def act(self, state):
        a = self.agent
        g = observe(self.scene, state, a.sense_spec, "gt_depth_grid", a.intrinsics)
        if a.factor > 1:
            g = downsample(g, a.factor)
        obs = g.cells
        if a.proxy is not None:
            noisy = corrupt_cells(obs, a.noise, self.rng)
            obs = a.proxy.forward(noisy[None].astype(np.float32))[0, 0]
        goal = encode_goal(state.pose, self.goal).as_array()
        out = a.policy.forward(np.asarray(obs, dtype=np.float32)[None], goal[None])
        return float(out[0, 0]), float(out[0, 1])


class GridPolicyAgent:
    """Policy fed the ground-truth depth grid, optionally through the noisy proxy.

    The camera senses at ``sense_spec`` and the grid is block-downsampled to
    the policy's resolution, matching how training frames are produced.
    """

    def __init__(self, policy: PolicyNet, sense_spec: GridSpec | None = None,
                 proxy: ProxyNet | None = None, noise: NoiseModel = NoiseModel(),
                 intrinsics: CameraIntrinsics | None = None):
        self.policy = policy
        self.proxy = proxy
        self.noise = noise
        self.sense_spec = sense_spec or GridSpec.cubic(policy.grid_n)
        if self.sense_spec.n_x % policy.grid_n:
            raise ValueError(f"sensing grid {self.sense_spec.n_x} cannot feed a "
                             f"{policy.grid_n} policy")
        self.factor = self.sense_spec.n_x // policy.grid_n
        if proxy is not None and proxy.grid_n != policy.grid_n:
            raise ValueError("proxy and policy grid sizes differ")
        self.intrinsics = intrinsics
        self.label = "snn_proxy_policy" if proxy is not None else "gt_grid_policy"

    def start(self, scene, goal, rng):
        return _GridController(self, scene, goal, rng)

    def networks(self):
        return [n for n in (self.proxy, self.policy) if n is not None]


# --- episodes ---

@dataclass(frozen=True)
class EpisodeSpec:
    scene: Scene
    start: RobotState
    goal: tuple
    shortest_path: float
    seed: int
    split: str = "seen"


@dataclass(frozen=True)
class EpisodeResult:
    scene_id: str
    outcome: Status
    path_length: float
    shortest_path: float
    final_goal_distance: float
    steps: int
    agent: str
    split: str = "seen"
    trace: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if self.path_length < 0 or self.shortest_path <= 0:
            raise ValueError(f"invalid episode lengths p={self.path_length} "
                             f"l={self.shortest_path}")


def _shortest(scene: Scene, start: RobotState, goal) -> float:
    path = plan_astar(scene.plan_map, scene.cell_of(start.x, start.y), scene.cell_of(*goal),
                      scene.cell_size)
    straight = math.hypot(goal[0] - start.x, goal[1] - start.y)
    return max(path.total_length, straight, 1e-6)


def run_episode(scene: Scene, start: RobotState, goal, agent, config: EpisodeConfig | None = None,
                seed=0, shortest_path: float | None = None, split: str = "seen",
                keep_trace: bool = False) -> EpisodeResult:
    """Sense, act and step at ``config.dt`` until success, collision or timeout."""
    config = config or EpisodeConfig(tuple(goal))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    l = shortest_path if shortest_path is not None else _shortest(scene, start, goal)
    controller = agent.start(scene, goal, rng)
    state, steps, p = start, 0, 0.0
    trace = [state.pose] if keep_trace else None
    while True:
        status = episode_status(scene, state, config, steps)
        if status is not Status.RUNNING:
            break
        nxt = step_kinematics(state, controller.act(state), config.dt, scene.limits)
        p += math.hypot(nxt.x - state.x, nxt.y - state.y)
        state = nxt
        steps += 1
        if keep_trace:
            trace.append(state.pose)
    d = math.hypot(state.x - goal[0], state.y - goal[1])
    return EpisodeResult(scene.id, status, p, l, d, steps, agent.label, split,
                         tuple(trace) if keep_trace else ())


def make_episodes(scenes, count: int, seed: int, split: str = "seen",
                  min_geo: float = 2.0, max_geo: float = 5.0) -> list[EpisodeSpec]:
    """``count`` start/goal pairs per scene; each depends only on (seed, scene, index)."""
    out = []
    for sc in scenes:
        for i in range(count):
            rng = np.random.default_rng([seed, zlib.crc32(sc.id.encode()), i, 0xE7A1])
            sg = sample_start_goal(sc, rng, min_geo, max_geo)
            ep_seed = int(np.random.default_rng([seed, zlib.crc32(sc.id.encode()), i])
                          .integers(2**63))
            out.append(EpisodeSpec(sc, sg.start, sg.goal, max(sg.geodesic, 1e-6), ep_seed, split))
    return out


_WORKER_AGENT = None


def _init_worker(agent):
    global _WORKER_AGENT
    _WORKER_AGENT = agent


def _run_spec(args):
    spec, config_kw = args
    cfg = EpisodeConfig(spec.goal, **config_kw)
    return run_episode(spec.scene, spec.start, spec.goal, _WORKER_AGENT, cfg, spec.seed,
                       spec.shortest_path, spec.split)


def evaluate_agent(agent, episodes, workers: int = 1, success_radius: float = 0.36,
                   max_steps: int = 500, dt: float = 1.0 / 30.0) -> list[EpisodeResult]:
    """Results in episode order; identical for any worker count."""
    kw = {"success_radius": success_radius, "max_steps": max_steps, "dt": dt}
    tasks = [(ep, kw) for ep in episodes]
    if workers > 1:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(agent,)) as pool:
            return list(pool.map(_run_spec, tasks, chunksize=1))
    _init_worker(agent)
    return [_run_spec(t) for t in tasks]


def scene_seeds(seed: int, count: int, split: str = "seen") -> list[int]:
    """Scene seeds for an experiment; seen and novel ranges never overlap."""
    if not 0 <= count <= _SEEDS_PER_EXPERIMENT:
        raise ValueError(f"at most {_SEEDS_PER_EXPERIMENT} scenes per split")
    base = SEEN_SEED_BASE if split == "seen" else NOVEL_SEED_BASE
    if split not in ("seen", "novel") or not 0 <= seed < NOVEL_SEED_BASE // _SEEDS_PER_EXPERIMENT:
        raise ValueError(f"bad split {split!r} or seed {seed}")
    start = base + seed * _SEEDS_PER_EXPERIMENT
    return list(range(start, start + count))


def make_scenes(seed: int, count: int, split: str = "seen",
                params: SceneParams = SceneParams()) -> list[Scene]:
    """Seen scenes use ``params``; novel scenes cycle through a different layout mix."""
    out = []
    for i, s in enumerate(scene_seeds(seed, count, split)):
        p = params
        if split == "novel":
            p = SceneParams(**{**asdict(params), "layout": NOVEL_LAYOUTS[i % len(NOVEL_LAYOUTS)]})
        out.append(generate_scene(p, s, scene_id=f"{split}_{s:07d}"))
    return out


# --- metrics ---

@dataclass(frozen=True)
class MetricRow:
    scene: str
    SR: float
    SPL: float
    NE: float
    episodes: int
    split: str = ""

    def __post_init__(self):
        if not (0 <= self.SPL <= self.SR + 1e-12 <= 1 + 1e-12) or self.NE < 0:
            raise ValueError(f"metric row violates 0 <= SPL <= SR <= 1, NE >= 0: {self}")


def compute_metrics(results, ne_mode: str = "all", scene: str = "all", split: str = "") -> MetricRow:
    """SR, SPL and NE over ``results``.

    ``ne_mode="all"`` averages the final goal distance over every episode
    with successes counting 0; ``"failures"`` averages over failed episodes
    only (0 if there are none).
    """
    results = list(results)
    if not results:
        raise EvaluationError("cannot compute metrics of an empty result set")
    if ne_mode not in NE_MODES:
        raise ValueError(f"ne_mode must be one of {NE_MODES}")
    # sort for an order-independent floating point sum
    terms = sorted((r.outcome is Status.SUCCESS,
                    r.shortest_path / max(r.path_length, r.shortest_path),
                    r.final_goal_distance) for r in results)
    n = len(terms)
    s = [t[0] for t in terms]
    sr = sum(s) / n
    spl = math.fsum(t[1] for t in terms if t[0]) / n
    fails = [t[2] for t in terms if not t[0]]
    if ne_mode == "all":
        ne = math.fsum(fails) / n
    else:
        ne = math.fsum(fails) / len(fails) if fails else 0.0
    return MetricRow(scene, sr, min(spl, sr), ne, n, split)


@dataclass
class MetricsReport:
    rows: list  # MetricRow, per scene then average rows
    cost: list = field(default_factory=list)  # dicts with COST_COLUMNS

    @property
    def empty(self) -> bool:
        return not self.rows


def build_report(results, ne_mode: str = "all", cost=None) -> MetricsReport:
    """Per-scene rows followed by seen / novel / all average rows.

    Average rows pool the episodes of their group.  ``all-average`` appears
    only when both groups are present.
    """
    results = list(results)
    rows = []
    groups = {}
    for r in results:
        groups.setdefault((r.split, r.scene_id), []).append(r)
    for (split, sid) in sorted(groups, key=lambda k: (k[0] != "seen", k[0], k[1])):
        rows.append(compute_metrics(groups[(split, sid)], ne_mode, sid, split))
    splits = [s for s in ("seen", "novel") if any(r.split == s for r in results)]
    for s in splits:
        rows.append(compute_metrics([r for r in results if r.split == s], ne_mode,
                                    f"{s}-average", s))
    if len(splits) > 1:
        rows.append(compute_metrics(results, ne_mode, "all-average", "all"))
    return MetricsReport(rows, list(cost or []))


# --- report files ---

def _num(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def emit_report(report: MetricsReport, path, fmt: str | None = None) -> None:
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "json":
        doc = {"version": REPORT_VERSION, "empty": report.empty,
               "columns": list(REPORT_COLUMNS),
               "rows": [asdict(r) for r in report.rows],
               "cost_columns": list(COST_COLUMNS), "cost": report.cost}
        text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        buf.write(f"# voxnav report v{REPORT_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        if report.empty:
            buf.write("# empty\n")
        for r in report.rows:
            w.writerow([_num(getattr(r, c)) for c in REPORT_COLUMNS])
        if report.cost:
            buf.write("\n# cost\n")
            w.writerow(COST_COLUMNS)
            for c in report.cost:
                w.writerow([_num(c[k]) if k != "real_time" else str(bool(c[k])).lower()
                            for k in COST_COLUMNS])
        text = buf.getvalue()
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w") as f:
        f.write(text)


def read_report(path) -> MetricsReport:
    text = open(path).read()
    if str(path).endswith(".json"):
        doc = json.loads(text)
        if doc.get("version") != REPORT_VERSION:
            raise EvaluationError(f"{path}: unsupported report version")
        return MetricsReport([MetricRow(**r) for r in doc["rows"]], doc["cost"])
    lines = text.splitlines()
    if not lines or lines[0] != f"# voxnav report v{REPORT_VERSION}":
        raise EvaluationError(f"{path}: missing or unsupported report version line")
    rows, cost, section = [], [], "rows"
    for rec in csv.reader(lines[1:]):
        if not rec or rec[0] in ("# empty",):
            continue
        if rec[0] == "# cost":
            section = "cost"
            continue
        if tuple(rec) in (REPORT_COLUMNS, COST_COLUMNS):
            continue
        if section == "rows":
            scene, sr, spl, ne, n, split = rec
            rows.append(MetricRow(scene, float(sr), float(spl), float(ne), int(n), split))
        else:
            agent, macs, params, hz, rt = rec
            cost.append({"agent": agent, "macs": int(macs), "params": int(params),
                         "hz": float(hz), "real_time": rt == "true"})
    return MetricsReport(rows, cost)


def write_traces_csv(results, path) -> None:
    """Pose traces (episode, step, x, y, heading) for external plotting."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("episode", "scene", "step", "x", "y", "heading"))
        for i, r in enumerate(results):
            for k, (x, y, h) in enumerate(r.trace):
                w.writerow((i, r.scene_id, k, repr(x), repr(y), repr(h)))


# --- cost and ablations ---

def benchmark_agent(agent, observations, repetitions: int = 100) -> dict:
    """Forward-pass rate of an agent's networks on sample observations.

    ``observations`` is a sequence of (grid, goal) pairs with grids shaped for
    the agent's first network; they are cycled through.
    """
    if repetitions < 10:
        raise ValueError("repetitions must be >= 10")
    nets = agent.networks() if hasattr(agent, "networks") else [agent]
    macs = sum(count_cost(n)["macs"] for n in nets)
    params = sum(count_cost(n)["params"] for n in nets)
    proxy = next((n for n in nets if isinstance(n, ProxyNet)), None)
    policy = next((n for n in nets if isinstance(n, PolicyNet)), None)
    observations = list(observations)
    t0 = time.perf_counter()
    for i in range(repetitions):
        grid, goal = observations[i % len(observations)]
        x = np.asarray(grid, dtype=np.float32)[None]
        if proxy is not None:
            x = proxy.forward(x)[:, 0]
        if policy is not None:
            policy.forward(x, np.asarray(goal, dtype=np.float32)[None])
    wall = time.perf_counter() - t0
    hz = repetitions / wall if wall > 0 else math.inf
    label = getattr(agent, "label", getattr(agent, "name", type(agent).__name__))
    return {"agent": label, "macs": macs, "params": params, "hz": hz, "real_time": hz > 30}


@dataclass
class AblationRow:
    arm: str
    metrics: MetricRow | None
    error: str = ""


def run_ablation(arms: dict, episodes, workers: int = 1, ne_mode: str = "all",
                 **episode_kwargs) -> list[AblationRow]:
    """Evaluate every arm on the same episode list.

    Each arm value is an agent or a zero-argument callable building one (so
    that training can happen lazily); a failing arm yields a row carrying
    the error message instead of aborting the table.
    """
    rows = []
    for name, arm in arms.items():
        try:
            agent = arm() if callable(arm) and not hasattr(arm, "start") else arm
            res = evaluate_agent(agent, episodes, workers, **episode_kwargs)
            rows.append(AblationRow(name, compute_metrics(res, ne_mode, name)))
        except Exception as exc:  # noqa: BLE001 - reported per arm
            rows.append(AblationRow(name, None, f"{type(exc).__name__}: {exc}"))
    return rows


def ablation_table(rows) -> str:
    """Side-by-side text table of ablation arms."""
    out = ["arm,SR,SPL,NE,episodes,error"]
    for r in rows:
        m = r.metrics
        vals = (f"{m.SR:.4f},{m.SPL:.4f},{m.NE:.4f},{m.episodes}" if m else ",,,")
        out.append(f"{r.arm},{vals},{r.error}")
    return "\n".join(out) + "\n"
