"""Acceptance criteria 1-10, one verdict line each.

Every test prints ``criterion N PASS|FAIL: detail`` (also repeated in the
terminal summary) and then asserts.  Criteria 4-8 train and evaluate real
policies and take most of an hour on one CPU core; everything they need is
built once per session by the fixtures below.
"""

import math
import random
import time
from dataclasses import replace

import numpy as np
import pytest

import conftest
from oracles import (central_difference, conv3d_naive, dijkstra_moves, random_map,
                     relative_error, spl_reference)
from voxnav import cli
from voxnav import evaluate as ev
from voxnav import tensor as tn
from voxnav.expert import collect_demonstrations
from voxnav.nets import PolicyNet, ProxyNet
from voxnav.planning import NoPathError, plan_astar
from voxnav.train import (TrainConfig, frames_from, run_pipeline, split_dataset,
                          train_gt_policy, train_joint)
from voxnav.voxgrid import GridSpec, ProbGrid, VoxelGrid, iou_loss, soft_iou_loss
from voxnav.world import RobotState, Status, check_collision

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
SCENES, DEMOS_PER_SCENE = 5, 40  # 200 demonstrations
EVAL_PER_SCENE = 10  # 50 evaluation episodes
EVAL_SEED = 123
GRID_STRIDE, GRID_EPOCHS = 5, 20
MODULAR_STRIDE, MODULAR_EPOCHS = 20, (30, 10, 60)
NOVEL_MARGIN = 0.5
TIMINGS = {}


def verdict(n, ok, detail):
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    conftest.VERDICTS.append(line)
    assert ok, line


# --- shared artifacts ---

@pytest.fixture(scope="session")
def seen_scenes():
    return ev.make_scenes(0, SCENES, "seen")


@pytest.fixture(scope="session")
def dataset(seen_scenes):
    """200 expert demonstrations sensed at 16^3 with the default camera."""
    t0 = time.perf_counter()
    ds = collect_demonstrations(seen_scenes, DEMOS_PER_SCENE, seed=0, spec=GridSpec.cubic(16))
    TIMINGS["collect"] = time.perf_counter() - t0
    return ds


@pytest.fixture(scope="session")
def seen_episodes(seen_scenes):
    return ev.make_episodes(seen_scenes, EVAL_PER_SCENE, EVAL_SEED)


@pytest.fixture(scope="session")
def grid_policies(dataset):
    """GT-grid policies per (seed, grid size), trained identically."""
    t0 = time.perf_counter()
    out = {}
    for seed in SEEDS:
        tr, va = split_dataset(dataset, 0.8, seed)
        for n in (16, 4):
            cfg = TrainConfig(seed=seed, grid_size=n, frame_stride=GRID_STRIDE)
            policy, _ = train_gt_policy(frames_from(tr, n, GRID_STRIDE),
                                        frames_from(va, n, GRID_STRIDE), cfg, epochs=GRID_EPOCHS)
            out[seed, n] = policy
    TIMINGS["grid_train"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def grid_results(dataset, grid_policies, seen_episodes):
    t0 = time.perf_counter()
    out = {key: ev.evaluate_agent(ev.GridPolicyAgent(p, dataset.spec), seen_episodes)
           for key, p in grid_policies.items()}
    TIMINGS["grid_eval"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def modular_runs(dataset, seen_episodes):
    """Per seed: modular and joint-only proxy agents plus the GT-grid upper bound."""
    p, q, j = MODULAR_EPOCHS
    out = {}
    TIMINGS["modular"] = TIMINGS["gt_bound"] = 0.0
    for seed in SEEDS:
        t0 = time.perf_counter()
        cfg = TrainConfig(seed=seed, grid_size=16, frame_stride=MODULAR_STRIDE,
                          epochs_perception=p, epochs_policy=q, epochs_joint=j)
        tr, va = split_dataset(dataset, 0.8, seed)
        ftr, fva = frames_from(tr, 16, MODULAR_STRIDE), frames_from(va, 16, MODULAR_STRIDE)
        row = {}
        for modular in (True, False):
            models = run_pipeline(ftr, fva, replace(cfg, modular=modular))
            val = [r for r in models.curve if r["split"] == "val"][-1]["total"]
            res = ev.evaluate_agent(ev.GridPolicyAgent(models.policy, dataset.spec, models.proxy),
                                    seen_episodes)
            row["modular" if modular else "non-modular"] = (ev.compute_metrics(res).SR, val)
        TIMINGS["modular"] += time.perf_counter() - t0
        t0 = time.perf_counter()
        # same data, seeds and policy-update budget as the proxy pipeline's policy
        gt, _ = train_gt_policy(ftr, fva, cfg, epochs=q + j)
        res = ev.evaluate_agent(ev.GridPolicyAgent(gt, dataset.spec), seen_episodes)
        row["gt"] = (ev.compute_metrics(res).SR, None)
        TIMINGS["gt_bound"] += time.perf_counter() - t0
        out[seed] = row
    return out


# --- criteria ---

def test_criterion_1_oracle_suite(frozen):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(100):
        blocked, s, g = random_map(seed)
        ref = dijkstra_moves(blocked, s, g)
        try:
            cost = plan_astar(blocked, s, g).cost
        except NoPathError:
            cost = None
        if ref is None:
            mismatches += cost is not None
        else:
            mismatches += cost is None or abs(cost - (ref[0] + ref[1] * math.sqrt(2))) > 1e-9

    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 6, 6, 6)).astype(np.float32)
    w = rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    conv_err = float(np.abs(tn.conv3d(x, w, b, 2, 1)[0] - conv3d_naive(x, w, b, 2, 1)).max())

    worst = {}
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = r.standard_normal((2, 2, 4, 4, 4))
        w = r.standard_normal((2, 2, 3, 3, 3))
        wt = r.standard_normal((2, 2, 2, 2, 2))
        lx, lw = r.standard_normal((3, 5)), r.standard_normal((4, 5))
        bias2, bias4 = r.standard_normal(2), r.standard_normal(4)
        gamma, beta = r.standard_normal(4), r.standard_normal(4)
        cases = {
            "conv3d": (lambda: tn.conv3d(x, w, bias2, 2, 1), tn.conv3d_backward, (x, w, bias2)),
            "conv_transpose3d": (lambda: tn.conv_transpose3d(x, wt, bias2, 2, 0),
                                 tn.conv_transpose3d_backward, (x, wt, bias2)),
            "linear": (lambda: (tn.linear(lx, lw, bias4)[0], None),
                       lambda g, _: tn.linear_backward(g, lx, lw), (lx, lw, bias4)),
        }
        for train in (True, False):
            bx = r.standard_normal((5, 4))
            rm, rv = r.standard_normal(4), r.uniform(0.5, 2, 4)
            cases[f"batchnorm_{'train' if train else 'eval'}"] = (
                lambda bx=bx, rm=rm, rv=rv, train=train: tn.batchnorm(
                    bx, gamma, beta, rm.copy(), rv.copy(), train),
                tn.batchnorm_backward, (bx, gamma, beta))
        ex = r.standard_normal(8) + 0.05
        cases["relu"] = (lambda: (tn.relu(ex), None),
                         lambda g, _: (tn.relu_backward(g, ex),), (ex,))
        cases["sigmoid"] = (lambda: (tn.sigmoid(ex), None),
                            lambda g, _: (tn.sigmoid_backward(g, tn.sigmoid(ex)),), (ex,))
        pt = r.standard_normal((4, 2))
        cases["mse"] = (lambda: (np.array(tn.mse_loss(ex[:8].reshape(4, 2), pt)[0]), None),
                        lambda g, _: (tn.mse_loss(ex[:8].reshape(4, 2), pt)[1].reshape(-1) * g,), (ex,))
        for name, (fwd, bwd, inputs) in cases.items():
            y, cache = fwd()
            g = r.standard_normal(np.shape(y))
            grads = bwd(g, cache)
            for arr, grad in zip(inputs, grads):
                num = central_difference(lambda: float((fwd()[0] * g).sum()), arr)
                worst[name] = max(worst.get(name, 0.0), relative_error(grad, num))
    elapsed = time.perf_counter() - t0
    ok = (mismatches == 0 and conv_err <= 1e-5 and max(worst.values()) <= 1e-3
          and elapsed < 120)
    verdict(1, ok, f"A* vs Dijkstra mismatches {mismatches}/100, conv max abs {conv_err:.1e}, "
                   f"worst backward rel err {max(worst.values()):.1e} over {len(worst)} layers "
                   f"x 20 instances, {elapsed:.0f}s")


def test_criterion_2_losses():
    spec = GridSpec(2, 2, 1)
    a = VoxelGrid(spec, np.array([[[1], [1]], [[1], [0]]], bool))
    b = VoxelGrid(spec, np.array([[[1], [1]], [[0], [0]]], bool))
    empty = VoxelGrid.empty(spec)
    hand = (iou_loss(a, a), iou_loss(a, VoxelGrid(spec, ~a.cells)), iou_loss(a, b), iou_loss(empty, empty))
    hand_ok = hand == (0.0, 1.0, 1 / 3, 0.0) and iou_loss(b, VoxelGrid(spec, np.ones((2, 2, 1), bool))) == 0.5
    a3 = VoxelGrid(GridSpec(3, 1, 1), np.array([[[1]], [[1]], [[1]]], bool))
    b3 = VoxelGrid(GridSpec(3, 1, 1), np.array([[[1]], [[0]], [[0]]], bool))
    hand_ok &= iou_loss(a3, b3) == 2 / 3
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        g = VoxelGrid(GridSpec(5, 4, 3), rng.random((5, 4, 3)) < 0.4)
        h = rng.random((5, 4, 3)) < 0.4
        worst = max(worst, abs(soft_iou_loss(g, ProbGrid(g.spec, h.astype(np.float32)))
                               - iou_loss(g, VoxelGrid(g.spec, h))))
    cells = rng.random((24, 8, 8, 8)) < 0.2
    frames = _tiny_frames(cells)
    _, steps = train_joint(ProxyNet(8), PolicyNet(8, (2, 3, 2, 4)), frames, frames,
                           TrainConfig(grid_size=8, batch_size=8, alpha=0.1), epochs=2)
    book = max(abs(s["total"] - (s["L_p"] + 0.1 * s["L_o"])) for s in steps)
    ok = hand_ok and worst <= 1e-6 and book <= 1e-12 and len(steps) == 6
    verdict(2, ok, f"iou hand cases {'exact' if hand_ok else hand}, soft vs hard max diff "
                   f"{worst:.1e}, joint total - (L_p + 0.1 L_o) max {book:.1e} over {len(steps)} steps")


def _tiny_frames(cells):
    from voxnav.train import Frames
    n = len(cells)
    rng = np.random.default_rng(1)
    return Frames(cells, rng.standard_normal((n, 3)).astype(np.float32),
                  rng.standard_normal((n, 2)).astype(np.float32), np.arange(n))


def test_criterion_3_metrics():
    def res(outcome, p, l, d):
        return ev.EpisodeResult("s", outcome, p, l, d, 1, "x")

    cases = [
        ([res(Status.SUCCESS, 4.0, 4.0, 0.1)], (1.0, 1.0, 0.0)),
        ([res(Status.TIMEOUT, 1.0, 4.0, 3.2)], (0.0, 0.0, 3.2)),
        ([res(Status.SUCCESS, 10.0, 5.0, 0.1), res(Status.COLLISION, 2.0, 5.0, 4.0)],
         (0.5, 0.25, 2.0)),
    ]
    exact = all((lambda m: (m.SR, m.SPL, m.NE))(ev.compute_metrics(r)) == want
                for r, want in cases)
    rnd = random.Random(0)
    violations, worst = 0, 0.0
    for _ in range(1000):
        rs = []
        for _ in range(rnd.randint(1, 25)):
            ok = rnd.random() < 0.5
            rs.append(res(Status.SUCCESS if ok else Status.TIMEOUT, rnd.uniform(0, 12),
                          rnd.uniform(0.3, 8), rnd.uniform(0, 0.3) if ok else rnd.uniform(0, 8)))
        m = ev.compute_metrics(rs)
        violations += not (m.SPL <= m.SR)
        ref = spl_reference((r.outcome is Status.SUCCESS, r.shortest_path, r.path_length,
                             r.final_goal_distance) for r in rs)
        worst = max(worst, abs(ref[1] - m.SPL))
    verdict(3, exact and violations == 0 and worst <= 1e-12,
            f"closed forms {'exact' if exact else 'WRONG'}, SPL > SR in {violations}/1000 "
            f"random sets, SPL vs reference max diff {worst:.1e}")


def test_criterion_4_expert_quality(seen_scenes, dataset):
    t0 = time.perf_counter()
    episodes = ev.make_episodes(seen_scenes, DEMOS_PER_SCENE, seed=4)
    results = ev.evaluate_agent(ev.ExpertPolicy(), episodes)
    sr = ev.compute_metrics(results).SR
    elapsed = time.perf_counter() - t0
    collided = 0
    by_id = {s.id: s for s in seen_scenes}
    for demo in dataset.demos:
        scene = by_id[demo.scene_id]
        collided += demo.outcome is not Status.SUCCESS or any(
            check_collision(scene, RobotState(float(x), float(y), float(h)))
            for x, y, h in demo.poses)
    ok = len(results) == 200 and sr >= 0.95 and collided == 0 and elapsed < 600
    verdict(4, ok, f"expert SR {sr:.3f} over {len(results)} episodes in {elapsed:.0f}s; "
                   f"{collided}/{len(dataset)} kept demonstrations touch an obstacle")


def test_criterion_5_grid_resolution_trend(grid_results):
    sr = {key: ev.compute_metrics(r).SR for key, r in grid_results.items()}
    mean16 = np.mean([sr[s, 16] for s in SEEDS])
    mean4 = np.mean([sr[s, 4] for s in SEEDS])
    per_seed = ", ".join(f"seed {s}: {sr[s, 16]:.2f}/{sr[s, 4]:.2f}" for s in SEEDS)
    n_eps = len(grid_results[SEEDS[0], 16])
    minutes = sum(TIMINGS.get(k, 0.0) for k in ("collect", "grid_train", "grid_eval")) / 60
    verdict(5, mean16 - mean4 >= 0.05 and n_eps == 50 and minutes < 45,
            f"SR 16^3 {mean16:.3f} vs 4^3 {mean4:.3f} (gap {100 * (mean16 - mean4):+.1f} points, "
            f"need >= 5; {per_seed}; {n_eps} episodes per seed; {minutes:.1f} min including "
            "data collection)")


def test_criterion_6_modular_learning_trend(modular_runs):
    sr_mod = np.mean([modular_runs[s]["modular"][0] for s in SEEDS])
    sr_non = np.mean([modular_runs[s]["non-modular"][0] for s in SEEDS])
    lower = sum(modular_runs[s]["modular"][1] < modular_runs[s]["non-modular"][1] for s in SEEDS)
    losses = ", ".join(f"{modular_runs[s]['modular'][1]:.4f}/{modular_runs[s]['non-modular'][1]:.4f}"
                       for s in SEEDS)
    minutes = TIMINGS["modular"] / 60
    verdict(6, sr_mod >= sr_non and lower >= 2 and minutes < 60,
            f"SR modular {sr_mod:.3f} vs joint-only {sr_non:.3f}; final val total lower for "
            f"modular in {lower}/3 seeds ({losses}); {minutes:.1f} min for both pipelines")


def test_criterion_7_ground_truth_upper_bound(modular_runs):
    sr_gt = np.mean([modular_runs[s]["gt"][0] for s in SEEDS])
    sr_proxy = np.mean([modular_runs[s]["modular"][0] for s in SEEDS])
    per_seed = ", ".join(f"seed {s}: {modular_runs[s]['gt'][0]:.2f}/{modular_runs[s]['modular'][0]:.2f}"
                         for s in SEEDS)
    verdict(7, sr_gt >= sr_proxy,
            f"SR gt_grid_policy {sr_gt:.3f} vs snn_proxy_policy {sr_proxy:.3f} over 3 seeds x 50 "
            f"episodes ({per_seed})")


def test_criterion_8_novel_scene_generalization(dataset, grid_policies, grid_results, tmp_path):
    novel = ev.make_scenes(0, SCENES, "novel")
    novel_eps = ev.make_episodes(novel, EVAL_PER_SCENE, EVAL_SEED, split="novel")
    drops = []
    report = None
    for seed in SEEDS:
        seen = grid_results[seed, 16]
        new = ev.evaluate_agent(ev.GridPolicyAgent(grid_policies[seed, 16], dataset.spec),
                                novel_eps)
        drops.append(ev.compute_metrics(seen).SR - ev.compute_metrics(new).SR)
        if report is None:
            report = ev.build_report(seen + new)
    ev.emit_report(report, tmp_path / "report.csv")
    back = ev.read_report(tmp_path / "report.csv")
    names = [r.scene for r in back.rows]
    layout_ok = (names[-3:] == ["seen-average", "novel-average", "all-average"]
                 and len(names) == 2 * SCENES + 3 and back.rows == report.rows)
    drop = float(np.mean(drops))
    verdict(8, drop <= NOVEL_MARGIN and layout_ok,
            f"mean SR drop seen->novel {drop:+.3f} (bound {NOVEL_MARGIN}; per seed "
            f"{', '.join(f'{d:+.2f}' for d in drops)}); report rows: {len(names) - 3} scenes + "
            f"{', '.join(names[-3:])}")


def test_criterion_9_cost_accounting():
    hand = (tn.count_cost(tn.Linear(256, 2), (256,)) == {"macs": 512, "params": 514}
            and tn.count_cost(tn.Conv3d(1, 4, 4, 2, 1), (1, 64, 64, 64)) ==
            {"macs": 8_388_608, "params": 260}
            and tn.count_cost(tn.BatchNorm1d(128), (128,)) == {"macs": 0, "params": 256})
    rows = []
    for n in (4, 16, 64):
        obs = [(np.zeros((n, n, n), bool), (1.0, 0.0, 1.0))]
        rows.append(ev.benchmark_agent(ev.GridPolicyAgent(PolicyNet(n), proxy=ProxyNet(n)), obs,
                                       repetitions=10))
    macs = [r["macs"] for r in rows]
    params = [r["params"] for r in rows]
    ordered = macs[0] < macs[1] < macs[2] and params[0] < params[1] < params[2]
    flags = all(r["hz"] > 0 and r["real_time"] == (r["hz"] > 30) for r in rows)
    hz = ", ".join(f"{r['hz']:.0f}" for r in rows)
    verdict(9, hand and ordered and flags,
            f"hand counts {'exact' if hand else 'WRONG'}; MACs {macs}, params {params} for "
            f"4/16/64; Hz {hz} "
            f"real_time {[r['real_time'] for r in rows]}")


def test_criterion_10_reproducibility(tmp_path):
    tiny = ["--scenes", "1", "--per-scene", "3", "--grid-size", "8", "--epochs-perception", "1",
            "--epochs-policy", "1", "--epochs-joint", "1", "--episodes", "2", "--novel-scenes",
            "1", "--max-steps", "40", "--batch-size", "8"]
    snapshots = []
    for name, workers in (("first", "1"), ("second", "1"), ("parallel", "4")):
        root = tmp_path / name
        for cmd in ("gen-scenes", "collect", "train", "evaluate"):
            assert cli.main([cmd, *tiny, "--out", str(root), "--workers", workers]) == 0
        snapshots.append({p.relative_to(root).as_posix(): p.read_bytes()
                          for p in sorted(root.rglob("*"))
                          if p.is_file() and not p.name.endswith(".config.json")})
    kinds = sorted({k.split("/")[0] for k in snapshots[0]})
    same = snapshots[0] == snapshots[1] == snapshots[2]
    verdict(10, same and {"dataset", "train", "eval"} <= set(kinds),
            f"{len(snapshots[0])} artifacts ({', '.join(kinds)}) "
            f"{'bit-identical' if same else 'DIFFER'} across two runs and workers 1 vs 4")
