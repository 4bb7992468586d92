import csv
import json
import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import spl_reference
from voxnav import evaluate as E
from voxnav.nets import PolicyNet, ProxyNet
from voxnav.voxgrid import GridSpec
from voxnav.world import RobotState, Status

S, C, T = Status.SUCCESS, Status.COLLISION, Status.TIMEOUT


def _res(outcome, p, l, d, scene="a", split="seen"):
    return E.EpisodeResult(scene, outcome, p, l, d, 10, "test", split)


# --- metrics ---

def test_metric_closed_forms():
    m = E.compute_metrics([_res(S, 3.0, 3.0, 0.1)])
    assert (m.SR, m.SPL, m.NE) == (1.0, 1.0, 0.0)
    m = E.compute_metrics([_res(C, 1.0, 3.0, 3.2)])
    assert (m.SR, m.SPL, m.NE) == (0.0, 0.0, 3.2)
    m = E.compute_metrics([_res(S, 10.0, 5.0, 0.2), _res(T, 2.0, 5.0, 4.0)])
    assert (m.SR, m.SPL, m.NE) == (0.5, 0.25, 2.0)


def test_ne_over_failures_only():
    rs = [_res(S, 10.0, 5.0, 0.2), _res(T, 2.0, 5.0, 4.0), _res(C, 2.0, 5.0, 1.0)]
    assert E.compute_metrics(rs, ne_mode="all").NE == pytest.approx(5.0 / 3)
    assert E.compute_metrics(rs, ne_mode="failures").NE == 2.5
    assert E.compute_metrics(rs[:1], ne_mode="failures").NE == 0.0
    with pytest.raises(ValueError):
        E.compute_metrics(rs, ne_mode="median")


def test_empty_results_rejected():
    with pytest.raises(E.EvaluationError):
        E.compute_metrics([])


def test_episode_result_validation():
    with pytest.raises(ValueError):
        _res(S, -1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        _res(S, 1.0, 0.0, 0.0)


def _random_results(rng, n):
    out = []
    for _ in range(n):
        ok = rng.random() < 0.5
        l = rng.uniform(0.5, 8)
        out.append(_res(S if ok else rng.choice([C, T]), rng.uniform(0, 15), l,
                        rng.uniform(0, 0.36) if ok else rng.uniform(0, 8)))
    return out


def test_spl_never_exceeds_sr_and_matches_reference():
    rng = random.Random(0)
    for _ in range(1000):
        rs = _random_results(rng, rng.randint(1, 30))
        m = E.compute_metrics(rs)
        assert 0 <= m.SPL <= m.SR <= 1 and m.NE >= 0
        ref = spl_reference((r.outcome is S, r.shortest_path, r.path_length,
                             r.final_goal_distance) for r in rs)
        assert (m.SR, m.SPL, m.NE) == pytest.approx(ref, abs=1e-12)


@given(st.integers(1, 40), st.integers(0, 10_000))
def test_metrics_are_permutation_invariant(n, seed):
    rng = random.Random(seed)
    rs = _random_results(rng, n)
    shuffled = rs[:]
    rng.shuffle(shuffled)
    assert E.compute_metrics(rs) == E.compute_metrics(shuffled)


# --- reports ---

def test_single_scene_report_has_average_row():
    rep = E.build_report([_res(S, 2.0, 2.0, 0.1), _res(T, 1.0, 2.0, 3.0)])
    assert [r.scene for r in rep.rows] == ["a", "seen-average"]
    assert [r.SR for r in rep.rows] == [0.5, 0.5]


def test_report_groups_seen_and_novel():
    rs = [_res(S, 2.0, 2.0, 0.1, "s1"), _res(T, 1.0, 2.0, 3.0, "s2"),
          _res(S, 3.0, 2.0, 0.2, "n1", "novel"), _res(C, 1.0, 2.0, 1.0, "n1", "novel")]
    rep = E.build_report(rs)
    assert [r.scene for r in rep.rows] == ["s1", "s2", "n1", "seen-average", "novel-average",
                                           "all-average"]
    assert rep.rows[-1].episodes == 4 and rep.rows[-1].SR == 0.5


def test_report_round_trips(tmp_path):
    rs = [_res(S, 2.1, 2.0, 0.1, "s1"), _res(T, 1.3, 2.7, 3.3, "n1", "novel")]
    cost = [{"agent": "gt_grid_policy", "macs": 123, "params": 45, "hz": 88.5, "real_time": True}]
    rep = E.build_report(rs, cost=cost)
    E.emit_report(rep, tmp_path / "r.json")
    a = E.read_report(tmp_path / "r.json")
    E.emit_report(a, tmp_path / "r.csv")
    b = E.read_report(tmp_path / "r.csv")
    E.emit_report(b, tmp_path / "r2.json")
    c = E.read_report(tmp_path / "r2.json")
    assert a.rows == b.rows == c.rows == rep.rows
    assert a.cost == b.cost == c.cost == cost
    assert (tmp_path / "r.json").read_text() == (tmp_path / "r2.json").read_text()
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# voxnav report v1"
    assert lines[1] == "scene,SR,SPL,NE,episodes,split"


def test_empty_report_has_marker(tmp_path):
    rep = E.build_report([])
    assert rep.empty
    E.emit_report(rep, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().splitlines() == [
        "# voxnav report v1", "scene,SR,SPL,NE,episodes,split", "# empty"]
    assert E.read_report(tmp_path / "e.csv").empty
    E.emit_report(rep, tmp_path / "e.json")
    assert json.loads((tmp_path / "e.json").read_text())["empty"] is True


def test_report_version_checked(tmp_path):
    (tmp_path / "x.csv").write_text("# voxnav report v9\n")
    with pytest.raises(E.EvaluationError):
        E.read_report(tmp_path / "x.csv")
    with pytest.raises(ValueError):
        E.emit_report(E.build_report([]), tmp_path / "x.txt", fmt="xml")


# --- episodes ---

def test_zero_agent_times_out_without_moving(small_scene):
    start = RobotState(1.0, 1.0, 0.0)
    r = E.run_episode(small_scene, start, (3.0, 3.0), E.ZeroAgent(),
                      E.EpisodeConfig((3.0, 3.0), max_steps=40))
    assert r.outcome is T and r.path_length == 0.0 and r.steps == 40
    assert r.final_goal_distance == pytest.approx(math.hypot(2, 2))


def test_start_inside_success_radius(small_scene):
    r = E.run_episode(small_scene, RobotState(1.0, 1.0, 0.0), (1.2, 1.1), E.ZeroAgent())
    assert r.outcome is S and r.steps == 0 and r.path_length == 0.0


def test_expert_episode_succeeds_with_plausible_length(small_scene):
    start, goal = RobotState(0.8, 0.8, 0.0), (3.2, 3.2)
    r = E.run_episode(small_scene, start, goal, E.ExpertPolicy(), keep_trace=True)
    assert r.outcome is S
    assert r.final_goal_distance <= 0.36
    assert r.path_length >= math.hypot(2.4, 2.4) - 0.36
    assert len(r.trace) == r.steps + 1 and r.trace[0] == start.pose


def test_traces_csv(small_scene, tmp_path):
    r = E.run_episode(small_scene, RobotState(0.8, 0.8, 0.0), (3.2, 3.2), E.ExpertPolicy(),
                      keep_trace=True)
    E.write_traces_csv([r], tmp_path / "t.csv")
    with open(tmp_path / "t.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == len(r.trace) and rows[0]["scene"] == small_scene.id


def test_episodes_depend_only_on_scene_and_index(clutter_scene, small_scene):
    alone = E.make_episodes([clutter_scene], 3, seed=5)
    both = E.make_episodes([small_scene, clutter_scene], 3, seed=5)
    mine = [e for e in both if e.scene is clutter_scene]
    assert [(e.start, e.goal, e.seed) for e in alone] == [(e.start, e.goal, e.seed) for e in mine]
    assert all(2.0 <= e.shortest_path <= 5.0 + 1e-9 for e in alone)


def test_worker_count_does_not_change_results(clutter_scene):
    eps = E.make_episodes([clutter_scene], 3, seed=1)
    one = E.evaluate_agent(E.ExpertPolicy(), eps, workers=1, max_steps=200)
    two = E.evaluate_agent(E.ExpertPolicy(), eps, workers=2, max_steps=200)
    assert one == two


def test_learned_agent_runs_closed_loop(clutter_scene):
    eps = E.make_episodes([clutter_scene], 2, seed=2)
    policy, proxy = PolicyNet(4, seed=0), ProxyNet(4, seed=0)
    agent = E.GridPolicyAgent(policy, GridSpec.cubic(16), proxy=proxy)
    assert agent.label == "snn_proxy_policy" and agent.factor == 4
    a = E.evaluate_agent(agent, eps, max_steps=20)
    b = E.evaluate_agent(agent, eps, max_steps=20)
    assert a == b and all(r.steps <= 20 for r in a)
    assert E.GridPolicyAgent(policy).label == "gt_grid_policy"
    with pytest.raises(ValueError):
        E.GridPolicyAgent(policy, GridSpec.cubic(6))
    with pytest.raises(ValueError):
        E.GridPolicyAgent(PolicyNet(8), proxy=ProxyNet(4))


# --- scenes ---

def test_seen_and_novel_seeds_are_disjoint():
    seen = set(E.scene_seeds(0, 1000, "seen"))
    novel = set(E.scene_seeds(0, 1000, "novel"))
    assert not seen & novel
    assert not set(E.scene_seeds(1, 5, "seen")) & seen
    with pytest.raises(ValueError):
        E.scene_seeds(0, 1001)
    with pytest.raises(ValueError):
        E.scene_seeds(0, 3, "test")


def test_novel_scenes_use_other_layouts():
    novel = E.make_scenes(0, 2, "novel")
    assert [s.id for s in novel] == ["novel_1000000", "novel_1000001"]
    assert {s.params.layout for s in novel} == set(E.NOVEL_LAYOUTS)


# --- ablation and cost ---

def test_identical_arms_give_identical_metrics(clutter_scene):
    eps = E.make_episodes([clutter_scene], 2, seed=3)
    policy = PolicyNet(4, seed=1)
    rows = E.run_ablation({"a": lambda: E.GridPolicyAgent(policy, GridSpec.cubic(16)),
                           "b": lambda: E.GridPolicyAgent(policy, GridSpec.cubic(16)),
                           "broken": lambda: E.GridPolicyAgent(policy, GridSpec.cubic(6))},
                          eps, max_steps=15)
    assert rows[0].metrics.SR == rows[1].metrics.SR
    assert (rows[0].metrics.SPL, rows[0].metrics.NE) == (rows[1].metrics.SPL, rows[1].metrics.NE)
    assert rows[2].metrics is None and "ValueError" in rows[2].error
    table = E.ablation_table(rows).splitlines()
    assert table[0] == "arm,SR,SPL,NE,episodes,error" and table[3].startswith("broken,,,,,")


def test_reference_rows_documented():
    assert E.REFERENCE_GRID_SR == {64: 0.52, 16: 0.39, 4: 0.22}
    assert E.REFERENCE_MODULAR_SR == {"modular": 0.35, "non-modular": 0.22}


def test_benchmark_stub_and_validation():
    out = E.benchmark_agent(E.ZeroAgent(), [(np.zeros((1, 1, 1)), np.zeros(3))], repetitions=10)
    assert (out["macs"], out["params"]) == (0, 0)
    with pytest.raises(ValueError):
        E.benchmark_agent(E.ZeroAgent(), [], repetitions=9)


def test_benchmark_costs_are_analytic_and_ordered():
    reports = []
    for n in (4, 16, 64):
        agent = E.GridPolicyAgent(PolicyNet(n, seed=0))
        obs = [(np.zeros((n, n, n), bool), np.array([1.0, 1.0, 0.0]))]
        a = E.benchmark_agent(agent, obs, repetitions=10)
        b = E.benchmark_agent(agent, obs, repetitions=10)
        assert (a["macs"], a["params"]) == (b["macs"], b["params"])
        assert a["hz"] > 0 and a["real_time"] == (a["hz"] > 30)
        reports.append(a)
    assert reports[0]["params"] < reports[1]["params"] < reports[2]["params"]
    assert reports[0]["macs"] < reports[1]["macs"] < reports[2]["macs"]
