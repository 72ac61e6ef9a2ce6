import math

import numpy as np
import pytest

from parkfail.envgen import (INTELLIGENT_A, INTELLIGENT_B, ORIGINAL, EnvironmentSpec, IntelligentProvider,
                             intelligent_maneuvers, is_critical_state_runtime, make_provider)
from parkfail.evaluation import failure_ratio
from parkfail.network import from_dict
from parkfail.perception import SensorConfig, SurrogateDetector, default_params
from parkfail.policy import N_FEATURES, PolicyError, PolicyModel, featurize, predict
from parkfail.recorder import dump_episode, scene_from_frame
from parkfail.sim import SceneState, SimConfig, StandardProvider, VehicleState, run_episode
from support import build, small_net, square_doc, two_bv_doc, two_bv_scene
from test_perception import oracle_visible


def random_model(net, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return PolicyModel({d: rng.normal(0, scale, size=(len(dp.options), N_FEATURES))
                        for d, dp in net.decision_points.items()})


def bv_scene(progress):
    av = VehicleState(0, "A-B", 0.0, 2.5, "AV")
    return SceneState(0, 0.0, (av, VehicleState(1, "A-B", progress, 0.0, "BV")), 2)


def test_radius_cut():
    net = from_dict(square_doc())
    scene = bv_scene(19.9)  # 19.9 m from the AV centre, then check a 15 m radius
    assert not is_critical_state_runtime(scene.get(1), scene, 15.0, net)
    assert is_critical_state_runtime(scene.get(1), scene, 20.0, net)


def test_far_bv_not_critical():
    net = from_dict(square_doc())
    scene = SceneState(0, 0.0, (VehicleState(0, "A-B", 0.0, 2.5, "AV"), VehicleState(1, "C-D", 5.0, 0, "BV")), 2)
    # (15, 20) is 25 m from the AV
    assert not is_critical_state_runtime(scene.get(1), scene, 20.0, net)


def test_unoccluded_ten_metres():
    net = from_dict(square_doc())
    scene = bv_scene(10.0)
    assert is_critical_state_runtime(scene.get(1), scene, 20.0, net)


def test_wall_hides_ten_metres():
    net = from_dict(square_doc(obstacles=[((5, -3), (5, 3))]))
    scene = bv_scene(10.0)
    assert oracle_visible(net, scene, SensorConfig()) == set()
    assert not is_critical_state_runtime(scene.get(1), scene, 20.0, net)
    assert is_critical_state_runtime(scene.get(1), scene, 20.0, net, check_visibility=False)


def test_empty_queries():
    net = from_dict(square_doc())
    spec = EnvironmentSpec(INTELLIGENT_B, random_model(net))
    assert intelligent_maneuvers(bv_scene(3.0), spec, net, [], 5.0) == []


def test_zero_model_matches_standard():
    net = build(two_bv_doc())
    spec = EnvironmentSpec(INTELLIGENT_A, PolicyModel.zeros(net), radius=6.2)
    scene = two_bv_scene()
    got = intelligent_maneuvers(scene, spec, net, [(1, "dpJ"), (2, "dpK")], 5.0)
    assert [c.probs for c in got] == pytest.approx([(1 / 3,) * 3, (0.5, 0.5)], abs=1e-15)


def test_branch_oracle_one_critical_one_not():
    net = build(two_bv_doc())
    model = random_model(net, 3)
    spec = EnvironmentSpec(INTELLIGENT_B, model, radius=6.2)  # BV 1 sits 6 m away, BV 2 6.5 m
    scene = two_bv_scene()
    first, second = intelligent_maneuvers(scene, spec, net, [(1, "dpJ"), (2, "dpK")], 5.0)
    f = featurize(scene, 1, "dpJ", net, 5.0)
    z = model.weights["dpJ"] @ f
    soft = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    assert first.branch == "model" and np.allclose(first.probs, soft, atol=1e-15)
    assert second.branch == "standard" and second.probs == net.decision_points["dpK"].weights


def test_spec_errors():
    net = small_net()
    with pytest.raises(ValueError):
        EnvironmentSpec("other")
    with pytest.raises(ValueError):
        EnvironmentSpec(INTELLIGENT_A)
    with pytest.raises(ValueError):
        EnvironmentSpec(INTELLIGENT_A, random_model(net), radius=0.0)
    with pytest.raises(PolicyError):
        EnvironmentSpec(INTELLIGENT_A, PolicyModel(random_model(net).weights, "other/9"))
    with pytest.raises(ValueError):
        intelligent_maneuvers(bv_scene(3.0), EnvironmentSpec(ORIGINAL), net, [(1, "x")], 5.0)


def test_spec_round_trip(tmp_path):
    net = small_net()
    m = random_model(net)
    m.save(tmp_path / "m.json")
    EnvironmentSpec(INTELLIGENT_B, m, 15.0, False, "m.json").save(tmp_path / "e.json")
    back = EnvironmentSpec.load(tmp_path / "e.json")
    assert back.kind == INTELLIGENT_B and back.radius == 15.0 and back.check_visibility is False
    assert all(np.array_equal(back.model.weights[k], m.weights[k]) for k in m.weights)


def test_branch_correctness_from_logs():
    net = small_net()
    model = random_model(net, 5, scale=2.0)
    spec = EnvironmentSpec(INTELLIGENT_B, model)
    ep = run_episode(net, SimConfig(horizon=400), 2, IntelligentProvider(spec, 5.0),
                     SurrogateDetector(default_params()))
    seen = {"model": 0, "standard": 0}
    for fr in ep.frames:
        vis = {o["id"] for o in fr.visible}
        scene = scene_from_frame(fr)
        for m in fr.maneuvers:
            v = fr.vehicle(m["vehicle"])
            crit = m["vehicle"] in vis and math.hypot(v["x"] - fr.av["x"], v["y"] - fr.av["y"]) <= 20.0
            assert m["branch"] == ("model" if crit else "standard")
            if crit:
                p = predict(model, featurize(scene, m["vehicle"], m["dp"], net, 5.0), m["dp"])
                assert np.allclose(m["probs"], p, atol=1e-15)
            else:
                assert tuple(m["probs"]) == net.decision_points[m["dp"]].weights
            seen[m["branch"]] += 1
    assert seen["model"] > 0 and seen["standard"] > 0


def test_original_never_uses_model(tmp_path):
    net = small_net()
    det = SurrogateDetector(default_params())
    assert isinstance(make_provider(EnvironmentSpec(ORIGINAL), 5.0), StandardProvider)
    keep = []
    failure_ratio(net, SimConfig(), det, EnvironmentSpec(ORIGINAL), 60.0, [3], keep=keep, label="x")
    plain = run_episode(net, SimConfig(horizon=120), 3, StandardProvider(), det, episode_id="x-seed3")
    plain.meta = {"environment": "x"}
    dump_episode(keep[0], tmp_path / "a.jsonl")
    dump_episode(plain, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert all(m["branch"] == "standard" for fr in keep[0].frames for m in fr.maneuvers)
