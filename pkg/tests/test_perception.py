import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from parkfail.network import from_dict, pose_on_lane
from parkfail.perception import (DEFINITIONS, Detection, FailureDefinition, PerceptionMetrics, PerceptionOutput,
                                 SensorConfig, SurrogateDetector, SurrogateParams, default_params, detect,
                                 fit_surrogate, is_failure, load_params, metrics, visible_set)
from parkfail.sim import SceneState, VehicleState, rng_streams
from support import small_net, square_doc

FOOTPRINT, BLOCK = 1.0, 0.5


# --- brute-force visibility oracle --------------------------------------------------------


def _cross(ax, ay, bx, by):
    return ax * by - ay * bx


def _segments_intersect(p, q, a, b):
    r = (q[0] - p[0], q[1] - p[1])
    s = (b[0] - a[0], b[1] - a[1])
    den = _cross(*r, *s)
    if den == 0:
        return False
    t = _cross(a[0] - p[0], a[1] - p[1], *s) / den
    u = _cross(a[0] - p[0], a[1] - p[1], *r) / den
    return 0 <= t <= 1 and 0 <= u <= 1


def _closest_approach(p, q, c):
    dx, dy = q[0] - p[0], q[1] - p[1]
    L2 = dx * dx + dy * dy
    t = 0.0 if L2 == 0 else max(0.0, min(1.0, ((c[0] - p[0]) * dx + (c[1] - p[1]) * dy) / L2))
    return math.dist((p[0] + t * dx, p[1] + t * dy), c)


def oracle_visible(net, scene, sensor):
    poses = {v.id: pose_on_lane(net, v.lane, v.progress) for v in scene.vehicles}
    ax, ay, ah = poses[0]
    o = (ax + sensor.mount_offset * math.cos(ah), ay + sensor.mount_offset * math.sin(ah))
    out = set()
    for v in scene.vehicles[1:]:
        x, y, _ = poses[v.id]
        if math.dist(o, (x, y)) > sensor.range:
            continue
        if sensor.fov < 2 * math.pi:
            ang = (math.atan2(y - o[1], x - o[0]) - ah + math.pi) % (2 * math.pi) - math.pi
            if abs(ang) > sensor.fov / 2:
                continue
        if any(_segments_intersect(o, (x, y), ob.a, ob.b) for ob in net.obstacles):
            continue
        blocked = False
        for u in scene.vehicles[1:]:
            if u.id == v.id:
                continue
            d = _closest_approach(o, (x, y), poses[u.id][:2])
            if (FOOTPRINT - d) / FOOTPRINT > BLOCK:
                blocked = True
        if not blocked:
            out.add(v.id)
    return out


def random_scene(net, rng, n_bv):
    lanes = sorted(net.lanes)
    vs = [VehicleState(0, net.av_route[int(rng.integers(len(net.av_route)))], 0.0, 2.5, "AV")]
    av_lane = net.lanes[vs[0].lane]
    vs[0] = VehicleState(0, vs[0].lane, float(rng.uniform(0, av_lane.length)), 2.5, "AV")
    for i in range(1, n_bv + 1):
        lane = lanes[int(rng.integers(len(lanes)))]
        vs.append(VehicleState(i, lane, float(rng.uniform(0, net.lanes[lane].length)), 0.0, "BV"))
    return SceneState(0, 0.0, tuple(vs), n_bv + 1)


@settings(max_examples=1000)
@given(st.integers(0, 2**32 - 1), st.integers(0, 8), st.sampled_from([2 * math.pi, math.pi, 1.0]))
def test_visibility_matches_oracle(seed, n_bv, fov):
    net = small_net()
    rng = np.random.default_rng(seed)
    scene = random_scene(net, rng, n_bv)
    sensor = SensorConfig(range=float(rng.uniform(10, 40)), fov=fov)
    assert visible_set(net, scene, sensor) == oracle_visible(net, scene, sensor)


def test_three_vehicle_shadow():
    net = from_dict(square_doc())
    av = VehicleState(0, "A-B", 0.0, 2.5, "AV")  # at (0, 0) heading east, sensor at (1.5, 0)
    near = VehicleState(1, "B-C", 0.0, 0.0, "BV")  # wrong lane for the shadow, placed below
    scene = SceneState(0, 0.0, (av, VehicleState(1, "A-B", 8.0, 0, "BV"), VehicleState(2, "A-B", 15.0, 0, "BV")), 3)
    assert visible_set(net, scene) == {1} == oracle_visible(net, scene, SensorConfig())
    del near


def test_range_cut():
    net = from_dict(square_doc())
    scene = SceneState(0, 0.0, (VehicleState(0, "A-B", 0.0, 2.5, "AV"), VehicleState(1, "C-D", 0.0, 0, "BV")), 2)
    assert visible_set(net, scene, SensorConfig(range=20.0)) == set()  # (20, 20) is 26 m from the sensor
    assert visible_set(net, scene, SensorConfig(range=30.0)) == {1}


def test_wall_blocks():
    net = from_dict(square_doc(obstacles=[((10, -5), (10, 5))]))
    scene = SceneState(0, 0.0, (VehicleState(0, "A-B", 0.0, 2.5, "AV"), VehicleState(1, "A-B", 15.0, 0, "BV")), 2)
    assert visible_set(net, scene) == set()


# --- detection --------------------------------------------------------------------------------


def scene_with(n, spacing=7.0):
    net = from_dict(square_doc())
    vs = [VehicleState(0, "C-D", 10.0, 2.5, "AV")] + [VehicleState(i, "A-B", 3.0 + spacing * (i - 1) % 17, 0, "BV")
                                                          for i in range(1, n + 1)]
    return net, SceneState(0, 0.0, tuple(vs), n + 1)


def params_with(sigma, miss):
    return default_params().with_noise(sigma=sigma, miss=miss)


def test_noiseless_detection_is_exact():
    net, scene = scene_with(2)
    out = detect(net, scene, params_with(0.0, 0.0), SensorConfig(), rng_streams(0)["perception"])
    m = metrics(out, scene, net, SensorConfig())
    assert m == PerceptionMetrics(0.0, 0)
    assert len(out.detections) == len(visible_set(net, scene))


def test_total_miss():
    net, scene = scene_with(2)
    out = detect(net, scene, params_with(0.0, 1.0), SensorConfig(), rng_streams(0)["perception"])
    assert out.detections == []
    assert metrics(out, scene, net, SensorConfig()).fn == len(visible_set(net, scene))


def test_noise_scale_monte_carlo():
    net = from_dict(square_doc())
    scene = SceneState(0, 0.0, (VehicleState(0, "C-D", 10.0, 2.5, "AV"), VehicleState(1, "A-B", 10.0, 0, "BV")), 2)
    p = params_with(0.4, 0.0)
    rng = np.random.default_rng(123)
    errs = []
    for _ in range(10_000):
        d = detect(net, scene, p, SensorConfig(), rng).detections[0]
        errs += [d.x - 10.0, d.y - 0.0]
    assert abs(np.std(errs) - 0.4) < 0.02


def test_metrics_hand_matching():
    net = from_dict(square_doc())
    scene = SceneState(0, 0.0, (VehicleState(0, "C-D", 10.0, 2.5, "AV"), VehicleState(1, "A-B", 5.0, 0, "BV"),
                                VehicleState(2, "A-B", 15.0, 0, "BV")), 3)
    out = PerceptionOutput([Detection(5.3, 0.0)])
    m = metrics(out, scene, net, SensorConfig())
    assert m.te_max == pytest.approx(0.3, abs=1e-12) and m.fn == 1
    assert out.detections[0].matched == 1


def test_gate_rule():
    net = from_dict(square_doc())
    scene = SceneState(0, 0.0, (VehicleState(0, "C-D", 10.0, 2.5, "AV"), VehicleState(1, "A-B", 5.0, 0, "BV")), 2)
    m = metrics(PerceptionOutput([Detection(5.0, 5.0)]), scene, net, SensorConfig())
    assert m == PerceptionMetrics(0.0, 1)


def test_greedy_one_to_one():
    net = from_dict(square_doc())
    scene = SceneState(0, 0.0, (VehicleState(0, "C-D", 10.0, 2.5, "AV"), VehicleState(1, "A-B", 5.0, 0, "BV"),
                                VehicleState(2, "A-B", 6.5, 0, "BV")), 3)
    # both detections are closest to BV 1; the nearer one wins it, the other falls back to BV 2
    out = PerceptionOutput([Detection(5.1, 0.0), Detection(5.4, 0.0)])
    m = metrics(out, scene, net, SensorConfig())
    assert [d.matched for d in out.detections] == [1, 2]
    assert m.te_max == pytest.approx(1.1) and m.fn == 0


# --- failure definitions -------------------------------------------------------------------------


def test_definition_thresholds():
    assert [str(DEFINITIONS[k]) for k in "abcd"] == ["TE_max > 0.5", "TE_max > 0.8", "TE_max > 1", "FN > 0"]
    assert [DEFINITIONS[k].theta for k in "abc"] == [0.5, 0.8, 1.0]


def test_is_failure_examples():
    m = PerceptionMetrics(0.6, 0)
    assert is_failure(m, DEFINITIONS["a"]) is True
    assert is_failure(m, DEFINITIONS["b"]) is False
    assert is_failure(m, DEFINITIONS["d"]) is False
    assert is_failure(PerceptionMetrics(0.0, 1), DEFINITIONS["d"]) is True


def test_threshold_must_be_positive():
    with pytest.raises(ValueError):
        FailureDefinition.te_above(0.0)


@settings(max_examples=1000)
@given(st.floats(0, 5), st.floats(0.01, 3), st.floats(0.01, 3))
def test_failure_monotone_in_theta(te, t1, t2):
    hi, lo = max(t1, t2), min(t1, t2)
    m = PerceptionMetrics(te, 0)
    if is_failure(m, FailureDefinition.te_above(hi)):
        assert is_failure(m, FailureDefinition.te_above(lo))


# --- surrogate parameters and refit ---------------------------------------------------------------


def fake_dataset(bins_counts):
    frames = [SimpleNamespace(visible=[{"bin": list(b)} for b, n in bins_counts for _ in range(n)])]
    return [SimpleNamespace(frames=frames)]


def test_default_params_load():
    p = load_params("default")
    assert p.shape == (3, 2, 3)
    assert (p.sigma >= p.sigma_min).all()


def test_params_round_trip(tmp_path):
    p = default_params()
    p.save(tmp_path / "p.json")
    q = load_params(tmp_path / "p.json")
    assert q.to_dict() == p.to_dict()


def test_params_invariants():
    p = default_params()
    with pytest.raises(ValueError):
        SurrogateParams(p.distance_edges, p.occlusion_edges, p.density_edges, p.sigma, p.miss + 2, p.counts)
    with pytest.raises(ValueError):
        SurrogateParams(p.distance_edges, p.occlusion_edges, p.density_edges, p.sigma * 0, p.miss, p.counts,
                        sigma_min=0.05)


def test_fit_no_data_identity():
    p = default_params()
    q = fit_surrogate(fake_dataset([]), p)
    assert np.array_equal(q.sigma, p.sigma) and np.array_equal(q.miss, p.miss)


def test_fit_empty_dataset_returns_base(caplog):
    p = default_params()
    assert fit_surrogate([], p) is p
    assert "empty dataset" in caplog.text


def test_fit_formula_value():
    shape = (1, 1, 1)
    base = SurrogateParams((0.0, math.inf), (0.0, math.inf), (0.0, math.inf), np.full(shape, 0.5),
                           np.zeros(shape), np.zeros(shape), sigma_min=0.1, tau=1000.0)
    q = fit_surrogate(fake_dataset([((0, 0, 0), 1000)]), base)
    assert q.sigma[0, 0, 0] == pytest.approx(0.1 + 0.4 * math.exp(-1), abs=1e-12)
    assert q.sigma[0, 0, 0] == pytest.approx(0.247, abs=5e-4)
    assert q.counts[0, 0, 0] == 1000


def test_fit_asymptote():
    p = default_params()
    q = fit_surrogate(fake_dataset([((0, 1, 1), 100_000)]), p)
    assert q.sigma[0, 1, 1] == pytest.approx(p.sigma_min, abs=1e-12)
    assert q.miss[0, 1, 1] == pytest.approx(p.miss_floor, abs=1e-12)


def test_detector_flags_follow_definitions():
    net = small_net()
    det = SurrogateDetector(default_params())
    rng = np.random.default_rng(0)
    from parkfail.sim import SimConfig, init_scene
    scene = init_scene(net, SimConfig(initial_bvs=6), 3)
    for _ in range(50):
        seen = det.observe(net, scene, rng)
        for k, d in DEFINITIONS.items():
            assert seen.flags[k] == is_failure(seen.metrics, d)
        assert seen.metrics.fn <= len(seen.visible)
