import copy
import math

import pytest
from hypothesis import given, settings, strategies as st

from parkfail.network import NetworkError, from_dict, load_network, pose_on_lane, save_network, to_dict
from support import medium_net, small_net, square_doc


def test_garage_small_is_valid():
    net = small_net()
    assert len(net.decision_points) == 4
    assert len(net.spawn_points) == 2
    assert len(net.av_route) >= 3


def test_garage_small_adjacency_by_hand():
    # the AV loop r0 -> r1 -> r2 -> q -> r3 -> r4 -> r5 -> r0, read off the builder
    net = small_net()
    nodes = [net.lanes[l].src for l in net.av_route]
    assert nodes == ["r0", "r1", "r2", "q", "r3", "r4", "r5"]
    assert set(net.decision_points["dp_r1"].options) == {"r1-r2", "r1-x0", "r1-m"}


def test_garage_medium_is_valid_with_uniform_weights():
    net = medium_net()
    for dp in net.decision_points.values():
        assert 2 <= len(dp.options) <= 3
        assert all(abs(w - 1 / len(dp.options)) < 1e-12 for w in dp.weights)


def test_option_leaving_other_node_is_named():
    doc = square_doc()
    doc["decision_points"][0]["options"] = ["B-C", "A-B"]
    with pytest.raises(NetworkError) as exc:
        from_dict(doc)
    assert any("dpB" in v and "A-B" in v for v in exc.value.violations)


def test_route_discontinuity_reports_index():
    doc = square_doc()
    doc["av_route"] = ["A-B", "C-D", "B-C", "D-A"]
    with pytest.raises(NetworkError) as exc:
        from_dict(doc)
    assert "av_route discontinuity at index 1" in exc.value.violations


def test_violations_are_collected_together():
    doc = square_doc()
    doc["decision_points"][0]["weights"] = [0.7, 0.7]
    doc["lanes"].append({"id": "bad", "from": "A", "to": "nowhere"})
    with pytest.raises(NetworkError) as exc:
        from_dict(doc)
    assert len(exc.value.violations) >= 2


def test_weights_must_sum_to_one():
    doc = square_doc()
    doc["decision_points"][0]["weights"] = [0.5, 0.5 + 1e-6]
    with pytest.raises(NetworkError):
        from_dict(doc)
    doc["decision_points"][0]["weights"] = [0.25, 0.75]
    assert from_dict(doc).decision_points["dpB"].weights == (0.25, 0.75)


def test_single_option_rejected():
    doc = square_doc()
    doc["decision_points"][0]["options"] = ["B-C"]
    with pytest.raises(NetworkError):
        from_dict(doc)


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(NetworkError):
        load_network(p)


def test_pose_endpoints_and_midpoint():
    net = from_dict(square_doc())
    assert pose_on_lane(net, "A-B", 0.0)[:2] == (0.0, 0.0)
    assert pose_on_lane(net, "A-B", 20.0)[:2] == (20.0, 0.0)
    x, y, h = pose_on_lane(net, "B-C", 10.0)
    assert (x, y) == pytest.approx((20.0, 10.0), abs=1e-12)
    assert h == pytest.approx(math.atan2(20.0, 0.0))


def test_pose_out_of_range():
    net = from_dict(square_doc())
    with pytest.raises(ValueError):
        pose_on_lane(net, "A-B", 20.5)
    with pytest.raises(ValueError):
        pose_on_lane(net, "A-B", -0.1)


@pytest.mark.parametrize("get", [small_net, medium_net])
def test_round_trip(tmp_path, get):
    net = get()
    p = tmp_path / "n.json"
    save_network(net, p)
    assert load_network(p) == net
    assert to_dict(load_network(p)) == to_dict(net)


@pytest.mark.parametrize("get", [small_net, medium_net])
def test_route_poses_continuous(get):
    net = get()
    route = net.av_route
    for a, b in zip(route, route[1:] + route[:1]):
        end = pose_on_lane(net, a, net.lanes[a].length)
        start = pose_on_lane(net, b, 0.0)
        assert math.dist(end[:2], start[:2]) < 1e-9


@settings(max_examples=200)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=3))
def test_normalised_weights_always_load(raw):
    doc = copy.deepcopy(square_doc())
    doc["nodes"].append({"id": "Y", "x": 30, "y": 5})
    doc["lanes"].append({"id": "B-Y", "from": "B", "to": "Y"})
    doc["exit_points"].append("Y")
    opts = ["B-C", "B-X", "B-Y"][: len(raw)]
    if len(raw) == 2:
        doc["lanes"] = [l for l in doc["lanes"] if l["id"] != "B-Y"]
        doc["nodes"] = doc["nodes"][:-1]
        doc["exit_points"].remove("Y")
    total = sum(raw)
    doc["decision_points"][0]["options"] = opts
    doc["decision_points"][0]["weights"] = [w / total for w in raw]
    net = from_dict(doc)
    assert abs(sum(net.decision_points["dpB"].weights) - 1) < 1e-9
