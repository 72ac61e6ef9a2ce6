"""Shared fixtures: tiny hand-built networks and synthetic training sets."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from parkfail.network import from_dict, load_network
from parkfail.perception import SensorConfig, SurrogateDetector, SurrogateParams, default_params
from parkfail.policy import N_FEATURES, PolicyModel
from parkfail.recorder import TrainingSample
from parkfail.sim import SceneState, SimConfig, StandardProvider, VehicleState, run_episode


def net_doc(nodes, lanes, dps=(), obstacles=(), spawns=(), exits=(), parking=(), route=(), name="t"):
    return {
        "schema": "parkfail.network/1",
        "name": name,
        "nodes": [{"id": n, "x": x, "y": y} for n, x, y in nodes],
        "lanes": [{"id": f"{a}-{b}", "from": a, "to": b, "speed": 3.0} for a, b in lanes],
        "decision_points": [dict(d) for d in dps],
        "obstacles": [{"id": f"o{i}", "a": list(a), "b": list(b)} for i, (a, b) in enumerate(obstacles)],
        "spawn_points": [{"node": n, "rate": r} for n, r in spawns],
        "exit_points": list(exits),
        "parking_spots": list(parking),
        "av_route": list(route),
    }


AV_RING_NODES = [("R0", 0, 0), ("R1", 0, -10), ("R2", -10, -10), ("R3", -10, 0)]
AV_RING = [("R0", "R1"), ("R1", "R2"), ("R2", "R3"), ("R3", "R0")]
AV_ROUTE = ["R0-R1", "R1-R2", "R2-R3", "R3-R0"]


def square_doc(obstacles=()):
    """20 m square AV loop with one two-way decision point (loop or exit) and a spawn."""
    nodes = [("A", 0, 0), ("B", 20, 0), ("C", 20, 20), ("D", 0, 20), ("S", -10, 0), ("X", 30, 0)]
    lanes = [("A", "B"), ("B", "C"), ("C", "D"), ("D", "A"), ("S", "A"), ("B", "X")]
    return net_doc(nodes, lanes, dps=[{"id": "dpB", "node": "B", "options": ["B-C", "B-X"]}],
                   obstacles=obstacles, spawns=[("S", 0.1)], exits=["X"],
                   route=["A-B", "B-C", "C-D", "D-A"])


def three_way_doc():
    """One BV waits 6 m east of a nearly stationary AV at a three-way decision point.

    Branch 0 heads straight at the AV, the other two lead away.
    """
    nodes = AV_RING_NODES + [("I", 16, 0), ("J", 6, 0), ("P1", 1, 0), ("P2", 6, 10), ("P3", 12, 6)]
    lanes = AV_RING + [("I", "J"), ("J", "P1"), ("J", "P2"), ("J", "P3")]
    return net_doc(nodes, lanes, dps=[{"id": "dpJ", "node": "J", "options": ["J-P1", "J-P2", "J-P3"]}],
                   exits=["P1", "P2", "P3"], route=AV_ROUTE, name="three_way")


def two_bv_doc():
    """Three-way point east of the AV plus a two-way point north of it."""
    doc = three_way_doc()
    extra_nodes = [("K0", 0, 16), ("K", 0, 6.5), ("Q1", 0, 1.5), ("Q2", -8, 8)]
    doc["nodes"] += [{"id": n, "x": x, "y": y} for n, x, y in extra_nodes]
    doc["lanes"] += [{"id": f"{a}-{b}", "from": a, "to": b, "speed": 3.0}
                     for a, b in [("K0", "K"), ("K", "Q1"), ("K", "Q2")]]
    doc["decision_points"].append({"id": "dpK", "node": "K", "options": ["K-Q1", "K-Q2"]})
    doc["exit_points"] += ["Q1", "Q2"]
    doc["name"] = "two_bv"
    return doc


def tiny_cfg(horizon: int) -> SimConfig:
    return SimConfig(dt=1.0, v_nominal=3.0, v_max=5.0, av_speed=0.1, min_headway=6.0, spawn_rate=0.0,
                     initial_bvs=0, horizon=horizon, dwell_min=10.0, dwell_max=10.0)


def near_miss_detector() -> SurrogateDetector:
    """Noise-free detector that always misses BVs within 5 m of the AV and never beyond."""
    shape = (2, 1, 1)
    params = SurrogateParams((0.0, 5.0, math.inf), (0.0, math.inf), (0.0, math.inf), np.zeros(shape),
                             np.array([[[1.0]], [[0.0]]]), np.zeros(shape), sigma_min=0.0)
    return SurrogateDetector(params, SensorConfig())


def waiting(vid: int, lane: str, length: float) -> VehicleState:
    return VehicleState(vid, lane, length, 0.0, "BV")


def three_way_scene() -> SceneState:
    av = VehicleState(0, "R0-R1", 0.0, 0.1, "AV")
    return SceneState(0, 0.0, (av, waiting(1, "I-J", 10.0)), 2)


def two_bv_scene() -> SceneState:
    av = VehicleState(0, "R0-R1", 0.0, 0.1, "AV")
    return SceneState(0, 0.0, (av, waiting(1, "I-J", 10.0), waiting(2, "K0-K", 9.5)), 3)


@lru_cache(maxsize=None)
def small_net():
    return load_network("garage_small")


@lru_cache(maxsize=None)
def medium_net():
    return load_network("garage_medium")


@lru_cache(maxsize=None)
def small_episodes(n: int = 6, steps: int = 240, first_seed: int = 0):
    """Seeded original-environment episodes on garage_small (default surrogate)."""
    net = small_net()
    cfg = SimConfig(horizon=steps)
    det = SurrogateDetector(default_params())
    return tuple(run_episode(net, cfg, first_seed + s, StandardProvider(), det, episode_id=f"ep{first_seed + s}")
                 for s in range(n))


def signal_noise_samples(seed: int, scenarios: int = 300, critical_per: int = 3, noise_per: int = 9,
                         scale: float = 0.5) -> tuple[list[TrainingSample], PolicyModel]:
    """Critical samples follow a softmax of fixed true weights; the rest choose
    uniformly at random. Features share one distribution across both groups."""
    rng = np.random.default_rng(seed)
    w_true = rng.normal(0.0, scale, size=(3, N_FEATURES))
    samples = []
    for s in range(scenarios):
        for j in range(critical_per + noise_per):
            f = np.append(rng.normal(0.0, 1.0, size=N_FEATURES - 1), 1.0)
            critical = j < critical_per
            if critical:
                z = w_true @ f
                p = np.exp(z - z.max())
                option = int(rng.choice(3, p=p / p.sum()))
            else:
                option = int(rng.integers(3))
            samples.append(TrainingSample(tuple(float(x) for x in f), "dp", option, critical, True,
                                          f"sc{s}", j, j + 1))
    return samples, PolicyModel({"dp": np.zeros((3, N_FEATURES))})


def random_samples(rng: np.random.Generator, n: int, options=(3, 2)) -> tuple[list[TrainingSample], PolicyModel]:
    """``n`` samples spread over decision points with the given option counts."""
    model = PolicyModel({f"dp{i}": rng.normal(0, 1, size=(k, N_FEATURES)) for i, k in enumerate(options)})
    samples = []
    for j in range(n):
        i = int(rng.integers(len(options)))
        f = np.append(rng.normal(0, 1, size=N_FEATURES - 1), 1.0)
        samples.append(TrainingSample(tuple(float(x) for x in f), f"dp{i}", int(rng.integers(options[i])),
                                      True, True, f"s{j}", j, 1))
    return samples, model


def build(doc):
    return from_dict(doc)
