"""Intelligent testing environments.

A BV waiting at a decision point draws its route from the trained maneuver
model only while it is in a critical state (visible and within ``radius`` of
the AV); otherwise it uses the map's standard weights. Both intelligent
environments use the same switch and differ only in the model's training data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .network import GarageNetwork
from .perception import SensorConfig, visibility
from .policy import FEATURE_SPEC, PolicyError, PolicyModel, featurize, predict
from .sim import Choice, SceneState, StandardProvider, VehicleState

ORIGINAL = "original"
INTELLIGENT_A = "intelligent_a"  # model trained on all states
INTELLIGENT_B = "intelligent_b"  # model trained on critical states only
KINDS = (ORIGINAL, INTELLIGENT_A, INTELLIGENT_B)


@dataclass(frozen=True)
class EnvironmentSpec:
    kind: str
    model: PolicyModel | None = None
    radius: float = 20.0
    check_visibility: bool = True
    model_path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if not self.radius > 0:
            raise ValueError("runtime critical radius must be > 0")
        if self.kind != ORIGINAL:
            if self.model is None:
                raise ValueError(f"{self.kind} needs a trained model")
            if self.model.feature_spec != FEATURE_SPEC:
                raise PolicyError(f"model feature spec {self.model.feature_spec!r} != {FEATURE_SPEC!r}")

    def to_dict(self) -> dict:
        return {"schema": "parkfail.environment/1", "kind": self.kind, "radius": self.radius,
                "check_visibility": self.check_visibility, "model": self.model_path}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EnvironmentSpec":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        model = None
        if d.get("model"):
            mp = Path(d["model"])
            if not mp.is_absolute():
                mp = Path(path).parent / mp
            model = PolicyModel.load(mp)
        return cls(d["kind"], model, d["radius"], d.get("check_visibility", True), d.get("model"))


def is_critical_state_runtime(bv: VehicleState, scene: SceneState, radius: float, net: GarageNetwork,
                              sensor: SensorConfig | None = None, check_visibility: bool = True) -> bool:
    vis = visibility(net, scene, sensor or SensorConfig())
    return _critical_ids(vis, radius, check_visibility).get(bv.id, False)


def _critical_ids(vis, radius: float, check_visibility: bool) -> dict[int, bool]:
    near = vis.distance <= radius
    if check_visibility:
        near = near & vis.visible
    return {int(i): bool(c) for i, c in zip(vis.ids, near)}


def intelligent_maneuvers(scene: SceneState, spec: EnvironmentSpec, net: GarageNetwork,
                          queries: Sequence[tuple[int, str]], v_max: float,
                          sensor: SensorConfig | None = None) -> list[Choice]:
    """Per queried BV: model softmax if critical, map weights otherwise."""
    if spec.kind == ORIGINAL or spec.model is None:
        raise ValueError("intelligent_maneuvers needs an intelligent environment spec")
    if spec.model.feature_spec != FEATURE_SPEC:
        raise PolicyError(f"model feature spec {spec.model.feature_spec!r} != {FEATURE_SPEC!r}")
    if not queries:
        return []
    critical = _critical_ids(visibility(net, scene, sensor or SensorConfig()), spec.radius, spec.check_visibility)
    out = []
    for vid, dp in queries:
        if critical.get(vid, False):
            p = predict(spec.model, featurize(scene, vid, dp, net, v_max), dp)
            out.append(Choice(tuple(float(x) for x in p), "model"))
        else:
            out.append(Choice(net.decision_points[dp].weights, "standard"))
    return out


class IntelligentProvider:
    def __init__(self, spec: EnvironmentSpec, v_max: float, sensor: SensorConfig | None = None):
        self.spec = spec
        self.v_max = v_max
        self.sensor = sensor or SensorConfig()

    def distributions(self, net, scene, queries):
        return intelligent_maneuvers(scene, self.spec, net, queries, self.v_max, self.sensor)


class ModelProvider:
    """Every waiting BV follows the model, critical or not."""

    def __init__(self, model: PolicyModel, v_max: float):
        self.model = model
        self.v_max = v_max

    def distributions(self, net, scene, queries):
        return [Choice(tuple(float(x) for x in predict(self.model, featurize(scene, vid, dp, net, self.v_max), dp)),
                       "model") for vid, dp in queries]


def make_provider(spec: EnvironmentSpec, v_max: float, sensor: SensorConfig | None = None):
    if spec.kind == ORIGINAL:
        return StandardProvider()
    return IntelligentProvider(spec, v_max, sensor)
