"""Frame logs, failure-window extraction and critical-state marking.

A failure scenario is the 10 s of frames ending at a failure frame. BVs that are
visible and within ``radius`` of the AV in that failure frame are the critical
BVs; their states in the last ``lookback`` seconds are the critical states.
Training sets are built from the route choices made inside failure windows,
either all of them or only the critical ones.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .network import GarageNetwork
from .perception import FailureDefinition, Observation, PerceptionMetrics, is_failure
from .sim import Choice, Maneuver, SceneState, SimConfig, VehicleState

EPISODE_SCHEMA = "parkfail.episode/1"
TRAINING_SCHEMA = "parkfail.trainingset/1"
WINDOW_SECONDS = 10.0


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


@dataclass
class FrameRecord:
    k: int
    t: float
    vehicles: list[dict]  # AV first; id, role, lane, progress, speed, x, y, heading, ...
    maneuvers: list[dict]  # route choices made at this frame: vehicle, dp, option, branch, probs
    detections: list[dict]
    visible: list[dict]  # id, bin, occlusion
    te_max: float
    fn: int
    flags: dict[str, bool]
    next_id: int = 1

    @property
    def av(self) -> dict:
        return self.vehicles[0]

    @property
    def metrics(self) -> PerceptionMetrics:
        return PerceptionMetrics(self.te_max, self.fn)

    def bv_ids(self) -> list[int]:
        return [v["id"] for v in self.vehicles[1:]]

    def vehicle(self, vid: int) -> dict | None:
        for v in self.vehicles:
            if v["id"] == vid:
                return v
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRecord":
        return cls(**d)


def make_frame(net: GarageNetwork, scene: SceneState, maneuvers: Sequence[Maneuver],
               choices: Sequence[Choice], seen: Observation) -> FrameRecord:
    vehicles = []
    for i, v in enumerate(scene.vehicles):
        vehicles.append({
            "id": v.id, "role": v.role, "lane": v.lane, "progress": v.progress, "speed": v.speed,
            "x": float(seen.xy[i, 0]), "y": float(seen.xy[i, 1]), "heading": float(seen.heading[i]),
            "parked": v.parked, "dwell": v.dwell, "next_lane": v.next_lane, "route_pos": v.route_pos,
        })
    mans = [
        {"vehicle": m.vehicle, "dp": m.dp, "option": m.option, "branch": c.branch,
         "probs": [float(p) for p in c.probs]}
        for m, c in zip(maneuvers, choices)
    ]
    dets = [{"x": d.x, "y": d.y, "matched": d.matched} for d in seen.output.detections]
    vis = [{"id": i, "bin": list(b), "occlusion": o} for i, b, o in seen.visible]
    return FrameRecord(scene.k, scene.time, vehicles, mans, dets, vis,
                       seen.metrics.te_max, seen.metrics.fn, dict(seen.flags), scene.next_id)


def scene_from_frame(frame: FrameRecord) -> SceneState:
    vehicles = tuple(
        VehicleState(v["id"], v["lane"], v["progress"], v["speed"], v["role"], v["parked"],
                     v["dwell"], v["next_lane"], v["route_pos"])
        for v in frame.vehicles
    )
    return SceneState(frame.k, frame.t, vehicles, frame.next_id)


@dataclass
class Episode:
    id: str
    seed: int
    config: SimConfig
    frames: list[FrameRecord]
    meta: dict = field(default_factory=dict)

    def header(self) -> dict:
        cfg = self.config.to_dict()
        return {
            "schema": EPISODE_SCHEMA,
            "episode": self.id,
            "seed": self.seed,
            "sim": cfg,
            "meta": self.meta,
            "config_hash": config_hash({"sim": cfg, "meta": self.meta, "seed": self.seed}),
        }

    def failure_frames(self, definition: FailureDefinition) -> list[int]:
        return [i for i, fr in enumerate(self.frames) if is_failure(fr.metrics, definition)]


def dump_episode(ep: Episode, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(ep.header()) + "\n")
        for fr in ep.frames:
            fh.write(canonical_json(fr.to_dict()) + "\n")


def load_episode(path: str | Path) -> Episode:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != EPISODE_SCHEMA:
            raise ValueError(f"{path}: unsupported episode schema {header.get('schema')!r}")
        frames = [FrameRecord.from_dict(json.loads(line)) for line in fh if line.strip()]
    return Episode(header["episode"], header["seed"], SimConfig.from_dict(header["sim"]), frames,
                   header.get("meta", {}))


# --- failure scenarios -----------------------------------------------------------------


@dataclass(frozen=True)
class CriticalStateRule:
    radius: float = 20.0
    lookback: float = 7.5

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError("critical radius must be > 0")
        if not 0 <= self.lookback <= WINDOW_SECONDS:
            raise ValueError(f"lookback must lie in [0, {WINDOW_SECONDS}] s")


@dataclass
class FailureScenario:
    episode: Episode
    failure_frame: int  # index into episode.frames
    start: int  # first window frame index
    critical: set[tuple[int, int]] = field(default_factory=set)  # (frame index, BV id)
    critical_bvs: tuple[int, ...] = ()

    @property
    def id(self) -> str:
        return f"{self.episode.id}:{self.failure_frame}"

    @property
    def frames(self) -> list[FrameRecord]:
        return self.episode.frames[self.start:self.failure_frame + 1]

    def frame_indices(self) -> range:
        return range(self.start, self.failure_frame + 1)


def window_frames(dt: float, seconds: float = WINDOW_SECONDS) -> int:
    return int(math.ceil(seconds / dt - 1e-9))


def extract_failure_scenarios(episode: Episode, definition: FailureDefinition) -> list[FailureScenario]:
    n = window_frames(episode.config.dt)
    return [FailureScenario(episode, f, max(0, f - n + 1)) for f in episode.failure_frames(definition)]


def critical_bvs(frame: FrameRecord, radius: float) -> list[int]:
    ax, ay = frame.av["x"], frame.av["y"]
    visible = {o["id"] for o in frame.visible}
    out = []
    for v in frame.vehicles[1:]:
        if v["id"] in visible and math.hypot(v["x"] - ax, v["y"] - ay) <= radius:
            out.append(v["id"])
    return out


def mark_critical(scenario: FailureScenario, rule: CriticalStateRule, net: GarageNetwork | None = None) -> FailureScenario:
    """Flag the lookback states of BVs visible within ``rule.radius`` at the failure frame.

    ``net`` is unused: positions and visibility are read back from the log.
    """
    frames = scenario.episode.frames
    bvs = critical_bvs(frames[scenario.failure_frame], rule.radius)
    n = window_frames(scenario.episode.config.dt, rule.lookback)
    first = max(scenario.start, scenario.failure_frame - n + 1)
    flags = set()
    for i in range(first, scenario.failure_frame + 1):
        present = set(frames[i].bv_ids())
        flags.update((i, b) for b in bvs if b in present)
    scenario.critical = flags
    scenario.critical_bvs = tuple(bvs)
    return scenario


# --- training samples ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    features: tuple[float, ...]
    dp: str
    option: int
    critical: bool
    failure: bool
    scenario: str
    frame: int
    vehicle: int

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.scenario, self.frame, self.vehicle)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingSample":
        return cls(tuple(d["features"]), d["dp"], d["option"], d["critical"], d["failure"],
                   d["scenario"], d["frame"], d["vehicle"])


ALL_STATES = "all_states"
CRITICAL_ONLY = "critical_only"


def iter_window_samples(scenario: FailureScenario, net: GarageNetwork, v_max: float) -> Iterator[TrainingSample]:
    from .policy import featurize

    frames = scenario.episode.frames
    for i in scenario.frame_indices():
        fr = frames[i]
        if not fr.maneuvers:
            continue
        scene = scene_from_frame(fr)
        for m in fr.maneuvers:
            f = featurize(scene, m["vehicle"], m["dp"], net, v_max)
            yield TrainingSample(tuple(float(x) for x in f), m["dp"], m["option"],
                                 (i, m["vehicle"]) in scenario.critical, True, scenario.id, i, m["vehicle"])


def build_dataset(scenarios: Iterable[FailureScenario], mode: str, net: GarageNetwork,
                  v_max: float) -> list[TrainingSample]:
    """Route-choice samples from failure windows; ``mode`` picks all or critical only.

    Every sample comes from a failure scenario, so the failure indicator is
    carried by membership rather than as a loss weight.
    """
    if mode not in (ALL_STATES, CRITICAL_ONLY):
        raise ValueError(f"unknown dataset mode {mode!r}")
    out = []
    for sc in scenarios:
        for s in iter_window_samples(sc, net, v_max):
            if mode == ALL_STATES or s.critical:
                out.append(s)
    return out


def save_training_set(samples: Sequence[TrainingSample], path: str | Path, meta: dict | None = None) -> None:
    from .policy import FEATURE_SPEC

    header = {"schema": TRAINING_SCHEMA, "feature_spec": FEATURE_SPEC, "n": len(samples), "meta": meta or {}}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(header) + "\n")
        for s in samples:
            fh.write(canonical_json(s.to_dict()) + "\n")


def load_training_set(path: str | Path) -> tuple[list[TrainingSample], dict]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != TRAINING_SCHEMA:
            raise ValueError(f"{path}: unsupported training-set schema {header.get('schema')!r}")
        samples = [TrainingSample.from_dict(json.loads(line)) for line in fh if line.strip()]
    return samples, header
