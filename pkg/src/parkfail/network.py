"""Parking-garage road network: lanes, decision points, obstacles and the AV loop.

Networks are plain JSON documents (see ``docs/network_schema.md``). Everything is
planar and every lane is a straight segment; curved aisles are chains of lanes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

SCHEMA = "parkfail.network/1"
WEIGHT_TOL = 1e-9
LENGTH_TOL = 1e-6


class NetworkError(ValueError):
    """Raised when a network document is malformed or violates an invariant."""

    def __init__(self, message: str, violations: list[str] | None = None):
        self.violations = list(violations or [])
        if self.violations:
            message = message + ":\n  - " + "\n  - ".join(self.violations)
        super().__init__(message)


@dataclass(frozen=True)
class Lane:
    id: str
    src: str
    dst: str
    length: float
    speed: float


@dataclass(frozen=True)
class DecisionPoint:
    id: str
    node: str
    options: tuple[str, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class Obstacle:
    id: str
    a: tuple[float, float]
    b: tuple[float, float]


@dataclass(frozen=True)
class SpawnPoint:
    node: str
    rate: float


@dataclass(frozen=True)
class GarageNetwork:
    name: str
    nodes: dict[str, tuple[float, float]]
    lanes: dict[str, Lane]
    decision_points: dict[str, DecisionPoint]
    obstacles: tuple[Obstacle, ...]
    spawn_points: tuple[SpawnPoint, ...]
    exit_points: tuple[str, ...]
    parking_spots: tuple[str, ...]
    av_route: tuple[str, ...]
    # derived lookups, excluded from equality
    _out: dict[str, tuple[str, ...]] = field(default_factory=dict, compare=False, repr=False)
    _dp_at: dict[str, str] = field(default_factory=dict, compare=False, repr=False)
    _seg: np.ndarray = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for lane in self.lanes.values():
            if lane.src in out:
                out[lane.src].append(lane.id)
        object.__setattr__(self, "_out", {n: tuple(ls) for n, ls in out.items()})
        object.__setattr__(self, "_dp_at", {dp.node: dp.id for dp in self.decision_points.values()})
        seg = np.array([[o.a[0], o.a[1], o.b[0], o.b[1]] for o in self.obstacles], dtype=float)
        object.__setattr__(self, "_seg", seg.reshape(-1, 4))

    def outgoing(self, node: str) -> tuple[str, ...]:
        return self._out.get(node, ())

    def decision_point_at(self, node: str) -> str | None:
        return self._dp_at.get(node)

    @property
    def obstacle_array(self) -> np.ndarray:
        """Obstacles as an (n, 4) array of ``ax, ay, bx, by``."""
        return self._seg

    def is_exit(self, node: str) -> bool:
        return node in self.exit_points

    def is_parking(self, node: str) -> bool:
        return node in self.parking_spots

    def lane_direction(self, lane_id: str) -> tuple[float, float]:
        lane = self.lanes[lane_id]
        (x0, y0), (x1, y1) = self.nodes[lane.src], self.nodes[lane.dst]
        return (x1 - x0) / lane.length, (y1 - y0) / lane.length


def pose_on_lane(net: GarageNetwork, lane: str, progress: float) -> tuple[float, float, float]:
    """Return ``(x, y, heading)`` at ``progress`` metres along ``lane``."""
    ln = net.lanes[lane]
    if not (0.0 <= progress <= ln.length):
        raise ValueError(f"progress {progress!r} outside [0, {ln.length}] on lane {lane}")
    (x0, y0), (x1, y1) = net.nodes[ln.src], net.nodes[ln.dst]
    if progress == ln.length:
        x, y = x1, y1
    else:
        s = progress / ln.length
        x, y = x0 + s * (x1 - x0), y0 + s * (y1 - y0)
    return x, y, math.atan2(y1 - y0, x1 - x0)


# --- loading / validation -------------------------------------------------


def _require(doc: dict, key: str, kind: type) -> Any:
    if key not in doc:
        raise NetworkError(f"network document missing key {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise NetworkError(f"network key {key!r} must be a {kind.__name__}")
    return value


def from_dict(doc: dict) -> GarageNetwork:
    """Build a network from a parsed document, collecting every violation."""
    if not isinstance(doc, dict):
        raise NetworkError("network document must be a JSON object")
    try:
        nodes = {str(n["id"]): (float(n["x"]), float(n["y"])) for n in _require(doc, "nodes", list)}
        raw_lanes = _require(doc, "lanes", list)
        raw_dps = _require(doc, "decision_points", list)
        raw_obs = _require(doc, "obstacles", list)
        raw_spawn = _require(doc, "spawn_points", list)
        exits = tuple(str(n) for n in _require(doc, "exit_points", list))
        parking = tuple(str(n) for n in _require(doc, "parking_spots", list))
        route = tuple(str(l) for l in _require(doc, "av_route", list))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkError(f"malformed network document: {exc!r}") from exc

    problems: list[str] = []
    if len(nodes) != len(doc["nodes"]):
        problems.append("duplicate node ids")

    lanes: dict[str, Lane] = {}
    for raw in raw_lanes:
        try:
            lid, src, dst = str(raw["id"]), str(raw["from"]), str(raw["to"])
            speed = float(raw.get("speed", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkError(f"malformed lane entry {raw!r}") from exc
        if lid in lanes:
            problems.append(f"lane {lid}: duplicate id")
            continue
        missing = [n for n in (src, dst) if n not in nodes]
        if missing:
            problems.append(f"lane {lid}: unknown node(s) {', '.join(missing)}")
            continue
        (x0, y0), (x1, y1) = nodes[src], nodes[dst]
        length = math.hypot(x1 - x0, y1 - y0)
        if length <= 0.0:
            problems.append(f"lane {lid}: zero length")
            continue
        if "length" in raw and abs(float(raw["length"]) - length) > LENGTH_TOL:
            problems.append(f"lane {lid}: stated length {raw['length']} != geometric length {length:.6f}")
        lanes[lid] = Lane(lid, src, dst, length, speed)

    dps: dict[str, DecisionPoint] = {}
    for raw in raw_dps:
        try:
            did, node = str(raw["id"]), str(raw["node"])
            options = tuple(str(o) for o in raw["options"])
            weights = raw.get("weights")
        except (KeyError, TypeError) as exc:
            raise NetworkError(f"malformed decision point entry {raw!r}") from exc
        if did in dps:
            problems.append(f"decision point {did}: duplicate id")
            continue
        if node not in nodes:
            problems.append(f"decision point {did}: unknown node {node}")
        if not 2 <= len(options) <= 3:
            problems.append(f"decision point {did}: has {len(options)} options, need 2 or 3")
        for opt in options:
            if opt not in lanes:
                problems.append(f"decision point {did}: option {opt} is not a lane")
            elif lanes[opt].src != node:
                problems.append(f"decision point {did}: option {opt} leaves node {lanes[opt].src}, not {node}")
        if len(set(options)) != len(options):
            problems.append(f"decision point {did}: repeated option")
        if weights is None:
            w = tuple(1.0 / len(options) for _ in options) if options else ()
        else:
            w = tuple(float(x) for x in weights)
            if len(w) != len(options):
                problems.append(f"decision point {did}: {len(w)} weights for {len(options)} options")
            if any(x < 0 for x in w):
                problems.append(f"decision point {did}: negative weight")
            if abs(sum(w) - 1.0) > WEIGHT_TOL:
                problems.append(f"decision point {did}: weights sum to {sum(w)!r}")
        dps[did] = DecisionPoint(did, node, options, w)
    at_node: dict[str, str] = {}
    for dp in dps.values():
        if dp.node in at_node:
            problems.append(f"decision point {dp.id}: node {dp.node} already has {at_node[dp.node]}")
        at_node[dp.node] = dp.id

    obstacles = []
    for i, raw in enumerate(raw_obs):
        try:
            a, b = raw["a"], raw["b"]
            obstacles.append(Obstacle(str(raw.get("id", f"o{i}")), (float(a[0]), float(a[1])), (float(b[0]), float(b[1]))))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise NetworkError(f"malformed obstacle entry {raw!r}") from exc

    spawns = []
    for raw in raw_spawn:
        try:
            sp = SpawnPoint(str(raw["node"]), float(raw["rate"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkError(f"malformed spawn point entry {raw!r}") from exc
        if sp.node not in nodes:
            problems.append(f"spawn point {sp.node}: unknown node")
        if sp.rate < 0:
            problems.append(f"spawn point {sp.node}: negative rate")
        spawns.append(sp)

    for n in exits + parking:
        if n not in nodes:
            problems.append(f"exit/parking node {n}: unknown node")

    if not route:
        problems.append("av_route is empty")
    for i, lid in enumerate(route):
        if lid not in lanes:
            problems.append(f"av_route index {i}: unknown lane {lid}")
    if route and all(l in lanes for l in route):
        for i in range(len(route)):
            prev, nxt = lanes[route[i - 1]], lanes[route[i]]
            if prev.dst != nxt.src:
                problems.append(f"av_route discontinuity at index {i}")

    # Topology the simulator relies on: BVs need an unambiguous way forward.
    out: dict[str, list[str]] = {n: [] for n in nodes}
    for lane in lanes.values():
        out[lane.src].append(lane.id)
    for sp in spawns:
        if sp.node in out and len(out[sp.node]) != 1:
            problems.append(f"spawn point {sp.node}: needs exactly one outgoing lane")
    for n, outs in out.items():
        if n in exits or n in at_node:
            continue
        reached = any(l.dst == n for l in lanes.values())
        if reached and not outs:
            problems.append(f"node {n}: dead end that is not an exit")
        if reached and len(outs) > 1:
            problems.append(f"node {n}: junction without a decision point")

    if problems:
        raise NetworkError(f"network {doc.get('name', '?')!r} is invalid", problems)

    return GarageNetwork(
        name=str(doc.get("name", "unnamed")),
        nodes=nodes,
        lanes=lanes,
        decision_points=dps,
        obstacles=tuple(obstacles),
        spawn_points=tuple(spawns),
        exit_points=exits,
        parking_spots=parking,
        av_route=route,
    )


def to_dict(net: GarageNetwork) -> dict:
    return {
        "schema": SCHEMA,
        "name": net.name,
        "nodes": [{"id": n, "x": x, "y": y} for n, (x, y) in net.nodes.items()],
        "lanes": [
            {"id": l.id, "from": l.src, "to": l.dst, "length": l.length, "speed": l.speed}
            for l in net.lanes.values()
        ],
        "decision_points": [
            {"id": d.id, "node": d.node, "options": list(d.options), "weights": list(d.weights)}
            for d in net.decision_points.values()
        ],
        "obstacles": [{"id": o.id, "a": list(o.a), "b": list(o.b)} for o in net.obstacles],
        "spawn_points": [{"node": s.node, "rate": s.rate} for s in net.spawn_points],
        "exit_points": list(net.exit_points),
        "parking_spots": list(net.parking_spots),
        "av_route": list(net.av_route),
    }


def bundled_maps() -> list[str]:
    root = resources.files("parkfail") / "data" / "maps"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_map(name_or_path: str | Path) -> Path:
    """Accept either a filesystem path or the name of a bundled map."""
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = resources.files("parkfail") / "data" / "maps" / f"{name_or_path}.json"
    if bundled.is_file():
        return Path(str(bundled))
    raise FileNotFoundError(f"no network file or bundled map named {name_or_path!r}")


def load_network(path: str | Path) -> GarageNetwork:
    path = resolve_map(path)
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NetworkError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(doc)


def save_network(net: GarageNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(net), indent=1) + "\n", encoding="utf-8")
