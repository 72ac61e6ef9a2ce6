"""Deterministic discrete-time traffic simulation on a :class:`GarageNetwork`.

Vehicles move along lane chains with a two-parameter cap rule: drive at the
nominal speed unless that would bring the centre-to-centre gap to the leader on
the path ahead below ``min_headway``. BVs stop at decision points and wait for
a maneuver; the AV loops over ``av_route`` and never stops for routing.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import asdict, dataclass, field, replace
from typing import TYPE_CHECKING, Iterable, Protocol, Sequence

import numpy as np

from .network import GarageNetwork, pose_on_lane

if TYPE_CHECKING:
    from .perception import SurrogateDetector
    from .recorder import Episode

AV_ID = 0


class SimulationError(RuntimeError):
    """A maneuver or provider output that the simulator cannot apply."""


@dataclass(frozen=True)
class VehicleState:
    id: int
    lane: str
    progress: float
    speed: float
    role: str  # "AV" or "BV"
    parked: bool = False
    dwell: int = 0  # parked steps left
    next_lane: str | None = None  # committed route choice while waiting at a decision point
    route_pos: int = 0  # AV only: index into av_route

    @property
    def is_av(self) -> bool:
        return self.role == "AV"


@dataclass(frozen=True)
class SceneState:
    k: int
    time: float
    vehicles: tuple[VehicleState, ...]
    next_id: int = 1

    @property
    def av(self) -> VehicleState:
        return self.vehicles[0]

    def bvs(self) -> tuple[VehicleState, ...]:
        return self.vehicles[1:]

    def get(self, vid: int) -> VehicleState:
        for v in self.vehicles:
            if v.id == vid:
                return v
        raise KeyError(vid)


@dataclass(frozen=True)
class Maneuver:
    vehicle: int
    dp: str | None = None
    option: int | None = None

    @classmethod
    def cont(cls, vehicle: int) -> "Maneuver":
        return cls(vehicle)

    @classmethod
    def choose(cls, vehicle: int, dp: str, option: int) -> "Maneuver":
        return cls(vehicle, dp, option)

    @property
    def is_route_choice(self) -> bool:
        return self.dp is not None


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.5
    v_nominal: float = 3.0
    v_max: float = 5.0
    av_speed: float | None = 2.5  # None: same as v_nominal
    min_headway: float = 6.0
    vehicle_length: float = 4.5
    spawn_rate: float | None = None  # overrides every spawn point's map rate when set
    max_bvs: int = 12
    horizon: int = 3600
    initial_bvs: int = 2
    dwell_min: float = 10.0
    dwell_max: float = 30.0
    seed: int = 0

    def __post_init__(self) -> None:
        problems = []
        if not self.dt > 0:
            problems.append("dt must be > 0")
        if not self.min_headway > self.vehicle_length:
            problems.append("min_headway must exceed vehicle_length")
        if self.horizon < 0:
            problems.append("horizon must be >= 0")
        if not 0 < self.v_nominal <= self.v_max:
            problems.append("need 0 < v_nominal <= v_max")
        if self.av_speed is not None and not 0 < self.av_speed <= self.v_max:
            problems.append("need 0 < av_speed <= v_max")
        if self.max_bvs < 0 or self.initial_bvs < 0:
            problems.append("vehicle counts must be >= 0")
        if not 0 <= self.dwell_min <= self.dwell_max:
            problems.append("need 0 <= dwell_min <= dwell_max")
        if problems:
            raise ValueError("invalid SimConfig: " + "; ".join(problems))

    @property
    def av_target(self) -> float:
        return self.v_nominal if self.av_speed is None else self.av_speed

    def steps_for(self, seconds: float) -> int:
        return int(round(seconds / self.dt))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(**d)


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators for each consumer so environments share spawns."""
    names = ("init", "sim", "maneuver", "perception")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.PCG64(c)) for n, c in zip(names, children)}


# --- geometry helpers --------------------------------------------------------


def vehicle_xy(net: GarageNetwork, v: VehicleState) -> tuple[float, float, float]:
    return pose_on_lane(net, v.lane, v.progress)


def waiting_decision_point(net: GarageNetwork, v: VehicleState) -> str | None:
    """Decision point a BV is waiting at without a committed choice, else None."""
    if v.is_av or v.parked or v.next_lane is not None:
        return None
    lane = net.lanes[v.lane]
    if v.progress != lane.length:
        return None
    return net.decision_point_at(lane.dst)


def decision_queries(net: GarageNetwork, scene: SceneState) -> list[tuple[int, str]]:
    out = []
    for v in scene.vehicles:
        dp = waiting_decision_point(net, v)
        if dp is not None:
            out.append((v.id, dp))
    return out


# --- initial state -------------------------------------------------------------


def _spawn_lane(net: GarageNetwork, node: str) -> str:
    return net.outgoing(node)[0]


def init_scene(net: GarageNetwork, cfg: SimConfig, seed: int | None = None) -> SceneState:
    rng = rng_streams(cfg.seed if seed is None else seed)["init"]
    av = VehicleState(AV_ID, net.av_route[0], 0.0, cfg.av_target, "AV")
    vehicles = [av]
    next_id = 1
    spawns = [sp for sp in net.spawn_points]
    for _ in range(cfg.initial_bvs):
        if not spawns:
            break
        for _attempt in range(50):
            sp = spawns[int(rng.integers(len(spawns)))]
            lane = _spawn_lane(net, sp.node)
            p = float(rng.uniform(0.0, net.lanes[lane].length))
            if all(v.lane != lane or abs(v.progress - p) >= cfg.min_headway for v in vehicles):
                vehicles.append(VehicleState(next_id, lane, p, 0.0, "BV"))
                next_id += 1
                break
    return SceneState(0, 0.0, tuple(vehicles), next_id)


# --- stepping --------------------------------------------------------------------


def _validate(net: GarageNetwork, scene: SceneState, maneuvers: Iterable[Maneuver]) -> dict[int, str]:
    waiting = {vid: dp for vid, dp in decision_queries(net, scene)}
    chosen: dict[int, str] = {}
    for m in maneuvers:
        if not m.is_route_choice:
            continue
        if m.vehicle not in waiting:
            raise SimulationError(f"route choice for vehicle {m.vehicle}, which is not waiting at a decision point")
        if waiting[m.vehicle] != m.dp:
            raise SimulationError(f"vehicle {m.vehicle} waits at {waiting[m.vehicle]}, maneuver names {m.dp}")
        opts = net.decision_points[m.dp].options
        if m.option is None or not 0 <= m.option < len(opts):
            raise SimulationError(f"option {m.option} invalid at decision point {m.dp} ({len(opts)} options)")
        if m.vehicle in chosen:
            raise SimulationError(f"two maneuvers for vehicle {m.vehicle}")
        chosen[m.vehicle] = opts[m.option]
    missing = sorted(set(waiting) - set(chosen))
    if missing:
        raise SimulationError(f"no route choice for waiting vehicle(s) {missing}")
    return chosen


@dataclass
class _Path:
    lanes: list[str] = field(default_factory=list)
    offsets: list[float] = field(default_factory=list)  # path distance at each lane's progress 0
    stop: float = math.inf  # path distance where the vehicle must halt
    stop_kind: str = ""  # "dp", "park", "exit"


def _successor(net: GarageNetwork, v: VehicleState, lane_id: str, first: bool, route_pos: int) -> tuple[str | None, str]:
    """Next lane after ``lane_id`` on v's path, or (None, reason) where v must halt."""
    if v.is_av:
        return net.av_route[(route_pos + 1) % len(net.av_route)], ""
    node = net.lanes[lane_id].dst
    if net.is_exit(node):
        return None, "exit"
    if net.decision_point_at(node) is not None:
        if first and v.next_lane is not None:
            return v.next_lane, ""
        return None, "dp"
    if net.is_parking(node) and not (first and v.progress == net.lanes[lane_id].length):
        return None, "park"
    return net.outgoing(node)[0], ""


def _path_ahead(net: GarageNetwork, v: VehicleState, horizon: float) -> _Path:
    path = _Path([v.lane], [-v.progress])
    lane_id, pos, first = v.lane, v.route_pos, True
    while True:
        end = path.offsets[-1] + net.lanes[lane_id].length
        if end > horizon:
            return path
        nxt, why = _successor(net, v, lane_id, first, pos)
        if nxt is None:
            path.stop, path.stop_kind = end, why
            return path
        first = False
        pos += 1
        lane_id = nxt
        path.lanes.append(nxt)
        path.offsets.append(end)


def _leader_gap(v: VehicleState, path: _Path, others: Iterable[VehicleState]) -> float:
    where = {}
    for lane, off in zip(path.lanes, path.offsets):
        where.setdefault(lane, off)
    gap = math.inf
    for u in others:
        if u.id == v.id or u.parked:
            continue  # parked cars sit in the lot, off the travelled lane
        off = where.get(u.lane)
        if off is None:
            continue
        if u.lane == v.lane and u.progress <= v.progress:
            continue
        gap = min(gap, off + u.progress)
    return gap


def _advance(net: GarageNetwork, cfg: SimConfig, v: VehicleState, others: Iterable[VehicleState],
             rng: np.random.Generator) -> VehicleState | None:
    if v.parked:
        left = v.dwell - 1
        return replace(v, speed=0.0, dwell=max(left, 0), parked=left > 0)

    if v.is_av:
        target = cfg.av_target
    else:
        lane_speed = net.lanes[v.lane].speed
        target = min(cfg.v_nominal, lane_speed) if lane_speed > 0 else cfg.v_nominal
    path = _path_ahead(net, v, cfg.v_max * cfg.dt + cfg.min_headway)
    gap = _leader_gap(v, path, others)
    travel = min(target * cfg.dt, max(0.0, gap - cfg.min_headway), path.stop)
    if travel <= 0.0:
        return replace(v, speed=0.0)

    # locate the lane holding path distance ``travel``
    idx = len(path.offsets) - 1
    while idx > 0 and path.offsets[idx] >= travel:
        idx -= 1
    lane = path.lanes[idx]
    length = net.lanes[lane].length
    progress = min(travel - path.offsets[idx], length)
    if travel >= path.stop:
        progress = length
    speed = travel / cfg.dt
    next_lane = v.next_lane if idx == 0 else None
    new = replace(v, lane=lane, progress=progress, speed=speed, next_lane=next_lane,
                  route_pos=(v.route_pos + idx) % len(net.av_route) if v.is_av else 0)
    if travel >= path.stop:
        if path.stop_kind == "exit":
            return None
        if path.stop_kind == "park":
            steps = int(math.ceil(rng.uniform(cfg.dwell_min, cfg.dwell_max) / cfg.dt))
            return replace(new, parked=steps > 0, dwell=steps)
    return new


def _spawn(net: GarageNetwork, cfg: SimConfig, vehicles: dict[int, VehicleState], next_id: int,
           rng: np.random.Generator) -> int:
    for sp in net.spawn_points:
        rate = sp.rate if cfg.spawn_rate is None else cfg.spawn_rate
        arrivals = int(rng.poisson(rate * cfg.dt)) if rate > 0 else 0
        lane = _spawn_lane(net, sp.node)
        for _ in range(arrivals):
            n_bv = len(vehicles) - (1 if AV_ID in vehicles else 0)
            blocked = any(u.lane == lane and u.progress < cfg.min_headway for u in vehicles.values())
            if n_bv >= cfg.max_bvs or blocked:
                continue  # thinned
            vehicles[next_id] = VehicleState(next_id, lane, 0.0, 0.0, "BV")
            next_id += 1
    return next_id


def step(net: GarageNetwork, cfg: SimConfig, scene: SceneState, maneuvers: Sequence[Maneuver],
         rng: np.random.Generator) -> SceneState:
    """Advance the scene by one ``dt``. Vehicles update in id order against the
    partially updated scene, which keeps the headway rule collision-free."""
    chosen = _validate(net, scene, maneuvers)
    current: dict[int, VehicleState] = {}
    for v in scene.vehicles:
        current[v.id] = replace(v, next_lane=chosen[v.id]) if v.id in chosen else v
    for vid in sorted(current):
        new = _advance(net, cfg, current[vid], current.values(), rng)
        if new is None:
            del current[vid]
        else:
            current[vid] = new
    next_id = _spawn(net, cfg, current, scene.next_id, rng)
    vehicles = tuple(current[i] for i in sorted(current))
    return SceneState(scene.k + 1, (scene.k + 1) * cfg.dt, vehicles, next_id)


# --- maneuver providers --------------------------------------------------------------


@dataclass(frozen=True)
class Choice:
    probs: tuple[float, ...]
    branch: str = "standard"


class ManeuverProvider(Protocol):
    def distributions(self, net: GarageNetwork, scene: SceneState,
                      queries: Sequence[tuple[int, str]]) -> list[Choice]: ...


class StandardProvider:
    """The original environment: map-default weights at every decision point."""

    def distributions(self, net, scene, queries):
        return [Choice(net.decision_points[dp].weights, "standard") for _, dp in queries]


def sample_option(probs: Sequence[float], u: float) -> int:
    cum = list(np.cumsum(probs))
    return min(bisect.bisect_right(cum, u * cum[-1]), len(probs) - 1)


def choose_maneuvers(net: GarageNetwork, scene: SceneState, provider: ManeuverProvider,
                     rng: np.random.Generator) -> tuple[list[Maneuver], list[Choice]]:
    queries = decision_queries(net, scene)
    if not queries:
        return [], []
    choices = provider.distributions(net, scene, queries)
    if len(choices) != len(queries):
        raise SimulationError(f"provider returned {len(choices)} distributions for {len(queries)} queries")
    out = []
    for (vid, dp), ch in zip(queries, choices):
        n = len(net.decision_points[dp].options)
        if len(ch.probs) != n or any(p < 0 for p in ch.probs) or abs(sum(ch.probs) - 1.0) > 1e-6:
            raise SimulationError(f"provider distribution {ch.probs} invalid for {dp}")
        out.append(Maneuver.choose(vid, dp, sample_option(ch.probs, float(rng.random()))))
    return out, choices


def run_episode(net: GarageNetwork, cfg: SimConfig, seed: int, provider: ManeuverProvider,
                perception: "SurrogateDetector", initial: SceneState | None = None,
                episode_id: str | None = None) -> "Episode":
    """Simulate ``cfg.horizon`` steps and return the ``horizon + 1`` frame log."""
    from .recorder import Episode, make_frame

    streams = rng_streams(seed)
    scene = init_scene(net, cfg, seed) if initial is None else initial
    frames = []
    for k in range(cfg.horizon + 1):
        seen = perception.observe(net, scene, streams["perception"])
        maneuvers, choices = choose_maneuvers(net, scene, provider, streams["maneuver"])
        frames.append(make_frame(net, scene, maneuvers, choices, seen))
        if k < cfg.horizon:
            scene = step(net, cfg, scene, maneuvers, streams["sim"])
    return Episode(episode_id or f"seed{seed}", seed, cfg, frames)
