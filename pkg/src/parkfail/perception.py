"""Surrogate perception: occlusion-aware visibility, a binned noise/miss detector,
framewise failure metrics, and a count-driven "retraining" of the error profile.

The detector is not a model of any real network. Its error scale and miss rate
depend on three scene features of each visible BV (distance to the AV, how much
of the sight line another vehicle covers, and how crowded the BV's surroundings
are), which is what lets route choices change how often perception fails.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .network import GarageNetwork, pose_on_lane
from .sim import SceneState

log = logging.getLogger(__name__)

SCHEMA = "parkfail.surrogate/1"
FOOTPRINT_RADIUS = 1.0
BLOCK_FRACTION = 0.5
DENSITY_RADIUS = 10.0
MATCH_GATE = 2.0


@dataclass(frozen=True)
class SensorConfig:
    range: float = 30.0
    fov: float = 2 * math.pi
    mount_offset: float = 1.5

    def __post_init__(self) -> None:
        if not self.range > 0:
            raise ValueError("sensor range must be > 0")
        if not 0 < self.fov <= 2 * math.pi:
            raise ValueError("sensor fov must be in (0, 2*pi]")


@dataclass(frozen=True)
class FailureDefinition:
    kind: str  # "te_max_above" or "fn_positive"
    theta: float = 0.0

    def __post_init__(self) -> None:
        if self.kind == "te_max_above" and not self.theta > 0:
            raise ValueError("TE_max threshold must be > 0")
        if self.kind not in ("te_max_above", "fn_positive"):
            raise ValueError(f"unknown failure kind {self.kind!r}")

    @classmethod
    def te_above(cls, theta: float) -> "FailureDefinition":
        return cls("te_max_above", float(theta))

    @classmethod
    def fn_positive(cls) -> "FailureDefinition":
        return cls("fn_positive")

    def __str__(self) -> str:
        return f"TE_max > {self.theta:g}" if self.kind == "te_max_above" else "FN > 0"


# experiment letters used throughout configs and reports
DEFINITIONS: dict[str, FailureDefinition] = {
    "a": FailureDefinition.te_above(0.5),
    "b": FailureDefinition.te_above(0.8),
    "c": FailureDefinition.te_above(1.0),
    "d": FailureDefinition.fn_positive(),
}


@dataclass(frozen=True)
class PerceptionMetrics:
    te_max: float
    fn: int


def is_failure(m: PerceptionMetrics, definition: FailureDefinition) -> bool:
    if definition.kind == "te_max_above":
        return m.te_max > definition.theta
    return m.fn > 0


@dataclass
class Detection:
    x: float
    y: float
    matched: int | None = None


@dataclass
class PerceptionOutput:
    detections: list[Detection] = field(default_factory=list)


# --- visibility ----------------------------------------------------------------------


@dataclass(frozen=True)
class Visibility:
    """Per-BV sight-line facts for one scene (arrays aligned with ``ids``)."""

    ids: np.ndarray
    xy: np.ndarray  # BV centres
    distance: np.ndarray  # to the AV centre
    occlusion: np.ndarray  # largest fraction of the sight line covered by another vehicle
    visible: np.ndarray
    density: np.ndarray  # other vehicles within DENSITY_RADIUS of the BV


def scene_xy(net: GarageNetwork, scene: SceneState) -> tuple[np.ndarray, np.ndarray]:
    """Centres (n, 2) and headings (n,) for every vehicle, AV first."""
    poses = [pose_on_lane(net, v.lane, v.progress) for v in scene.vehicles]
    arr = np.array(poses, dtype=float).reshape(-1, 3)
    return arr[:, :2], arr[:, 2]


def _segments_cross(o: np.ndarray, p: np.ndarray, seg: np.ndarray) -> np.ndarray:
    """Boolean (n_targets,) : does segment o->p[i] cross any obstacle segment?"""
    if seg.shape[0] == 0 or p.shape[0] == 0:
        return np.zeros(p.shape[0], dtype=bool)
    r = p - o  # (n, 2)
    a = seg[:, :2]
    s = seg[:, 2:] - a  # (m, 2)
    denom = r[:, None, 0] * s[None, :, 1] - r[:, None, 1] * s[None, :, 0]
    qp = a[None, :, :] - o[None, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (qp[..., 0] * s[None, :, 1] - qp[..., 1] * s[None, :, 0]) / denom
        u = (qp[..., 0] * r[:, None, 1] - qp[..., 1] * r[:, None, 0]) / denom
    hit = (denom != 0) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
    return hit.any(axis=1)


def visibility(net: GarageNetwork, scene: SceneState, sensor: SensorConfig,
               xy: np.ndarray | None = None, heading: np.ndarray | None = None) -> Visibility:
    if xy is None or heading is None:
        xy, heading = scene_xy(net, scene)
    ids = np.array([v.id for v in scene.vehicles[1:]], dtype=int)
    av = xy[0]
    h = heading[0]
    origin = av + sensor.mount_offset * np.array([math.cos(h), math.sin(h)])
    bv = xy[1:]
    if len(ids) == 0:
        empty = np.zeros(0)
        return Visibility(ids, bv, empty, empty, np.zeros(0, dtype=bool), np.zeros(0, dtype=int))

    rel = bv - origin
    ray_len = np.hypot(rel[:, 0], rel[:, 1])
    ok = ray_len <= sensor.range
    if sensor.fov < 2 * math.pi:
        ang = np.arctan2(rel[:, 1], rel[:, 0]) - h
        ang = (ang + math.pi) % (2 * math.pi) - math.pi
        ok &= np.abs(ang) <= sensor.fov / 2

    ok &= ~_segments_cross(origin, bv, net.obstacle_array)

    # closest approach of each sight line (rows) to each other BV centre (cols)
    denom = np.where(ray_len > 0, ray_len**2, 1.0)
    cp = bv[None, :, :] - origin  # (1, m, 2) blockers relative to origin
    t = (cp[..., 0] * rel[:, None, 0] + cp[..., 1] * rel[:, None, 1]) / denom[:, None]
    t = np.clip(t, 0.0, 1.0)
    closest = origin + t[..., None] * rel[:, None, :]
    miss = np.hypot(closest[..., 0] - bv[None, :, 0], closest[..., 1] - bv[None, :, 1])
    frac = np.clip((FOOTPRINT_RADIUS - miss) / FOOTPRINT_RADIUS, 0.0, 1.0)
    np.fill_diagonal(frac, 0.0)
    occl = frac.max(axis=1)
    ok &= occl <= BLOCK_FRACTION

    dist = np.hypot(bv[:, 0] - av[0], bv[:, 1] - av[1])
    pair = np.hypot(xy[None, :, 0] - bv[:, None, 0], xy[None, :, 1] - bv[:, None, 1])
    density = (pair <= DENSITY_RADIUS).sum(axis=1) - 1  # minus the BV itself
    return Visibility(ids, bv, dist, occl, ok, density)


def visible_set(net: GarageNetwork, scene: SceneState, sensor: SensorConfig | None = None) -> set[int]:
    vis = visibility(net, scene, sensor or SensorConfig())
    return {int(i) for i in vis.ids[vis.visible]}


# --- surrogate parameters ---------------------------------------------------------------


def _edges_to_json(edges: Sequence[float]) -> list:
    return [None if math.isinf(e) else e for e in edges]


def _edges_from_json(edges: Sequence) -> tuple[float, ...]:
    return tuple(math.inf if e is None else float(e) for e in edges)


@dataclass(frozen=True)
class SurrogateParams:
    distance_edges: tuple[float, ...]
    occlusion_edges: tuple[float, ...]
    density_edges: tuple[float, ...]
    sigma: np.ndarray  # (n_distance, n_occlusion, n_density)
    miss: np.ndarray
    counts: np.ndarray
    sigma_min: float = 0.05
    miss_floor: float = 0.0
    tau: float = 200.0

    def __post_init__(self) -> None:
        shape = (len(self.distance_edges) - 1, len(self.occlusion_edges) - 1, len(self.density_edges) - 1)
        for name in ("sigma", "miss", "counts"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, bins need {shape}")
            object.__setattr__(self, name, arr)
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if (self.sigma < self.sigma_min - 1e-12).any():
            raise ValueError("every sigma must be >= sigma_min")
        if ((self.miss < 0) | (self.miss > 1)).any():
            raise ValueError("miss probabilities must lie in [0, 1]")
        if (self.counts < 0).any():
            raise ValueError("counts must be >= 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.sigma.shape  # type: ignore[return-value]

    def bin_of(self, distance: float, occlusion: float, density: float) -> tuple[int, int, int]:
        return (
            _band(self.distance_edges, distance),
            _band(self.occlusion_edges, occlusion),
            _band(self.density_edges, density),
        )

    def with_noise(self, sigma: float | None = None, miss: float | None = None) -> "SurrogateParams":
        """Copy with every bin's sigma and/or miss probability overwritten."""
        s = self.sigma if sigma is None else np.full(self.shape, float(sigma))
        m = self.miss if miss is None else np.full(self.shape, float(miss))
        return SurrogateParams(self.distance_edges, self.occlusion_edges, self.density_edges,
                               s, m, self.counts, min(self.sigma_min, float(s.min())),
                               self.miss_floor, self.tau)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "distance_edges": _edges_to_json(self.distance_edges),
            "occlusion_edges": _edges_to_json(self.occlusion_edges),
            "density_edges": _edges_to_json(self.density_edges),
            "sigma": self.sigma.tolist(),
            "miss": self.miss.tolist(),
            "counts": self.counts.astype(int).tolist(),
            "sigma_min": self.sigma_min,
            "miss_floor": self.miss_floor,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateParams":
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported surrogate schema {d.get('schema')!r}")
        return cls(
            _edges_from_json(d["distance_edges"]),
            _edges_from_json(d["occlusion_edges"]),
            _edges_from_json(d["density_edges"]),
            np.array(d["sigma"], dtype=float),
            np.array(d["miss"], dtype=float),
            np.array(d["counts"], dtype=float),
            float(d["sigma_min"]),
            float(d["miss_floor"]),
            float(d["tau"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SurrogateParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _band(edges: Sequence[float], value: float) -> int:
    i = int(np.searchsorted(edges, value, side="right")) - 1
    return min(max(i, 0), len(edges) - 2)


def default_params() -> SurrogateParams:
    text = (resources.files("parkfail") / "data" / "surrogate_default.json").read_text(encoding="utf-8")
    return SurrogateParams.from_dict(json.loads(text))


def load_params(name_or_path: str | Path | None) -> SurrogateParams:
    if name_or_path in (None, "default"):
        return default_params()
    return SurrogateParams.load(name_or_path)  # type: ignore[arg-type]


# --- detection and scoring --------------------------------------------------------------


def detect(net: GarageNetwork, scene: SceneState, params: SurrogateParams, sensor: SensorConfig,
           rng: np.random.Generator, vis: Visibility | None = None) -> PerceptionOutput:
    """One uniform per visible BV decides a miss; detected BVs get two normals."""
    vis = vis or visibility(net, scene, sensor)
    out = PerceptionOutput()
    for i in np.flatnonzero(vis.visible):
        b = params.bin_of(vis.distance[i], vis.occlusion[i], vis.density[i])
        if rng.random() < params.miss[b]:
            continue
        ex, ey = rng.normal(0.0, params.sigma[b], size=2)
        out.detections.append(Detection(float(vis.xy[i, 0] + ex), float(vis.xy[i, 1] + ey)))
    return out


def match(output: PerceptionOutput, vis: Visibility) -> list[tuple[int, int, float]]:
    """Greedy one-to-one matching by ascending distance within MATCH_GATE.

    Returns ``(detection index, BV id, distance)`` and fills ``Detection.matched``.
    """
    idx = np.flatnonzero(vis.visible)
    pairs = []
    for di, det in enumerate(output.detections):
        det.matched = None
        for i in idx:
            d = math.hypot(det.x - vis.xy[i, 0], det.y - vis.xy[i, 1])
            if d <= MATCH_GATE:
                pairs.append((d, di, int(vis.ids[i])))
    pairs.sort()
    used_det, used_bv, out = set(), set(), []
    for d, di, bid in pairs:
        if di in used_det or bid in used_bv:
            continue
        used_det.add(di)
        used_bv.add(bid)
        output.detections[di].matched = bid
        out.append((di, bid, d))
    return out


def metrics(output: PerceptionOutput, scene: SceneState, net: GarageNetwork, sensor: SensorConfig,
            vis: Visibility | None = None) -> PerceptionMetrics:
    vis = vis or visibility(net, scene, sensor)
    pairs = match(output, vis)
    te = max((d for _, _, d in pairs), default=0.0)
    return PerceptionMetrics(float(te), int(vis.visible.sum()) - len(pairs))


@dataclass
class Observation:
    """Everything the recorder keeps from one perception pass."""

    output: PerceptionOutput
    metrics: PerceptionMetrics
    visible: list[tuple[int, tuple[int, int, int], float]]  # (BV id, bin, occlusion)
    flags: dict[str, bool]
    xy: np.ndarray
    heading: np.ndarray


class SurrogateDetector:
    def __init__(self, params: SurrogateParams, sensor: SensorConfig | None = None,
                 definitions: dict[str, FailureDefinition] | None = None):
        self.params = params
        self.sensor = sensor or SensorConfig()
        self.definitions = dict(DEFINITIONS if definitions is None else definitions)

    def observe(self, net: GarageNetwork, scene: SceneState, rng: np.random.Generator) -> Observation:
        xy, heading = scene_xy(net, scene)
        vis = visibility(net, scene, self.sensor, xy, heading)
        out = detect(net, scene, self.params, self.sensor, rng, vis)
        m = metrics(out, scene, net, self.sensor, vis)
        seen = [
            (int(vis.ids[i]), self.params.bin_of(vis.distance[i], vis.occlusion[i], vis.density[i]),
             float(vis.occlusion[i]))
            for i in np.flatnonzero(vis.visible)
        ]
        flags = {name: is_failure(m, d) for name, d in self.definitions.items()}
        return Observation(out, m, seen, flags, xy, heading)


# --- retraining analog --------------------------------------------------------------------


def bin_counts(frames: Iterable, shape: tuple[int, int, int]) -> np.ndarray:
    """Count visible-BV observations per bin over recorded frames."""
    counts = np.zeros(shape, dtype=float)
    for fr in frames:
        for obs in fr.visible:
            counts[tuple(obs["bin"])] += 1
    return counts


def fit_surrogate(dataset: Iterable, base: SurrogateParams) -> SurrogateParams:
    """Shrink each bin's error scale and miss rate with the exposure it got.

    ``dataset`` is an iterable of episodes (anything with ``.frames``). Each bin
    decays from its base value toward the floor as ``exp(-n_b / tau)``.
    """
    frames = [fr for ep in dataset for fr in ep.frames]
    if not frames:
        log.warning("fit_surrogate: empty dataset, returning base parameters")
        return base
    n = bin_counts(frames, base.shape)
    decay = np.exp(-n / base.tau)
    # floors never exceed the base value, so refitting cannot make a bin worse
    sigma_floor = np.minimum(base.sigma_min, base.sigma)
    sigma = sigma_floor + (base.sigma - sigma_floor) * decay
    floor = np.minimum(base.miss_floor, base.miss)
    miss = floor + (base.miss - floor) * decay
    return SurrogateParams(base.distance_edges, base.occlusion_edges, base.density_edges,
                           sigma, miss, n, base.sigma_min, base.miss_floor, base.tau)
