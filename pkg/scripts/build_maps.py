"""Regenerate the bundled garage maps under src/parkfail/data/maps/.

    python scripts/build_maps.py
"""

from __future__ import annotations

import json
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "parkfail" / "data" / "maps"


class MapBuilder:
    def __init__(self, name: str):
        self.doc = {"schema": "parkfail.network/1", "name": name, "nodes": [], "lanes": [],
                    "decision_points": [], "obstacles": [], "spawn_points": [], "exit_points": [],
                    "parking_spots": [], "av_route": []}
        self._lane_ids: dict[tuple[str, str], str] = {}

    def node(self, nid: str, x: float, y: float) -> str:
        self.doc["nodes"].append({"id": nid, "x": float(x), "y": float(y)})
        return nid

    def lane(self, a: str, b: str, speed: float = 3.0) -> str:
        lid = f"{a}-{b}"
        self.doc["lanes"].append({"id": lid, "from": a, "to": b, "speed": speed})
        self._lane_ids[(a, b)] = lid
        return lid

    def dp(self, node: str, targets: list[str], weights: list[float] | None = None) -> None:
        d = {"id": f"dp_{node}", "node": node, "options": [self._lane_ids[(node, t)] for t in targets]}
        if weights is not None:
            d["weights"] = weights
        self.doc["decision_points"].append(d)

    def wall(self, ax: float, ay: float, bx: float, by: float) -> None:
        oid = f"w{len(self.doc['obstacles'])}"
        self.doc["obstacles"].append({"id": oid, "a": [float(ax), float(ay)], "b": [float(bx), float(by)]})

    def box(self, x0: float, y0: float, x1: float, y1: float) -> None:
        self.wall(x0, y0, x1, y0)
        self.wall(x1, y0, x1, y1)
        self.wall(x1, y1, x0, y1)
        self.wall(x0, y1, x0, y0)

    def write(self) -> Path:
        path = OUT / f"{self.doc['name']}.json"
        path.write_text(json.dumps(self.doc, indent=1) + "\n", encoding="utf-8")
        return path


def garage_small() -> MapBuilder:
    m = MapBuilder("garage_small")
    for nid, x, y in [("r0", 0, 0), ("r1", 20, 0), ("r2", 40, 0), ("q", 40, 12), ("r3", 40, 24),
                      ("r4", 20, 24), ("r5", 0, 24), ("m", 20, 12), ("p0", 30, 12), ("p1", 30, 32),
                      ("s0", -12, 0), ("s1", 52, 24), ("x0", 20, -10), ("x1", 20, 36)]:
        m.node(nid, x, y)
    ring = ["r0", "r1", "r2", "q", "r3", "r4", "r5"]
    m.doc["av_route"] = [m.lane(a, b) for a, b in zip(ring, ring[1:] + ring[:1])]
    m.lane("r1", "x0")
    m.lane("r1", "m")
    m.lane("m", "r4")
    m.lane("m", "p0")
    m.lane("p0", "q")
    m.lane("r3", "p1")
    m.lane("p1", "r4")
    m.lane("r4", "x1")
    m.lane("s0", "r0")
    m.lane("s1", "r3")
    m.dp("r1", ["r2", "x0", "m"])
    m.dp("m", ["r4", "p0"])
    m.dp("r3", ["r4", "p1"])
    m.dp("r4", ["r5", "x1"])
    m.doc["spawn_points"] = [{"node": "s0", "rate": 0.04}, {"node": "s1", "rate": 0.04}]
    m.doc["exit_points"] = ["x0", "x1"]
    m.doc["parking_spots"] = ["p0", "p1"]
    m.box(4, 5, 15, 19)
    m.box(25, 16, 35, 19)
    m.wall(25, 5, 35, 5)
    return m


def garage_medium() -> MapBuilder:
    """84 m x 42 m one-way ring (the AV loop) around the parking blocks.

    Every other ring node is a decision point: keep circulating, turn into a
    bay (parking spot) 12 m out behind the outer wall that rejoins the ring one
    node later, or take a cross aisle / exit where one exists. Routing weights
    are left unspecified, i.e. uniform.
    """
    m = MapBuilder("garage_medium")
    W, H, S = 84, 42, 14
    ring: list[str] = []
    for x in range(0, W, S):
        ring.append(m.node(f"b{x}", x, 0))
    for y in range(0, H, S):
        ring.append(m.node(f"e{y}", W, y))
    for x in range(W, 0, -S):
        ring.append(m.node(f"t{x}", x, H))
    for y in range(H, 0, -S):
        ring.append(m.node(f"w{y}", 0, y))
    coords = {n["id"]: (n["x"], n["y"]) for n in m.doc["nodes"]}
    m.doc["av_route"] = [m.lane(a, b) for a, b in zip(ring, ring[1:] + ring[:1])]

    options: dict[str, list[str]] = {r: [ring[(i + 1) % len(ring)]] for i, r in enumerate(ring)}
    bays = []
    # roadside bays on the outside of the ring, rejoining at the next node
    for i, r in enumerate(ring):
        if i % 2:
            continue
        nxt = ring[(i + 1) % len(ring)]
        (x0, y0), (x1, y1) = coords[r], coords[nxt]
        dx, dy = x1 - x0, y1 - y0
        norm = (dx * dx + dy * dy) ** 0.5
        ox, oy = dy / norm * 12.0, -dx / norm * 12.0  # right-hand normal = outside for a CCW ring
        p = m.node(f"p_{r}", x0 + ox, y0 + oy)
        m.lane(r, p)
        m.lane(p, nxt)
        options[r].append(p)
        bays.append(p)
    # cross aisles through the block gaps: north at x=28, south at x=56
    m.node("a28", 28, 21)
    m.node("a56", 56, 21)
    m.node("pa28", 34, 21)
    m.node("pa56", 50, 21)
    m.lane("b28", "a28")
    m.lane("a28", "t28")
    m.lane("a28", "pa28")
    m.lane("pa28", "t42")
    m.lane("t56", "a56")
    m.lane("a56", "b56")
    m.lane("a56", "pa56")
    m.lane("pa56", "b42")
    options["b28"].append("a28")
    options["t56"].append("a56")
    bays += ["pa28", "pa56"]
    m.dp("a28", ["t28", "pa28"])
    m.dp("a56", ["b56", "pa56"])
    # entries and exits
    m.node("in_s", 42, -12)
    m.node("in_n", 42, 54)
    m.node("out_e", 96, 28)
    m.node("out_w", -12, 14)
    m.lane("in_s", "b42")
    m.lane("in_n", "t42")
    m.lane("e28", "out_e")
    m.lane("w14", "out_w")
    options["e28"].append("out_e")
    options["w14"].append("out_w")
    for r in ring:
        if len(options[r]) > 1:
            m.dp(r, options[r])
    m.doc["spawn_points"] = [{"node": "in_s", "rate": 0.025}, {"node": "in_n", "rate": 0.025}]
    m.doc["exit_points"] = ["out_e", "out_w"]
    m.doc["parking_spots"] = bays
    # parking blocks between the aisles, plus pillars lining the ring
    m.box(6, 6, 22, 36)
    m.box(34, 26, 50, 36)
    m.box(34, 6, 50, 16)
    m.box(62, 6, 78, 36)
    # outer wall just beside the ring: bays, entries and exits lie behind it
    m.box(-1.2, -1.2, W + 1.2, H + 1.2)
    return m


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for build in (garage_small, garage_medium):
        print(build().write())
