"""Scenario loading, validation, and synthesis.

A scenario bundles the road graph, extruded building footprints, the depot,
optional delivery sets, and every model parameter. Scenarios are immutable
after load and safe to share between concurrently running episodes.

The on-disk form is a versioned UTF-8 JSON document (see `SCHEMA_VERSION`
and the README for the field list). A document may inline the map or point
at a separate map file via `map_file`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

from . import geometry
from .netsim import Cv2xModelParams, LteModelParams
from .seeding import derive_rng

SCHEMA_VERSION = 1

DEFAULT_BOUNDS = (3000.0, 1500.0, 250.0)


class ScenarioError(ValueError):
    """Raised on parse or validation failure; carries per-field issues."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


@dataclass(frozen=True)
class Node:
    id: int
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length: float
    speed_limit: float
    bidirectional: bool = True


@dataclass(frozen=True, slots=True)
class Arc:
    """Directed traversal of an edge; the unit state of turn-aware routing."""

    id: int
    u: int
    v: int
    length: float
    speed_limit: float
    edge_index: int
    reverse_id: int  # arc going v->u over the same edge, -1 for one-ways


class RoadGraph:
    """Road network with a directed-arc expansion and adjacency index."""

    def __init__(self, nodes: list[Node], edges: list[Edge]):
        self.nodes = list(nodes)
        self.edges = list(edges)
        self.pos: dict[int, tuple[float, float]] = {n.id: (n.x, n.y) for n in nodes}
        self.arcs: list[Arc] = []
        self.out_arcs: dict[int, list[int]] = {n.id: [] for n in nodes}
        self._build_arcs()
        self.dead_ends = self._find_dead_ends()

    def _build_arcs(self):
        for ei, e in enumerate(self.edges):
            fwd = len(self.arcs)
            rev = fwd + 1 if e.bidirectional else -1
            self.arcs.append(Arc(fwd, e.u, e.v, e.length, e.speed_limit, ei, rev))
            if e.u in self.out_arcs:
                self.out_arcs[e.u].append(fwd)
            if e.bidirectional:
                self.arcs.append(Arc(rev, e.v, e.u, e.length, e.speed_limit, ei, fwd))
                if e.v in self.out_arcs:
                    self.out_arcs[e.v].append(rev)
        for k in self.out_arcs:
            self.out_arcs[k].sort()  # deterministic expansion order

    def _find_dead_ends(self) -> frozenset[int]:
        neighbors: dict[int, set[int]] = {n.id: set() for n in self.nodes}
        for e in self.edges:
            if e.u in neighbors:
                neighbors[e.u].add(e.v)
            if e.v in neighbors:
                neighbors[e.v].add(e.u)
        return frozenset(k for k, v in neighbors.items() if len(v) <= 1)

    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    def is_strongly_connected(self) -> bool:
        ids = self.node_ids()
        if not ids:
            return True
        fwd: dict[int, list[int]] = {i: [] for i in ids}
        rev: dict[int, list[int]] = {i: [] for i in ids}
        for a in self.arcs:
            fwd[a.u].append(a.v)
            rev[a.v].append(a.u)

        def covers(adj):
            seen = {ids[0]}
            stack = [ids[0]]
            while stack:
                for nxt in adj[stack.pop()]:
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
            return len(seen) == len(ids)

        return covers(fwd) and covers(rev)


@dataclass(frozen=True)
class Building:
    footprint: tuple[tuple[float, float], ...]
    height: float


@dataclass(frozen=True)
class DeliverySet:
    targets: tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class QuadrotorParams:
    """Rigid-body constants of the simplified diagonal-inertia quadrotor."""

    mass: float = 2.0  # kg
    gravity: float = 9.81  # m/s^2
    inertia_xx: float = 0.02  # kg m^2, = inertia_yy
    inertia_zz: float = 0.04
    max_speed: float = 16.0  # m/s
    max_thrust: float = 60.0  # N, ~3x hover for a 2 kg frame


@dataclass(frozen=True)
class ParameterSet:
    """Every tunable of the simulation; defaults are recorded in result files."""

    truck_max_speed: float = 13.0  # m/s
    uav_max_speed: float = 16.0  # m/s
    uav_max_job_time: float = 480.0  # s
    unloading_time_truck: float = 30.0  # s
    unloading_time_uav: float = 10.0  # s
    takeoff_duration: float = 5.0  # s
    landing_duration: float = 5.0  # s
    docking_sense_range: float = 50.0  # m, truck slows inside this
    docking_range: float = 10.0  # m, docking maneuver starts inside this
    truck_accel: float = 2.0  # m/s^2
    truck_decel: float = 3.0  # m/s^2
    slow_factor: float = 0.5  # SLOW directive = this share of the limit
    dt: float = 0.01  # s, mobility integration step
    cruise_altitude: float = 45.0  # m AGL for drone legs
    truck_antenna_height: float = 1.5  # m
    enb_height: float = 30.0  # m, base station mast at the map centroid
    energy_thrust_coef: float = 2.0716  # W / N^1.5, ~180 W hover at 2 kg
    energy_drag_coef: float = 0.02  # W / (m/s)^3
    cam_size_bytes: int = 190
    cam_interval: float = 0.1  # s
    retransmit_interval: float = 0.2  # s, application-layer reliability
    quadrotor: QuadrotorParams = field(default_factory=QuadrotorParams)
    lte: LteModelParams = field(default_factory=LteModelParams)
    cv2x: Cv2xModelParams = field(default_factory=Cv2xModelParams)
    mean_building_height: float | None = None  # None = as authored

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(overrides: dict | None) -> "ParameterSet":
        return _merge_params(ParameterSet(), overrides or {})


def _merge_params(base, overrides: dict):
    """Apply a (possibly partial, possibly nested) override dict onto a dataclass."""
    kwargs = {}
    for f in dataclasses.fields(base):
        cur = getattr(base, f.name)
        if f.name in overrides:
            val = overrides[f.name]
            if dataclasses.is_dataclass(cur) and isinstance(val, dict):
                kwargs[f.name] = _merge_params(cur, val)
            else:
                kwargs[f.name] = val
        else:
            kwargs[f.name] = cur
    unknown = set(overrides) - {f.name for f in dataclasses.fields(base)}
    if unknown:
        raise ScenarioError(
            [f"params: unknown field '{k}' for {type(base).__name__}" for k in sorted(unknown)]
        )
    return type(base)(**kwargs)


@dataclass(frozen=True)
class Scenario:
    bounds: tuple[float, float, float]
    graph: RoadGraph
    buildings: tuple[Building, ...]
    depot: int
    delivery_sets: tuple[DeliverySet, ...]
    params: ParameterSet

    def mean_building_height(self) -> float:
        if not self.buildings:
            return 0.0
        return sum(b.height for b in self.buildings) / len(self.buildings)

    def enb_position(self) -> tuple[float, float, float]:
        return (self.bounds[0] / 2.0, self.bounds[1] / 2.0, self.params.enb_height)


# ---------------------------------------------------------------------------
# Validation


def validate_scenario(scn: Scenario) -> list[str]:
    """Re-check every structural invariant; returns human-readable issues."""
    issues = []
    ids = set(scn.graph.pos)
    if len(ids) != len(scn.graph.nodes):
        issues.append("nodes: duplicate node ids")
    for i, e in enumerate(scn.graph.edges):
        for end in (e.u, e.v):
            if end not in ids:
                issues.append(f"edges[{i}]: references missing node id {end}")
        if e.u in ids and e.v in ids:
            straight = geometry.dist2(scn.graph.pos[e.u], scn.graph.pos[e.v])
            if e.length < straight - 1e-6:
                issues.append(
                    f"edges[{i}]: length {e.length:.3f} m shorter than straight-line "
                    f"{straight:.3f} m"
                )
        if e.length <= 0:
            issues.append(f"edges[{i}]: non-positive length")
        if e.speed_limit <= 0:
            issues.append(f"edges[{i}]: non-positive speed limit")
    if not any(issues) and not scn.graph.is_strongly_connected():
        issues.append("graph: not strongly connected over drivable directions")
    for i, b in enumerate(scn.buildings):
        if b.height <= 0:
            issues.append(f"buildings[{i}]: non-positive height {b.height}")
        if len(b.footprint) < 3 or not geometry.polygon_is_simple(b.footprint):
            issues.append(f"buildings[{i}]: footprint is not a simple polygon")
    if scn.depot not in ids:
        issues.append(f"depot: node id {scn.depot} not in graph")
    for si, ds in enumerate(scn.delivery_sets):
        seen = set()
        for t in ds.targets:
            if t not in ids:
                issues.append(f"delivery_sets[{si}]: target {t} not in graph")
            if t == scn.depot:
                issues.append(f"delivery_sets[{si}]: target {t} equals the depot")
            if t in seen:
                issues.append(f"delivery_sets[{si}]: duplicate target {t}")
            seen.add(t)
    p = scn.params
    for name in (
        "uav_max_job_time",
        "unloading_time_truck",
        "unloading_time_uav",
        "takeoff_duration",
        "landing_duration",
    ):
        if getattr(p, name) < 0:
            issues.append(f"params.{name}: negative duration")
    for name in ("truck_max_speed", "uav_max_speed"):
        if getattr(p, name) <= 0:
            issues.append(f"params.{name}: speed must be positive")
    if any(c <= 0 for c in scn.bounds):
        issues.append("bounds: all extents must be positive")
    return issues


# ---------------------------------------------------------------------------
# Load / save


def _req(doc: dict, key: str, issues: list[str]):
    if key not in doc:
        issues.append(f"{key}: missing required field")
        return None
    return doc[key]


def loads_scenario(text: str, base_dir: str | None = None) -> Scenario:
    """Parse and fully validate a scenario document string."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"parse error at line {exc.lineno} col {exc.colno}: {exc.msg}"])
    if not isinstance(doc, dict):
        raise ScenarioError(["document: top level must be an object"])
    return scenario_from_dict(doc, base_dir=base_dir)


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return loads_scenario(text, base_dir=os.path.dirname(os.path.abspath(path)))


def scenario_from_dict(doc: dict, base_dir: str | None = None) -> Scenario:
    issues: list[str] = []
    version = doc.get("format_version")
    if version != SCHEMA_VERSION:
        issues.append(f"format_version: expected {SCHEMA_VERSION}, got {version!r}")

    if "map_file" in doc:
        map_path = doc["map_file"]
        if base_dir is not None:
            map_path = os.path.join(base_dir, map_path)
        if not os.path.exists(map_path):
            raise ScenarioError(issues + [f"map_file: referenced file '{doc['map_file']}' not found"])
        with open(map_path, "r", encoding="utf-8") as fh:
            try:
                mapdoc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ScenarioError(
                    issues + [f"map_file: parse error at line {exc.lineno}: {exc.msg}"]
                )
        doc = {**mapdoc, **{k: v for k, v in doc.items() if k != "map_file"}}

    bounds = doc.get("bounds", list(DEFAULT_BOUNDS))
    if not (isinstance(bounds, (list, tuple)) and len(bounds) == 3):
        issues.append("bounds: expected [x, y, z] extents")
        bounds = list(DEFAULT_BOUNDS)

    nodes = []
    for i, rec in enumerate(_req(doc, "nodes", issues) or []):
        try:
            nid, x, y = rec
            nodes.append(Node(int(nid), float(x), float(y)))
        except (TypeError, ValueError):
            issues.append(f"nodes[{i}]: expected [id, x, y]")
    edges = []
    for i, rec in enumerate(_req(doc, "edges", issues) or []):
        try:
            u, v, length, limit, bidir = rec
            edges.append(Edge(int(u), int(v), float(length), float(limit), bool(bidir)))
        except (TypeError, ValueError):
            issues.append(f"edges[{i}]: expected [u, v, length, speed_limit, bidirectional]")
    buildings = []
    for i, rec in enumerate(doc.get("buildings", [])):
        try:
            fp = tuple((float(x), float(y)) for x, y in rec["footprint"])
            buildings.append(Building(fp, float(rec["height"])))
        except (TypeError, ValueError, KeyError):
            issues.append(f"buildings[{i}]: expected {{footprint: [[x,y],...], height: h}}")
    dsets = []
    for i, rec in enumerate(doc.get("delivery_sets", [])):
        try:
            dsets.append(DeliverySet(tuple(int(t) for t in rec["targets"]), int(rec.get("seed", 0))))
        except (TypeError, ValueError, KeyError):
            issues.append(f"delivery_sets[{i}]: expected {{targets: [...], seed: s}}")
    depot = _req(doc, "depot", issues)
    try:
        params = ParameterSet.from_dict(doc.get("params"))
    except ScenarioError as exc:
        issues.extend(exc.issues)
        params = ParameterSet()
    if issues:
        raise ScenarioError(issues)

    scn = Scenario(
        bounds=(float(bounds[0]), float(bounds[1]), float(bounds[2])),
        graph=RoadGraph(nodes, edges),
        buildings=tuple(buildings),
        depot=int(depot),
        delivery_sets=tuple(dsets),
        params=params,
    )
    issues = validate_scenario(scn)
    if issues:
        raise ScenarioError(issues)
    return scn


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "format_version": SCHEMA_VERSION,
        "bounds": list(scn.bounds),
        "depot": scn.depot,
        "nodes": [[n.id, n.x, n.y] for n in scn.graph.nodes],
        "edges": [
            [e.u, e.v, e.length, e.speed_limit, e.bidirectional] for e in scn.graph.edges
        ],
        "buildings": [
            {"footprint": [list(p) for p in b.footprint], "height": b.height}
            for b in scn.buildings
        ],
        "delivery_sets": [
            {"targets": list(ds.targets), "seed": ds.seed} for ds in scn.delivery_sets
        ],
        "params": scn.params.to_dict(),
    }


def write_scenario(scn: Scenario) -> str:
    return json.dumps(scenario_to_dict(scn), indent=1)


def save_scenario(scn: Scenario, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(write_scenario(scn))


def scenarios_equal(a: Scenario, b: Scenario) -> bool:
    """Field-wise equality over the persisted representation."""
    return scenario_to_dict(a) == scenario_to_dict(b)


# ---------------------------------------------------------------------------
# Operations


def generate_delivery_sets(
    scn: Scenario, set_count: int, per_set: int, seed: int
) -> list[DeliverySet]:
    """Draw `set_count` delivery sets uniformly without replacement.

    Pure function of (graph node set, counts, seed): identical inputs give
    identical output, independent of process or platform.
    """
    candidates = sorted(i for i in scn.graph.pos if i != scn.depot)
    if per_set > len(candidates):
        raise ScenarioError(
            [f"per_set {per_set} exceeds the {len(candidates)} non-depot nodes"]
        )
    if set_count < 1:
        raise ScenarioError(["set_count must be >= 1"])
    out = []
    for k in range(set_count):
        rng = derive_rng("delivery-set", seed, k)
        out.append(DeliverySet(tuple(rng.sample(candidates, per_set)), seed))
    return out


def set_mean_building_height(scn: Scenario, mean: float) -> Scenario:
    """Rescale all heights multiplicatively so the arithmetic mean equals `mean`."""
    if not scn.buildings:
        raise ScenarioError(["cannot rescale: scenario has no buildings"])
    if mean <= 0:
        raise ScenarioError([f"mean building height must be positive, got {mean}"])
    current = scn.mean_building_height()
    scale = mean / current
    new_buildings = tuple(Building(b.footprint, b.height * scale) for b in scn.buildings)
    return dataclasses.replace(
        scn,
        buildings=new_buildings,
        params=dataclasses.replace(scn.params, mean_building_height=mean),
    )


# ---------------------------------------------------------------------------
# Synthetic scenario generation ("techpark" sample map)


def make_techpark_scenario(seed: int = 7) -> Scenario:
    """Deterministic stand-in for the paper's campus map.

    A jittered grid road network (>=100 nodes, a few one-way streets and
    dead-end stubs) with >=40 rectangular buildings whose mean height is
    exactly 20 m inside the default 3000 x 1500 x 250 m bounds.
    """
    rng = derive_rng("techpark", seed)
    cols, rows = 13, 8
    xs = [150.0 + i * (2700.0 / (cols - 1)) for i in range(cols)]
    ys = [150.0 + j * (1200.0 / (rows - 1)) for j in range(rows)]
    nodes = []
    grid = {}
    for j in range(rows):
        for i in range(cols):
            nid = j * cols + i
            x = xs[i] + rng.uniform(-22.0, 22.0)
            y = ys[j] + rng.uniform(-22.0, 22.0)
            grid[(i, j)] = nid
            nodes.append(Node(nid, round(x, 2), round(y, 2)))
    pos = {n.id: (n.x, n.y) for n in nodes}

    def edge(u, v, bidirectional=True, detour=1.0):
        length = geometry.dist2(pos[u], pos[v]) * detour
        limit = rng.choice([8.0, 10.0, 13.0])
        return Edge(u, v, math.ceil(length * 100.0) / 100.0, limit, bidirectional)

    candidates = []
    for j in range(rows):
        for i in range(cols):
            if i + 1 < cols:
                candidates.append((grid[(i, j)], grid[(i + 1, j)]))
            if j + 1 < rows:
                candidates.append((grid[(i, j)], grid[(i, j + 1)]))

    # Thin the full lattice while keeping it connected, then make a few
    # streets one-way (the reverse direction stays reachable via the lattice).
    keep = set(candidates)
    undirected: dict[int, set[int]] = {n.id: set() for n in nodes}
    for u, v in candidates:
        undirected[u].add(v)
        undirected[v].add(u)

    def connected_without(u, v):
        seen = {u}
        stack = [u]
        while stack:
            cur = stack.pop()
            for nxt in undirected[cur]:
                if cur == u and nxt == v:
                    continue
                if (cur, nxt) == (u, v) or (cur, nxt) == (v, u):
                    continue
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        return v in seen

    for u, v in rng.sample(candidates, len(candidates)):
        if rng.random() < 0.18 and connected_without(u, v):
            keep.discard((u, v))
            undirected[u].discard(v)
            undirected[v].discard(u)

    edges = []
    ordered = sorted(keep)
    for u, v in ordered:
        one_way = rng.random() < 0.05 and len(undirected[u]) > 2 and len(undirected[v]) > 2
        if one_way:
            edges.append(edge(u, v, bidirectional=False, detour=1.0))
        else:
            edges.append(edge(u, v, detour=rng.uniform(1.0, 1.08)))

    # Dead-end service stubs hanging off the lattice.
    next_id = rows * cols
    stub_hosts = rng.sample(sorted(grid.values()), 8)
    for host in stub_hosts:
        hx, hy = pos[host]
        sx = round(min(max(hx + rng.uniform(-70, 70), 20.0), 2980.0), 2)
        sy = round(min(max(hy + rng.uniform(-70, 70), 20.0), 1480.0), 2)
        nodes.append(Node(next_id, sx, sy))
        pos[next_id] = (sx, sy)
        length = max(geometry.dist2(pos[host], pos[next_id]), 10.0)
        edges.append(Edge(host, next_id, math.ceil(length * 100.0) / 100.0, 8.0, True))
        next_id += 1

    buildings = []
    for j in range(rows - 1):
        for i in range(cols - 1):
            if rng.random() > 0.62:
                continue
            x0 = min(xs[i], xs[i + 1]) + 45.0
            x1 = max(xs[i], xs[i + 1]) - 45.0
            y0 = min(ys[j], ys[j + 1]) + 40.0
            y1 = max(ys[j], ys[j + 1]) - 40.0
            w = rng.uniform(42.0, min(80.0, x1 - x0))
            h = rng.uniform(30.0, min(58.0, y1 - y0))
            cx = rng.uniform(x0 + w / 2, x1 - w / 2)
            cy = rng.uniform(y0 + h / 2, y1 - h / 2)
            fp = (
                (round(cx - w / 2, 2), round(cy - h / 2, 2)),
                (round(cx + w / 2, 2), round(cy - h / 2, 2)),
                (round(cx + w / 2, 2), round(cy + h / 2, 2)),
                (round(cx - w / 2, 2), round(cy + h / 2, 2)),
            )
            buildings.append(Building(fp, round(rng.uniform(8.0, 36.0), 2)))

    mean_h = sum(b.height for b in buildings) / len(buildings)
    buildings = [
        Building(b.footprint, round(b.height * (20.0 / mean_h), 4)) for b in buildings
    ]
    # Nudge the first building so the mean is exactly 20 after rounding.
    mean_h = sum(b.height for b in buildings) / len(buildings)
    buildings[0] = Building(
        buildings[0].footprint, round(buildings[0].height + (20.0 - mean_h) * len(buildings), 4)
    )

    depot = min(pos, key=lambda nid: geometry.dist2(pos[nid], (300.0, 750.0)))
    scn = Scenario(
        bounds=DEFAULT_BOUNDS,
        graph=RoadGraph(nodes, edges),
        buildings=tuple(buildings),
        depot=depot,
        delivery_sets=(),
        params=ParameterSet(),
    )
    problems = validate_scenario(scn)
    if problems:
        raise ScenarioError(["techpark generator produced an invalid map"] + problems)
    return scn


def bundled_scenario() -> Scenario:
    """The packaged techpark sample map."""
    from importlib.resources import files

    text = files("dronelift").joinpath("data/techpark.json").read_text("utf-8")
    return loads_scenario(text)
