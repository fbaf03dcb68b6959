"""Tandem delivery planning: turn a truck tour into a TSP-D plan.

The scheduler is the deliberately simple forward sweep the evaluation
relies on: targets are visited in tour order, and each one is handed to the
lowest-indexed drone that is projected idle when the truck is at the launch
point, provided the estimated job time fits the per-flight budget. Targets
that stay with the truck keep their original relative order.

Anchor placement differs per mode. On-site jobs launch at the nearest
preceding retained stop and regroup at the nearest following one. En-route
jobs launch at the point of the connecting leg closest to the target and
regroup at the truck's estimated position when the drone returns, resolved
by fixed-point iteration on an estimated time-distance profile.

Assignments whose final anchors break the flight-time budget are revoked
(the target returns to the truck) and anchoring repeats until stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import dist3
from .mobility import ExpandedRoute
from .routing import CostMatrix, Tour
from .scenario import ParameterSet

MODE_TRUCK_ONLY = "truck"
MODE_ONSITE = "onsite"
MODE_ENROUTE = "enroute"
MODES = (MODE_TRUCK_ONLY, MODE_ONSITE, MODE_ENROUTE)

ANCHOR_STOP = "stop"
ANCHOR_ROUTE = "route"


@dataclass(frozen=True)
class Anchor:
    kind: str  # ANCHOR_STOP or ANCHOR_ROUTE
    s: float  # position along the plan's expanded truck route
    position: tuple[float, float]
    node: int | None = None  # set for stop anchors


@dataclass(frozen=True)
class DroneJob:
    target_node: int
    target_index: int  # matrix index
    drone: int
    launch: Anchor
    recovery: Anchor
    est_flight_time: float


@dataclass(frozen=True)
class DeliveryPlan:
    mode: str
    truck_stops: tuple[int, ...]  # node ids, tour order preserved
    jobs: tuple[DroneJob, ...]
    route: ExpandedRoute  # expanded gate sequence depot -> stops -> depot
    stops_s: tuple[tuple[float, int], ...]  # (s, node) per delivery stop
    est_completion: float

    def target_partition_ok(self, all_targets) -> bool:
        flown = {j.target_node for j in self.jobs}
        stops = set(self.truck_stops)
        return flown | stops == set(all_targets) and not (flown & stops)


def estimate_drone_job_time(launch_pos, target_pos, recovery_pos,
                            params: ParameterSet) -> float:
    """Fixed overheads plus straight-line legs at the drone's top speed."""
    v = params.uav_max_speed
    return (
        params.takeoff_duration
        + dist3(launch_pos, target_pos) / v
        + params.unloading_time_uav
        + dist3(target_pos, recovery_pos) / v
        + params.landing_duration
    )


def _leg_seconds(route, vmax) -> float:
    return sum(a.length / min(vmax, a.speed_limit) for a in route.arcs)


def _p3(pos, node) -> tuple[float, float, float]:
    x, y = pos[node]
    return (x, y, 0.0)


class _Sweep:
    """Greedy forward assignment over the tour (shared by both drone modes)."""

    def __init__(self, tour: Tour, matrix: CostMatrix, drone_count: int,
                 params: ParameterSet, pos):
        self.tour = tour
        self.matrix = matrix
        self.params = params
        self.pos = pos
        self.drone_count = drone_count

    def run(self, forced_truck: set[int]) -> tuple[list[int], list[tuple[int, int, int]]]:
        """Returns (retained matrix indices incl. leading 0, assignments).

        Each assignment is (target_index, drone, launch_stop_index).
        `forced_truck` pins revoked targets to the truck.
        """
        p = self.params
        ids = self.matrix.node_ids
        avail = [0.0] * self.drone_count
        retained = [0]
        t_depart = 0.0  # projected departure time from retained[-1]
        assignments: list[tuple[int, int, int]] = []
        order = list(self.tour.order)
        for k, tk in enumerate(order):
            launch_idx = retained[-1]
            nxt = order[k + 1] if k + 1 < len(order) else 0
            est = estimate_drone_job_time(
                _p3(self.pos, ids[launch_idx]), _p3(self.pos, ids[tk]),
                _p3(self.pos, ids[nxt]), p,
            )
            drone = None
            if tk not in forced_truck and est <= p.uav_max_job_time:
                for d in range(self.drone_count):
                    if avail[d] <= t_depart:
                        drone = d
                        break
            if drone is not None:
                assignments.append((tk, drone, launch_idx))
                avail[drone] = t_depart + est
                t_depart += p.takeoff_duration  # truck holds for the launch
            else:
                leg = self.matrix.routes[(retained[-1], tk)]
                t_depart += _leg_seconds(leg, p.truck_max_speed) + p.unloading_time_truck
                retained.append(tk)
        return retained, assignments


def _build_route(matrix: CostMatrix, retained: list[int], pos) -> tuple[ExpandedRoute, list[tuple[float, int]], list[float]]:
    """Expanded route over the retained sequence plus the closing depot leg.

    Returns (route, [(s, node) per delivery stop], leg start s per retained
    index position).
    """
    arcs = []
    stops_s: list[tuple[float, int]] = []
    leg_start_s = [0.0]
    s = 0.0
    seq = retained + [0]
    for a, b in zip(seq, seq[1:]):
        leg = matrix.routes[(a, b)]
        arcs.extend(leg.arcs)
        s += leg.cost
        if b != 0:
            stops_s.append((s, matrix.node_ids[b]))
        leg_start_s.append(s)
    route = ExpandedRoute(arcs, pos)
    return route, stops_s, leg_start_s


def _closest_s_on_span(route: ExpandedRoute, s_lo: float, s_hi: float,
                       point) -> float:
    """Position s in [s_lo, s_hi] whose route point is closest to `point`."""
    best_s, best_d = s_lo, float("inf")
    px, py = point
    for i, _arc in enumerate(route.arcs):
        a0, a1 = route.cum[i], route.cum[i + 1]
        lo, hi = max(a0, s_lo), min(a1, s_hi)
        if hi <= lo:
            continue
        x1, y1 = route.position_at(lo)
        x2, y2 = route.position_at(hi)
        dx, dy = x2 - x1, y2 - y1
        seg2 = dx * dx + dy * dy
        u = 0.0 if seg2 < 1e-12 else max(0.0, min(1.0, ((px - x1) * dx + (py - y1) * dy) / seg2))
        cand_s = lo + u * (hi - lo)
        cx, cy = x1 + u * dx, y1 + u * dy
        d = math.hypot(px - cx, py - cy)
        if d < best_d - 1e-12:
            best_d, best_s = d, cand_s
    return best_s


class _Profile:
    """Estimated forward time-distance profile with dwell breakpoints."""

    def __init__(self, route: ExpandedRoute, vmax: float,
                 dwells: list[tuple[float, float]]):
        # dwells: (s, duration), sorted by s; motion at per-arc limit speeds
        self.route = route
        self.vmax = vmax
        self.breaks: list[tuple[float, float, float]] = []  # (s, t_arrive, t_depart)
        t = 0.0
        s = 0.0
        for ds, dur in sorted(dwells, key=lambda e: e[0]):
            t += self._travel(s, ds)
            self.breaks.append((ds, t, t + dur))
            t += dur
            s = ds
        self.t_end = t + self._travel(s, route.total)
        self.breaks.append((route.total, self.t_end, self.t_end))

    def _travel(self, s0: float, s1: float) -> float:
        r = self.route
        t = 0.0
        s = s0
        while s < s1 - 1e-9:
            i = r.arc_index_at(min(s, r.total - 1e-9))
            seg_end = min(r.cum[i + 1], s1)
            t += (seg_end - s) / min(self.vmax, r.limit[i])
            s = seg_end
        return t

    def s_at_time(self, t: float) -> float:
        cur_s, cur_t = 0.0, 0.0
        for bs, ta, td in self.breaks:
            travel = ta - cur_t
            if t <= ta:
                frac = 0.0 if travel <= 0 else (t - cur_t) / travel
                return self._advance(cur_s, bs, frac)
            if t <= td:
                return bs
            cur_s, cur_t = bs, td
        return self.route.total

    def _advance(self, s0: float, s1: float, frac: float) -> float:
        # uniform-speed interpolation is adequate between breakpoints
        return s0 + (s1 - s0) * frac


def build_plan(tour: Tour, matrix: CostMatrix, mode: str, drone_count: int,
               params: ParameterSet, pos) -> DeliveryPlan:
    """Assemble the delivery plan for one episode.

    `pos` maps node id to (x, y). Drone-count zero or the truck-only mode
    yields the plain tour; a zero flight-time budget degenerates the same
    way rather than erroring.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if drone_count < 0:
        raise ValueError("drone_count must be >= 0")
    ids = matrix.node_ids
    effective_drones = 0 if mode == MODE_TRUCK_ONLY else drone_count

    forced_truck: set[int] = set()
    sweep = _Sweep(tour, matrix, effective_drones, params, pos)
    for _ in range(len(tour.order) + 1):
        retained, assignments = sweep.run(forced_truck)
        route, stops_s, leg_start = _build_route(matrix, retained, pos)
        if mode == MODE_ENROUTE and assignments:
            jobs, violations = _anchor_enroute(
                tour, matrix, retained, assignments, route, leg_start, params, pos
            )
        else:
            jobs, violations = _anchor_onsite(
                tour, matrix, retained, assignments, route, leg_start, params, pos
            )
        if not violations:
            break
        forced_truck |= violations
    else:
        raise RuntimeError("anchor revocation failed to stabilize")

    dwells = [(s, params.unloading_time_truck) for s, _ in stops_s]
    for j in jobs:
        dwells.append((j.launch.s, params.takeoff_duration))
    profile = _Profile(route, params.truck_max_speed, dwells)
    est_completion = profile.t_end
    for j in jobs:
        est_completion = max(est_completion, _launch_time(profile, j) + j.est_flight_time)

    return DeliveryPlan(
        mode=mode,
        truck_stops=tuple(ids[i] for i in retained[1:]),
        jobs=tuple(jobs),
        route=route,
        stops_s=tuple(stops_s),
        est_completion=est_completion,
    )


def _launch_time(profile: _Profile, job: DroneJob) -> float:
    for bs, ta, td in profile.breaks:
        if abs(bs - job.launch.s) < 1e-6:
            return ta
    return 0.0


def _anchor_onsite(tour, matrix, retained, assignments, route, leg_start,
                   params, pos):
    """Stop anchors: nearest preceding / following retained tour stops."""
    ids = matrix.node_ids
    order = list(tour.order)
    tour_pos = {t: i for i, t in enumerate(order)}
    retained_order = [t for t in order if t in set(retained)]
    jobs = []
    violations: set[int] = set()
    for target, drone, _launch_hint in assignments:
        prev_stop, next_stop = 0, 0
        for r in retained_order:
            if tour_pos[r] < tour_pos[target]:
                prev_stop = r
            elif tour_pos[r] > tour_pos[target]:
                next_stop = r
                break
        launch = _stop_anchor(matrix, retained, leg_start, prev_stop, pos)
        recovery = _stop_anchor(matrix, retained, leg_start, next_stop, pos, closing=True)
        est = estimate_drone_job_time(
            (*launch.position, 0.0), _p3(pos, ids[target]), (*recovery.position, 0.0), params
        )
        if est > params.uav_max_job_time:
            violations.add(target)
            continue
        jobs.append(DroneJob(ids[target], target, drone, launch, recovery, est))
    return jobs, violations


def _stop_anchor(matrix, retained, leg_start, stop_idx, pos, closing=False) -> Anchor:
    ids = matrix.node_ids
    if stop_idx == 0 and closing:
        s = leg_start[len(retained)]  # route end at the closing depot visit
    else:
        s = leg_start[retained.index(stop_idx)]
    x, y = pos[ids[stop_idx]]
    return Anchor(ANCHOR_STOP, s, (x, y), node=ids[stop_idx])


def _anchor_enroute(tour, matrix, retained, assignments, route, leg_start,
                    params, pos):
    """Route anchors: closest leg point for launch, fixed-point recovery."""
    ids = matrix.node_ids
    if not route.arcs:
        # every target flies; anchors degenerate to the depot itself
        return _anchor_onsite(tour, matrix, retained, assignments, route,
                              leg_start, params, pos)
    order = list(tour.order)
    tour_pos = {t: i for i, t in enumerate(order)}
    jobs = []
    violations: set[int] = set()

    # Profile without recovery holds: legs + delivery dwells + launch holds,
    # filled in launch order so later fixed points see earlier holds.
    dwells = [(leg_start[i], params.unloading_time_truck)
              for i in range(1, len(retained))]
    pending = []
    for target, drone, _hint in assignments:
        # span of the leg that passes the target's tour position
        prev_i = 0
        for i, r in enumerate(retained):
            if i == 0:
                continue
            if tour_pos[r] < tour_pos[target]:
                prev_i = i
        s_lo = leg_start[prev_i]
        s_hi = leg_start[prev_i + 1]
        s_launch = _closest_s_on_span(route, s_lo, s_hi, pos[ids[target]])
        pending.append((s_launch, target, drone))
    pending.sort()

    avail = {}
    for s_launch, target, drone in pending:
        dwells_sorted = sorted(dwells)
        profile = _Profile(route, params.truck_max_speed, dwells_sorted)
        t_launch = None
        # launch when the truck passes s_launch, or when the drone frees up
        t_pass = profile_time_at_s(profile, s_launch)
        t_launch = max(t_pass, avail.get(drone, 0.0))
        s_eff = max(s_launch, profile.s_at_time(t_launch))
        launch_xy = route.position_at(s_eff)
        launch = Anchor(ANCHOR_ROUTE, s_eff, launch_xy)
        dwells.append((s_eff, params.takeoff_duration))
        profile = _Profile(route, params.truck_max_speed, sorted(dwells))
        t_launch = profile_time_at_s(profile, s_eff)

        target_p = _p3(pos, ids[target])
        s_rec = s_eff
        est = None
        for _ in range(20):
            rec_xy = route.position_at(s_rec)
            est = estimate_drone_job_time((*launch_xy, 0.0), target_p, (*rec_xy, 0.0), params)
            s_new = max(profile.s_at_time(t_launch + est), s_eff)
            if abs(s_new - s_rec) <= 1.0:
                s_rec = s_new
                break
            s_rec = s_new
        rec_xy = route.position_at(s_rec)
        est = estimate_drone_job_time((*launch_xy, 0.0), target_p, (*rec_xy, 0.0), params)
        if est > params.uav_max_job_time:
            violations.add(target)
            dwells.pop()
            continue
        recovery = Anchor(ANCHOR_ROUTE, s_rec, rec_xy)
        avail[drone] = t_launch + est
        jobs.append(DroneJob(ids[target], target, drone, launch, recovery, est))
    return jobs, violations


def profile_time_at_s(profile: _Profile, s: float) -> float:
    cur_s, cur_t = 0.0, 0.0
    for bs, ta, td in profile.breaks:
        if s <= bs + 1e-9:
            travel = ta - cur_t
            span = bs - cur_s
            if span <= 1e-12:
                return ta
            return cur_t + travel * (s - cur_s) / span
        cur_s, cur_t = bs, td
    return profile.t_end


# ---------------------------------------------------------------------------
# Gantt extraction


@dataclass(frozen=True)
class GanttChart:
    spans: dict  # agent -> list of (label, start, end)


def gantt_from_trace(events, completion_time: float | None = None) -> GanttChart:
    """Collapse state-entry events into per-agent activity spans.

    `events` yields (time, agent, state) in any agent interleaving but
    non-decreasing time per agent; the final span of each agent closes at
    `completion_time` (defaults to the last event time seen).
    """
    per_agent: dict = {}
    t_last = 0.0
    for time_, agent, state in events:
        lst = per_agent.setdefault(agent, [])
        if lst and time_ < lst[-1][0] - 1e-12:
            raise ValueError(f"trace for {agent} is not time-ordered at t={time_}")
        lst.append((time_, state))
        t_last = max(t_last, time_)
    end = completion_time if completion_time is not None else t_last
    spans: dict = {}
    for agent, entries in per_agent.items():
        out = []
        for (t0, state), (t1, _nxt) in zip(entries, entries[1:]):
            if t1 > t0:
                out.append((state, t0, t1))
            elif t1 < t0:
                raise ValueError(f"trace for {agent} is not time-ordered")
            else:
                out.append((state, t0, t1))
        if entries:
            out.append((entries[-1][1], entries[-1][0], end))
        # merge zero-length and repeated-state spans
        merged = []
        for label, a, b in out:
            if merged and merged[-1][0] == label and abs(merged[-1][2] - a) < 1e-12:
                merged[-1] = (label, merged[-1][1], b)
            elif b > a:
                merged.append((label, a, b))
        spans[agent] = [tuple(m) for m in merged]
    return GanttChart(spans=spans)
