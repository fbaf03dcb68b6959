"""Deterministic discrete-event episode execution.

One episode = plan construction (routing + tandem scheduling) followed by a
single-threaded event loop that interleaves fixed-step mobility (10 ms) with
asynchronous events (protocol timers, message deliveries, retransmissions)
drawn from a (time, sequence) ordered queue. Identical inputs and seed give
bit-identical results.

Physical safety interlocks (the truck cannot roll while a drone is mid
docking maneuver) are enforced here on top of the protocol directives, and
the application-layer reliability for protocol messages (200 ms
retransmission until the expected reaction is observable) also lives here;
the state machines themselves stay pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from heapq import heappush, heappop

from . import protocol as P
from .mobility import (
    GO, STOP,
    PHASE_CRUISE, PHASE_HOVER, PHASE_LAND, PHASE_VERTICAL,
    AgentView, ExpandedRoute, TruckState, autopilot_step, predict_position,
    state_to_vector, step_truck, QuadrotorState,
)
from .netsim import (
    BuildingsIndex, CamMessage, Cv2xLink, LteLink, TransmissionRecord, path_loss,
)
from .planner import (
    ANCHOR_ROUTE, MODE_ONSITE, MODE_TRUCK_ONLY, MODES, DeliveryPlan, build_plan,
)
from .routing import CostMatrix, Tour, cost_matrix, solve_tsp_lk
from .scenario import Scenario
from .seeding import derive_rng

TECH_NONE = "none"
TECH_LTE = "lte"
TECH_CV2X = "cv2x"
TECHNOLOGIES = (TECH_NONE, TECH_LTE, TECH_CV2X)

_TARGET_RADIUS = 3.0  # m, horizontal arrival detection
_DOCK_SNAP_XY = 4.0  # m, tolerances for finishing the docking maneuver
_DOCK_SNAP_Z = 3.5
_DOCK_TIMEOUT = 30.0
_DECK_HEIGHT = 2.0
_APPROACH_ALT = 10.0

# anchor processing order at equal route position
_ANCHOR_ORDER = {"stop": 0, "launch": 1, "hold": 2, "end": 3}


@dataclass(frozen=True)
class EpisodeConfig:
    mode: str
    drone_count: int
    technology: str = TECH_NONE
    seed: int = 0
    prediction: bool = False
    message_loss: float = 0.0  # forced app-layer loss for protocol messages
    comm_window: float | None = None  # CAM metric collection cutoff (s)
    keep_traces: bool = True
    keep_records: bool = True
    trace_interval: float = 1.0


@dataclass
class EpisodeResult:
    config: EpisodeConfig
    completion_time: float
    aborted: bool
    abort_reason: str | None
    delivered: int
    n_targets: int
    truck_end_time: float
    last_dock_time: float
    drone_energy: list[float]
    drone_jobs: list[int]
    energy_by_phase: dict
    violations: int
    protocol_log: list
    state_trace: list
    mobility_trace: list
    cam_records: list
    cam_generated: int
    cam_delivered: int
    cam_lost_sinr: int
    cam_lost_collision: int
    cam_delay_mean: float
    cam_delay_p50: float
    cam_delay_p95: float
    msgs_sent: int
    msgs_lost: int
    msgs_retransmitted: int
    plan: DeliveryPlan

    @property
    def drones_used(self) -> int:
        return sum(1 for j in self.drone_jobs if j > 0)

    @property
    def total_drone_energy(self) -> float:
        return sum(self.drone_energy)

    def mean_energy_per_drone(self) -> float:
        if not self.drone_energy:
            return 0.0
        return self.total_drone_energy / len(self.drone_energy)

    def mean_energy_per_used_drone(self) -> float:
        used = self.drones_used
        if used == 0:
            return 0.0
        return self.total_drone_energy / used


_PHYS_TO_CTRL = {
    "takeoff": PHASE_VERTICAL,
    "cruise": PHASE_CRUISE,
    "hover": PHASE_HOVER,
    "return": PHASE_CRUISE,
    "dock": PHASE_LAND,
}
_PHYS_TO_ENERGY = {
    "takeoff": "takeoff",
    "cruise": "cruise",
    "hover": "hover",
    "return": "cruise",
    "dock": "landing",
}


class _Drone:
    __slots__ = (
        "idx", "vec", "proto", "phys", "ctrl_phase", "job", "waypoint",
        "cam_phase_tick", "active_since", "sensed", "dock_started_t",
        "dock_timer_done", "energy_prev", "phase_e0", "by_phase",
        "jobs_flown", "guide_refresh", "seen",
    )

    def __init__(self, idx: int):
        self.idx = idx
        self.vec = None  # np state vector while flying
        self.proto = P.DroneProtocolState()
        self.phys = "docked"  # docked|takeoff|cruise|hover|return|dock
        self.ctrl_phase = PHASE_CRUISE
        self.job = None
        self.waypoint = (0.0, 0.0, 0.0)
        self.cam_phase_tick = None
        self.active_since = None
        self.sensed = False
        self.dock_started_t = None
        self.dock_timer_done = False
        self.energy_prev = 0.0
        self.phase_e0 = 0.0
        self.by_phase = {}
        self.jobs_flown = 0
        self.guide_refresh = 0.0
        self.seen: set = set()

    def set_phys(self, phys: str):
        """Switch physical phase, booking the finished phase's energy."""
        if self.vec is not None:
            label = _PHYS_TO_ENERGY.get(self.phys)
            if label is not None:
                delta = self.vec[12] - self.phase_e0
                if delta:
                    self.by_phase[label] = self.by_phase.get(label, 0.0) + delta
                self.phase_e0 = self.vec[12]
        self.phys = phys
        self.ctrl_phase = _PHYS_TO_CTRL.get(phys, PHASE_CRUISE)


def estimate_truck_only_time(plan_or_route, scenario: Scenario, n_stops: int) -> float:
    route = plan_or_route if isinstance(plan_or_route, ExpandedRoute) else plan_or_route.route
    p = scenario.params
    drive = sum(a.length / min(p.truck_max_speed, a.speed_limit) for a in route.arcs)
    return drive + n_stops * p.unloading_time_truck


class _Simulation:
    def __init__(self, scenario: Scenario, plan: DeliveryPlan, cfg: EpisodeConfig,
                 time_cap: float):
        self.scn = scenario
        self.plan = plan
        self.cfg = cfg
        self.p = scenario.params
        self.dt = self.p.dt
        self.time_cap = time_cap
        self.t = 0.0
        self.tick = 0
        self.seq = 0
        self.heap: list = []

        self.truck = TruckState(route=plan.route)
        self.truck_proto = P.TruckProtocolState()
        self.truck_directive = GO
        self.truck_pos = self._truck_position()
        self.truck_seen: set = set()
        self.current_stop_node: int | None = None

        self.anchors = self._build_anchors()
        self.anchor_idx = 0
        self.truck_end_time = None

        self.drones = [_Drone(i) for i in range(cfg.drone_count)]
        self.flying: list[_Drone] = []
        self.job_recovered = [False] * len(plan.jobs)
        self.job_launched = [False] * len(plan.jobs)
        self.active_dock: int | None = None  # drone mid-maneuver
        self.deferred_launch: int | None = None  # LAUNCH waiting for its drone

        self.targets = set()
        for s, node in plan.stops_s:
            self.targets.add(node)
        for j in plan.jobs:
            self.targets.add(j.target_node)
        self.delivered: set = set()
        self.last_dock_time = 0.0

        self.violations = 0
        self.protocol_log: list = []
        self.state_trace: list = []
        self.mobility_trace: list = []
        self._trace_next = 0.0

        self.buildings = BuildingsIndex(scenario.buildings)
        self.enb = scenario.enb_position()
        self.rng_net = derive_rng(cfg.seed, "net")
        self.rng_loss = derive_rng(cfg.seed, "loss")
        self.lte = LteLink(self.buildings, self.enb, self.p.lte, self.rng_net)
        self.cv2x = Cv2xLink(self.buildings, self.p.cv2x, self.rng_net)
        self.cam_records: list[TransmissionRecord] = []
        self.cam_counts = [0, 0, 0, 0]  # gen, delivered, sinr, coll
        self.cam_delays: list[float] = []
        self.msgs_sent = 0
        self.msgs_lost = 0
        self.msgs_retx = 0
        self.cam_period_ticks = max(1, round(self.p.cam_interval / self.dt))

        self.aborted = False
        self.abort_reason = None

        self._log_state(0.0, "truck", self.truck_proto.state)
        for d in self.drones:
            self._log_state(0.0, f"drone{d.idx}", d.proto.state)

    # -- plumbing ----------------------------------------------------------

    def _truck_position(self):
        if self.plan.route.arcs:
            x, y = self.truck.position()
        else:
            x, y = self.scn.graph.pos[self.scn.depot]
        return (x, y)

    def _schedule(self, t: float, kind: str, payload):
        self.seq += 1
        heappush(self.heap, (t, self.seq, kind, payload))

    def _log_state(self, t, agent, state):
        self.state_trace.append((t, agent, state))

    def _log_proto(self, t, agent, old, event, new, msg=""):
        self.protocol_log.append((t, agent, old, event, new, msg))

    def _build_anchors(self):
        plan = self.plan
        anchors = []
        stop_jobs: dict[float, list[int]] = {}
        launch_groups: dict[float, list[int]] = {}
        for ji, job in enumerate(plan.jobs):
            if job.launch.kind == ANCHOR_ROUTE:
                launch_groups.setdefault(round(job.launch.s, 6), []).append(ji)
            else:
                stop_jobs.setdefault(round(job.launch.s, 6), []).append(ji)
        for s, node in plan.stops_s:
            anchors.append((s, "stop", node, tuple(stop_jobs.pop(round(s, 6), ()))))
        for s_key, jobs in sorted(stop_jobs.items()):
            # launch stop-anchors not coinciding with a delivery stop (depot)
            anchors.append((s_key, "launch", None, tuple(jobs)))
        for s_key, jobs in sorted(launch_groups.items()):
            anchors.append((s_key, "launch", None, tuple(jobs)))
        if plan.mode != MODE_TRUCK_ONLY:
            for ji, job in enumerate(plan.jobs):
                if job.recovery.kind == ANCHOR_ROUTE:
                    anchors.append((min(job.recovery.s, plan.route.total), "hold", None, (ji,)))
        anchors.append((plan.route.total, "end", None, ()))
        anchors.sort(key=lambda a: (a[0], _ANCHOR_ORDER[a[1]], a[3]))
        return anchors

    # -- protocol dispatch --------------------------------------------------

    def _truck_event(self, ev: P.Event, note=""):
        old = self.truck_proto.state
        res = P.truck_transition(self.truck_proto, ev, self.p)
        if res.violation:
            self.violations += 1
            self._log_proto(self.t, "truck", old, ev.kind, old, "VIOLATION")
            return
        self.truck_proto = res.state
        if res.directive is not None:
            self.truck_directive = res.directive
        if res.arm_timer is not None:
            self._schedule(self.t + res.arm_timer, "truck-timer", None)
        for kind, job in res.emits:
            drone = self.drones[self.plan.jobs[job].drone]
            if kind == P.LAUNCH and drone.vec is not None:
                # target drone still airborne from its previous job; the
                # truck waits in LAUNCHING until it has docked
                self.deferred_launch = job
            else:
                self._send_message(kind, "truck", f"drone{drone.idx}", job)
        if res.state.state != old:
            self._log_state(self.t, "truck", res.state.state)
        self._log_proto(self.t, "truck", old, note or ev.kind, res.state.state,
                        ",".join(k for k, _ in res.emits))

    def _drone_event(self, d: _Drone, ev: P.Event):
        old = d.proto.state
        res = P.drone_transition(d.proto, ev, self.p)
        if res.violation:
            self.violations += 1
            self._log_proto(self.t, f"drone{d.idx}", old, ev.kind, old, "VIOLATION")
            return
        d.proto = res.state
        if res.arm_timer is not None:
            self._schedule(self.t + res.arm_timer, "drone-timer", d.idx)
        for kind, job in res.emits:
            self._send_message(kind, f"drone{d.idx}", "truck", job)
        if res.state.state != old:
            self._log_state(self.t, f"drone{d.idx}", res.state.state)
        self._log_proto(self.t, f"drone{d.idx}", old, ev.kind, res.state.state,
                        ",".join(k for k, _ in res.emits))
        self._after_drone_transition(d, old, res.state.state)

    # -- messaging ----------------------------------------------------------

    def _agent_radio_pos(self, agent: str):
        if agent == "truck":
            x, y = self.truck_pos
            return (x, y, self.p.truck_antenna_height)
        d = self.drones[int(agent[5:])]
        if d.vec is None:
            x, y = self.truck_pos
            return (x, y, self.p.truck_antenna_height)
        return (d.vec[0], d.vec[1], max(d.vec[2], 0.5))

    def _send_message(self, kind: str, sender: str, receiver: str, job: int,
                      is_retx: bool = False):
        msg = P.ProtocolMessage(kind, sender, receiver, self.t, job)
        self.msgs_sent += 1
        if is_retx:
            self.msgs_retx += 1
        delay = self._evaluate_protocol_transport(sender, receiver)
        if delay is None:
            self.msgs_lost += 1
        else:
            self._schedule(self.t + delay, "deliver", msg)
        self._schedule(self.t + self.p.retransmit_interval, "retx", msg)

    def _evaluate_protocol_transport(self, sender: str, receiver: str):
        """Delay in seconds, or None when the transmission is lost."""
        if self.cfg.message_loss > 0.0 and self.rng_loss.random() < self.cfg.message_loss:
            return None
        tech = self.cfg.technology
        if tech == TECH_NONE:
            return 0.001
        for agent in (sender, receiver):
            if agent != "truck" and self.drones[int(agent[5:])].vec is None:
                return 0.001  # docked drones talk over the docking interface
        tx = self._agent_radio_pos(sender)
        rx = self._agent_radio_pos(receiver)
        if tech == TECH_LTE:
            lp = self.p.lte
            ch = lp.channel
            up = ch.tx_power_ue_dbm - path_loss(tx, self.enb, self.buildings, ch)
            down = ch.tx_power_enb_dbm - path_loss(self.enb, rx, self.buildings, ch)
            # control traffic rides the most robust modulation
            if min(up, down) - ch.noise_floor_dbm < ch.sinr_threshold_db - lp.control_margin_db:
                return None
            return (self.rng_net.randint(lp.grant_wait_min_ms, lp.grant_wait_max_ms)
                    + 2 * lp.hop_ms) / 1000.0
        ch = self.p.cv2x.channel
        rx_db = ch.tx_power_ue_dbm - path_loss(tx, rx, self.buildings, ch)
        if rx_db - ch.noise_floor_dbm < ch.sinr_threshold_db - 6.0:
            return None
        return (self.p.cv2x.processing_ms + 2.0) / 1000.0

    def _retx_pending(self, msg: P.ProtocolMessage) -> bool:
        """Should this message still be retransmitted?

        The reliability layer keeps resending every 200 ms until the
        transport acknowledges end-to-end delivery, or until the message is
        moot (a docking request once the maneuver is underway).
        """
        job = msg.job
        if msg.kind == P.LAUNCH:
            d = self.drones[self.plan.jobs[job].drone]
            return ((P.LAUNCH, job) not in d.seen
                    and self.truck_proto.state == P.T_LAUNCHING
                    and self.truck_proto.launching_job == job)
        if (msg.kind, job) in self.truck_seen:
            return False
        d = self.drones[self.plan.jobs[job].drone]
        if msg.kind == P.DOCKING_REQUEST:
            return (d.proto.state == P.D_RETURNING and d.proto.job == job
                    and d.dock_started_t is None)
        return True

    def _deliver_message(self, msg: P.ProtocolMessage):
        key = (msg.kind, msg.job)
        if msg.kind in (P.DOCKING_REQUEST, P.LAUNCH_COMPLETE) and self.job_recovered[msg.job]:
            return  # stale straggler from a finished job
        if msg.receiver == "truck":
            if key in self.truck_seen:
                return
            self.truck_seen.add(key)
            drone_idx = self.plan.jobs[msg.job].drone
            self._truck_event(P.Event(P.EV_MSG, msg_kind=msg.kind, job=msg.job,
                                      drone=drone_idx))
            if msg.kind == P.DOCKING_COMPLETE:
                self._maybe_release_hold()
        else:
            d = self.drones[int(msg.receiver[5:])]
            if key in d.seen:
                return
            d.seen.add(key)
            self._drone_event(d, P.Event(P.EV_MSG, msg_kind=msg.kind, job=msg.job))

    # -- drone physical lifecycle -------------------------------------------

    def _after_drone_transition(self, d: _Drone, old: str, new: str):
        p = self.p
        if new == P.D_LOADING and old == P.D_DOCKED:
            d.job = d.proto.job
            self.job_launched[d.job] = True
            x, y = self.truck_pos
            d.vec = state_to_vector(
                QuadrotorState(position=(x, y, _DECK_HEIGHT)), energy=d.energy_prev
            )
            d.phase_e0 = d.energy_prev
            d.set_phys("takeoff")
            self.flying.append(d)
            d.waypoint = (x, y, p.cruise_altitude)
            d.sensed = False
            d.dock_started_t = None
            d.dock_timer_done = False
            d.jobs_flown += 1
            if d.active_since is None:
                d.active_since = self.t
                d.cam_phase_tick = self.tick
        elif new == P.D_DELIVERING:
            job = self.plan.jobs[d.job]
            tx, ty = self.scn.graph.pos[job.target_node]
            d.set_phys("cruise")
            d.waypoint = (tx, ty, p.cruise_altitude)
        elif new == P.D_UNLOADING:
            d.set_phys("hover")
        elif new == P.D_RETURNING:
            d.set_phys("return")
            d.guide_refresh = 0.0
        elif new == P.D_DOCKED:
            if self.active_dock == d.idx:
                self.active_dock = None
            self.job_recovered[d.job] = True
            self.last_dock_time = self.t
            d.set_phys("docked")  # flushes the landing-phase energy
            self.flying.remove(d)
            d.sensed = False
            d.energy_prev = d.vec[12]
            d.vec = None
            d.job = None
            self._truck_event(P.Event(P.EV_DOCKING_ENDED, drone=d.idx))
            if (self.deferred_launch is not None
                    and self.plan.jobs[self.deferred_launch].drone == d.idx):
                job = self.deferred_launch
                self.deferred_launch = None
                self._send_message(P.LAUNCH, "truck", f"drone{d.idx}", job)
            self._maybe_release_hold()

    def _maybe_release_hold(self):
        """Unblock a truck waiting at a recovery anchor once its job is home."""
        if self.anchor_idx >= len(self.anchors):
            return
        s, kind, _node, jobs = self.anchors[self.anchor_idx]
        if kind != "hold" or not all(self.job_recovered[j] for j in jobs):
            return
        at_anchor = (not self.plan.route.arcs) or self.truck.s >= s - 1e-9
        if at_anchor:
            self.anchor_idx += 1
            if self.truck_proto.state == P.T_STOPPED:
                self._truck_event(P.Event(P.EV_RESUME))

    # -- per-tick mobility ---------------------------------------------------

    def _advance_truck(self):
        route = self.plan.route
        if self.anchor_idx < len(self.anchors):
            stop_s = self.anchors[self.anchor_idx][0]
        else:
            stop_s = None
        directive = self.truck_directive
        if self.active_dock is not None:
            directive = STOP  # physical interlock during any docking maneuver
        arrived = False
        if route.arcs:
            arrived = self.truck.s >= (stop_s if stop_s is not None else float("inf")) - 1e-9
            if not arrived:
                arrived = step_truck(self.truck, self.p, self.dt, directive, stop_s)
                self.truck_pos = self._truck_position()
        else:
            arrived = stop_s is not None
        if arrived:
            self._process_due_anchors()

    def _process_due_anchors(self):
        """Handle every anchor at or before the truck's position.

        Recovery holds and the route end block the anchor pointer (and with
        it the truck) until their condition clears, so losing a protocol
        event can never let the truck drive past an obligation.
        """
        has_route = bool(self.plan.route.arcs)
        while self.anchor_idx < len(self.anchors):
            s, kind, node, jobs = self.anchors[self.anchor_idx]
            if has_route and self.truck.s < s - 1e-9:
                break
            if kind == "stop":
                self.anchor_idx += 1
                self.current_stop_node = node
                self._truck_event(P.Event(P.EV_ARRIVED_STOP, jobs=jobs))
                break
            if kind == "launch":
                self.anchor_idx += 1
                pending = tuple(j for j in jobs if not self.job_launched[j])
                if pending:
                    self._truck_event(P.Event(P.EV_ARRIVED_LAUNCH, jobs=pending))
                continue
            if kind == "hold":
                if all(self.job_recovered[j] for j in jobs):
                    self.anchor_idx += 1
                    continue
                if self.truck_proto.state == P.T_DELIVERING:
                    self._truck_event(P.Event(P.EV_ARRIVED_HOLD))
                break
            # route end: wait out any launching/unloading still in progress
            if self.truck_proto.state == P.T_DELIVERING:
                self.anchor_idx += 1
                self.truck_end_time = self.t
                self._truck_event(P.Event(P.EV_ARRIVED_END))
            break

    def _returning_waypoint(self, d: _Drone):
        """Regroup guidance, refreshed periodically."""
        p = self.p
        if self.t < d.guide_refresh and d.waypoint is not None:
            return d.waypoint
        d.guide_refresh = self.t + 0.2
        tx, ty = self.truck_pos
        dx = d.vec[0] - tx
        dy = d.vec[1] - ty
        dist = math.hypot(dx, dy)
        # descend smoothly on approach so the docking maneuver starts low
        alt = min(p.cruise_altitude, max(_APPROACH_ALT, dist * 0.35))
        if dist <= p.docking_sense_range:
            return (tx, ty, alt)
        if self.plan.mode == MODE_ONSITE:
            # regroup at the truck's next stopping point
            nxt = self._next_truck_stop_position()
            return (nxt[0], nxt[1], alt)
        if not self.cfg.prediction:
            return (tx, ty, alt)
        # en-route with prediction: intercept the predicted truck position
        view = self._truck_view()
        horizon = dist / p.uav_max_speed
        pred = predict_position(view, horizon)
        dist2 = math.hypot(d.vec[0] - pred[0], d.vec[1] - pred[1])
        pred = predict_position(view, dist2 / p.uav_max_speed)
        return (pred[0], pred[1], alt)

    def _next_truck_stop_position(self):
        if self.truck.speed < 0.05 or not self.plan.route.arcs:
            return (*self.truck_pos, 0.0)
        if self.anchor_idx < len(self.anchors):
            s = self.anchors[self.anchor_idx][0]
            x, y = self.plan.route.position_at(s)
            return (x, y, 0.0)
        return (*self.truck_pos, 0.0)

    def _truck_view(self) -> AgentView:
        cap = None
        if self.anchor_idx < len(self.anchors):
            cap = self.anchors[self.anchor_idx][0]
        x, y = self.truck_pos
        return AgentView(
            position=(x, y, 0.0),
            velocity=None,
            route=self.plan.route if self.plan.route.arcs else None,
            route_s=self.truck.s,
            next_waypoint_s=cap,
            max_speed=self.p.truck_max_speed,
        )

    def _advance_drones(self):
        p = self.p
        qp = p.quadrotor
        dt = self.dt
        m, grav = qp.mass, qp.gravity
        ixx, izz = qp.inertia_xx, qp.inertia_zz
        vmax, tmax = qp.max_speed, qp.max_thrust
        c_t, c_d = p.energy_thrust_coef, p.energy_drag_coef
        for d in tuple(self.flying):
            phys = d.phys
            if phys == "return":
                d.waypoint = self._returning_waypoint(d)
            elif phys == "dock":
                tx, ty = self.truck_pos
                d.waypoint = (tx, ty, _DECK_HEIGHT)
            wp = d.waypoint
            ok = autopilot_step(
                d.vec, wp[0], wp[1], wp[2], d.ctrl_phase,
                dt, m, grav, ixx, izz, vmax, tmax, c_t, c_d,
            )
            if not ok:
                self.aborted = True
                self.abort_reason = f"drone{d.idx} dynamics diverged at t={self.t:.2f}"
                return
            self._check_drone_progress(d)

    def _check_drone_progress(self, d: _Drone):
        p = self.p
        vec = d.vec
        if d.phys == "cruise":
            if d.proto.state != P.D_DELIVERING:
                return
            wp = d.waypoint
            dx = vec[0] - wp[0]
            dy = vec[1] - wp[1]
            if dx * dx + dy * dy <= _TARGET_RADIUS * _TARGET_RADIUS:
                self._drone_event(d, P.Event(P.EV_ARRIVED_TARGET))
            return
        if d.phys == "return":
            tx, ty = self.truck_pos
            dist = math.hypot(vec[0] - tx, vec[1] - ty)
            if dist <= p.docking_sense_range and not d.sensed:
                d.sensed = True
                self._truck_event(P.Event(P.EV_SENSED, drone=d.idx))
                self._drone_event(d, P.Event(P.EV_IN_DOCK_RANGE))
            elif dist > p.docking_sense_range * 1.2 and d.sensed:
                d.sensed = False
                self._truck_event(P.Event(P.EV_SENSE_LOST, drone=d.idx))
            if dist <= p.docking_range and self.active_dock is None:
                blocked = False
                for o in self.flying:
                    if o is d or o.phys != "return" or o.idx >= d.idx:
                        continue
                    odx = o.vec[0] - tx
                    ody = o.vec[1] - ty
                    if odx * odx + ody * ody <= p.docking_range * p.docking_range:
                        blocked = True  # lower-index drone docks first
                        break
                if not blocked:
                    self.active_dock = d.idx
                    d.set_phys("dock")
                    d.dock_started_t = self.t
                    d.dock_timer_done = False
                    self._schedule(self.t + p.landing_duration, "dock-timer", d.idx)
                    self._truck_event(P.Event(P.EV_DOCKING_STARTED, drone=d.idx))
            return
        if d.phys == "dock":
            tx, ty = self.truck_pos
            dist = math.hypot(vec[0] - tx, vec[1] - ty)
            done = (
                d.dock_timer_done
                and dist <= _DOCK_SNAP_XY
                and vec[2] <= _DOCK_SNAP_Z
                and self.truck.speed <= 0.1
            )
            if not done and self.t - d.dock_started_t > _DOCK_TIMEOUT:
                done = True  # liveness guard; counted as a violation
                self.violations += 1
            if done:
                self._drone_event(d, P.Event(P.EV_DOCKED_DONE))

    # -- CAM traffic ----------------------------------------------------------

    def _generate_cams(self):
        if self.cfg.technology == TECH_NONE:
            return
        if self.cfg.comm_window is not None and self.t > self.cfg.comm_window:
            return
        due = [
            d for d in self.flying
            if (self.tick - d.cam_phase_tick) % self.cam_period_ticks == 0
        ]
        if not due:
            return
        truck_rx = (*self.truck_pos, self.p.truck_antenna_height)
        if self.cfg.technology == TECH_CV2X:
            active = {
                d.idx: (d.vec[0], d.vec[1], max(d.vec[2], 0.5))
                for d in self.flying
            }
        for d in due:
            msg = CamMessage(sender=d.idx, t_gen=self.t,
                             size_bytes=self.p.cam_size_bytes)
            tx = (d.vec[0], d.vec[1], max(d.vec[2], 0.5))
            if self.cfg.technology == TECH_LTE:
                rec = self.lte.transmit(msg, tx, truck_rx)
            else:
                rec = self.cv2x.transmit(msg, tx, truck_rx, active)
            self._record_cam(rec)

    def _record_cam(self, rec: TransmissionRecord):
        self.cam_counts[0] += 1
        if rec.outcome == "delivered":
            self.cam_counts[1] += 1
            self.cam_delays.append(rec.delay)
        elif rec.outcome == "lost-sinr":
            self.cam_counts[2] += 1
        else:
            self.cam_counts[3] += 1
        if self.cfg.keep_records:
            self.cam_records.append(rec)

    # -- deliveries -----------------------------------------------------------

    def _on_truck_timer(self):
        if self.truck_proto.state == P.T_UNLOADING and self.current_stop_node is not None:
            self.delivered.add(self.current_stop_node)
            self.current_stop_node = None
        self._truck_event(P.Event(P.EV_TIMER))

    def _on_drone_timer(self, idx: int):
        d = self.drones[idx]
        if d.proto.state == P.D_UNLOADING and d.job is not None:
            self.delivered.add(self.plan.jobs[d.job].target_node)
        self._drone_event(d, P.Event(P.EV_TIMER))

    # -- main loop --------------------------------------------------------------

    def run(self) -> None:
        dt = self.dt
        n_targets = len(self.targets)
        heap = self.heap
        while True:
            while heap and heap[0][0] <= self.t + 1e-9:
                _, _, kind, payload = heappop(heap)
                if kind == "truck-timer":
                    self._on_truck_timer()
                elif kind == "drone-timer":
                    self._on_drone_timer(payload)
                elif kind == "deliver":
                    self._deliver_message(payload)
                elif kind == "dock-timer":
                    self.drones[payload].dock_timer_done = True
                elif kind == "retx":
                    if self._retx_pending(payload):
                        self._send_message(payload.kind, payload.sender,
                                           payload.receiver, payload.job,
                                           is_retx=True)
            self._advance_truck()
            if self.aborted:
                break
            self._advance_drones()
            if self.aborted:
                break
            self._generate_cams()
            if self.cfg.keep_traces and self.t >= self._trace_next - 1e-9:
                self._sample_trace()
                self._trace_next += self.cfg.trace_interval

            if (not self.flying
                    and len(self.delivered) == n_targets
                    and self.anchor_idx >= len(self.anchors)):
                break
            self.tick += 1
            self.t = self.tick * dt
            if self.t > self.time_cap:
                self.aborted = True
                self.abort_reason = (
                    f"time cap {self.time_cap:.0f}s exceeded; delivered "
                    f"{len(self.delivered)}/{n_targets}, drones airborne "
                    f"{sum(1 for d in self.drones if d.vec is not None)}"
                )
                break

    def _sample_trace(self):
        x, y = self.truck_pos
        self.mobility_trace.append(
            (round(self.t, 3), "truck", round(x, 2), round(y, 2), 0.0,
             round(self.truck.speed, 3), self.truck_proto.state, 0.0)
        )
        for d in self.drones:
            if d.vec is None:
                self.mobility_trace.append(
                    (round(self.t, 3), f"drone{d.idx}", round(x, 2), round(y, 2),
                     0.0, 0.0, d.proto.state, round(d.energy_prev, 1))
                )
            else:
                sp = math.sqrt(d.vec[3] ** 2 + d.vec[4] ** 2 + d.vec[5] ** 2)
                self.mobility_trace.append(
                    (round(self.t, 3), f"drone{d.idx}", round(d.vec[0], 2),
                     round(d.vec[1], 2), round(d.vec[2], 2), round(sp, 3),
                     d.proto.state, round(d.vec[12], 1))
                )

    def result(self, cfg: EpisodeConfig) -> EpisodeResult:
        delays = sorted(self.cam_delays)

        def pct(q):
            if not delays:
                return float("nan")
            i = min(len(delays) - 1, max(0, math.ceil(q * len(delays)) - 1))
            return delays[i]

        energies = []
        for d in self.drones:
            energies.append(d.vec[12] if d.vec is not None else d.energy_prev)
        by_phase: dict = {}
        for d in self.drones:
            for k, v in d.by_phase.items():
                by_phase[k] = by_phase.get(k, 0.0) + v
        completion = max(
            self.truck_end_time if self.truck_end_time is not None else self.t,
            self.last_dock_time,
        )
        return EpisodeResult(
            config=cfg,
            completion_time=completion if not self.aborted else self.t,
            aborted=self.aborted,
            abort_reason=self.abort_reason,
            delivered=len(self.delivered),
            n_targets=len(self.targets),
            truck_end_time=self.truck_end_time if self.truck_end_time is not None else float("nan"),
            last_dock_time=self.last_dock_time,
            drone_energy=energies,
            drone_jobs=[d.jobs_flown for d in self.drones],
            energy_by_phase=by_phase,
            violations=self.violations,
            protocol_log=self.protocol_log if self.cfg.keep_traces else [],
            state_trace=self.state_trace,
            mobility_trace=self.mobility_trace,
            cam_records=self.cam_records,
            cam_generated=self.cam_counts[0],
            cam_delivered=self.cam_counts[1],
            cam_lost_sinr=self.cam_counts[2],
            cam_lost_collision=self.cam_counts[3],
            cam_delay_mean=sum(delays) / len(delays) if delays else float("nan"),
            cam_delay_p50=pct(0.5),
            cam_delay_p95=pct(0.95),
            msgs_sent=self.msgs_sent,
            msgs_lost=self.msgs_lost,
            msgs_retransmitted=self.msgs_retx,
            plan=self.plan,
        )


def run_episode(
    scenario: Scenario,
    targets,
    cfg: EpisodeConfig,
    matrix: CostMatrix | None = None,
    tour: Tour | None = None,
) -> EpisodeResult:
    """Plan and execute one delivery episode.

    `targets` is an ordered collection of delivery node ids. A precomputed
    cost matrix / tour pair may be passed to share routing work across
    episodes with the same delivery set.
    """
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if cfg.technology not in TECHNOLOGIES:
        raise ValueError(f"unknown technology {cfg.technology!r}")
    if not 0 <= cfg.drone_count <= 15:
        raise ValueError("drone_count must be within [0, 15]")
    targets = list(targets)
    if matrix is None:
        matrix = cost_matrix(scenario.graph, scenario.depot, targets)
    if tour is None:
        tour = solve_tsp_lk(matrix)
    plan = build_plan(tour, matrix, cfg.mode, cfg.drone_count,
                      scenario.params, scenario.graph.pos)
    baseline_route, _, _ = _truck_only_route(matrix, tour, scenario)
    est = estimate_truck_only_time(baseline_route, scenario, len(targets))
    time_cap = max(4.0 * est, 900.0)
    sim = _Simulation(scenario, plan, cfg, time_cap)
    sim.run()
    return sim.result(cfg)


def _truck_only_route(matrix, tour, scenario):
    from .planner import _build_route

    retained = [0] + list(tour.order)
    return _build_route(matrix, retained, scenario.graph.pos)
