"""Fleet coordination: the truck and drone state machines.

Both machines are pure transition functions over frozen state records, so
identical event sequences always reproduce identical state and message
sequences. Undefined (state, event) pairs do not stop a run: the transition
reports a protocol violation, the event is dropped, and the caller counts
it.

Message flow per job: the truck emits LAUNCH when it starts a launch; the
drone answers LAUNCH_COMPLETE when its takeoff timer expires, sends
DOCKING_REQUEST once when it first enters docking-sense range on return,
and DOCKING_COMPLETE when the docking maneuver finishes. Timers are armed
by returning their duration; scheduling them is the engine's job, as is the
transport (including loss and application-layer retransmission).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .scenario import ParameterSet

# message kinds
LAUNCH = "LAUNCH"
LAUNCH_COMPLETE = "LAUNCH_COMPLETE"
DOCKING_REQUEST = "DOCKING_REQUEST"
DOCKING_COMPLETE = "DOCKING_COMPLETE"

# directives to the mobility layer
GO = "GO"
SLOW = "SLOW"
STOP = "STOP"

# truck states
T_STOPPED = "STOPPED"
T_DELIVERING = "DELIVERING"
T_UNLOADING = "UNLOADING"
T_LAUNCHING = "LAUNCHING"
T_RECOVERING = "RECOVERING"

# drone states
D_DOCKED = "DOCKED"
D_LOADING = "LOADING"
D_DELIVERING = "DELIVERING"
D_UNLOADING = "UNLOADING"
D_RETURNING = "RETURNING"

# event kinds
EV_ARRIVED_STOP = "arrived-at-stop"
EV_ARRIVED_LAUNCH = "arrived-at-launch-anchor"
EV_ARRIVED_HOLD = "arrived-at-recovery-hold"
EV_ARRIVED_END = "arrived-at-route-end"
EV_TIMER = "timer-expired"
EV_MSG = "message-received"
EV_SENSED = "drone-sensed-in-range"
EV_SENSE_LOST = "drone-left-sense-range"
EV_DOCKING_STARTED = "docking-started"
EV_DOCKING_ENDED = "docking-ended"  # physical: the drone is on the deck
EV_RESUME = "resume"
EV_ARRIVED_TARGET = "arrived-at-target"
EV_IN_DOCK_RANGE = "in-docking-range"
EV_DOCKED_DONE = "docking-maneuver-complete"


@dataclass(frozen=True)
class ProtocolMessage:
    kind: str
    sender: str
    receiver: str
    timestamp: float
    job: int | None


@dataclass(frozen=True)
class Event:
    kind: str
    msg_kind: str | None = None
    job: int | None = None
    drone: int | None = None
    jobs: tuple[int, ...] = ()


@dataclass(frozen=True)
class TruckProtocolState:
    state: str = T_DELIVERING
    pending_launches: tuple[int, ...] = ()
    launching_job: int | None = None
    recovering: tuple[int, ...] = ()  # drone ids that requested docking
    docking: tuple[int, ...] = ()  # drone ids mid-maneuver (need speed 0)
    sensed: tuple[int, ...] = ()  # drone ids inside sense range


@dataclass(frozen=True)
class TruckResult:
    state: TruckProtocolState
    directive: str | None  # None = keep the previous directive
    emits: tuple[tuple[str, int], ...] = ()  # (message kind, job)
    arm_timer: float | None = None
    violation: bool = False


def _truck_hold_directive(st: TruckProtocolState) -> str:
    if st.docking:
        return STOP
    if st.recovering or st.sensed:
        return SLOW
    return GO


def truck_transition(st: TruckProtocolState, ev: Event,
                     params: ParameterSet) -> TruckResult:
    s = st.state

    if ev.kind == EV_MSG and ev.msg_kind == DOCKING_REQUEST:
        st2 = replace(st, recovering=_add(st.recovering, ev.drone))
        if s == T_DELIVERING:
            return TruckResult(replace(st2, state=T_RECOVERING), SLOW)
        return TruckResult(st2, STOP if s != T_RECOVERING else _truck_hold_directive(st2))

    if ev.kind == EV_DOCKING_STARTED:
        st2 = replace(st, docking=_add(st.docking, ev.drone))
        if s == T_DELIVERING:
            st2 = replace(st2, state=T_RECOVERING)
        return TruckResult(st2, STOP)

    if ev.kind == EV_DOCKING_ENDED:
        # the drone is physically aboard; only the completion message still
        # owes the protocol-level release
        st2 = replace(
            st,
            docking=_drop(st.docking, ev.drone),
            sensed=_drop(st.sensed, ev.drone),
        )
        if s in (T_DELIVERING, T_RECOVERING):
            return TruckResult(st2, _truck_hold_directive(st2))
        return TruckResult(st2, None)

    if ev.kind == EV_MSG and ev.msg_kind == DOCKING_COMPLETE:
        st2 = replace(
            st,
            recovering=_drop(st.recovering, ev.drone),
            docking=_drop(st.docking, ev.drone),
            sensed=_drop(st.sensed, ev.drone),
        )
        if s == T_RECOVERING and not st2.recovering and not st2.docking:
            return TruckResult(replace(st2, state=T_DELIVERING), GO)
        if s in (T_RECOVERING, T_DELIVERING):
            return TruckResult(st2, _truck_hold_directive(st2))
        return TruckResult(st2, None)

    if ev.kind == EV_SENSED:
        st2 = replace(st, sensed=_add(st.sensed, ev.drone))
        return TruckResult(st2, SLOW if s in (T_DELIVERING, T_RECOVERING) else None)

    if ev.kind == EV_SENSE_LOST:
        st2 = replace(st, sensed=_drop(st.sensed, ev.drone))
        if s in (T_DELIVERING, T_RECOVERING) and not st2.sensed and not st2.recovering:
            return TruckResult(st2, GO)
        return TruckResult(st2, None)

    if ev.kind == EV_ARRIVED_LAUNCH:
        if not ev.jobs:
            return TruckResult(st, None, violation=True)
        if s in (T_DELIVERING, T_RECOVERING, T_STOPPED):
            st2 = replace(
                st, state=T_LAUNCHING,
                pending_launches=st.pending_launches + ev.jobs[1:],
                launching_job=ev.jobs[0],
            )
            return TruckResult(st2, STOP, emits=((LAUNCH, ev.jobs[0]),))
        if s in (T_UNLOADING, T_LAUNCHING):
            # anchor shares the stop position; queue behind the current work
            st2 = replace(st, pending_launches=st.pending_launches + ev.jobs)
            return TruckResult(st2, STOP)

    if s in (T_DELIVERING, T_RECOVERING):
        if ev.kind == EV_ARRIVED_STOP:
            st2 = replace(st, state=T_UNLOADING, pending_launches=ev.jobs)
            return TruckResult(st2, STOP, arm_timer=params.unloading_time_truck)
        if ev.kind in (EV_ARRIVED_HOLD, EV_ARRIVED_END):
            return TruckResult(replace(st, state=T_STOPPED), STOP)

    if s in (T_UNLOADING, T_LAUNCHING) and ev.kind == EV_ARRIVED_HOLD:
        return TruckResult(st, STOP)

    if s == T_UNLOADING and ev.kind == EV_TIMER:
        if st.pending_launches:
            st2 = replace(
                st, state=T_LAUNCHING,
                pending_launches=st.pending_launches[1:],
                launching_job=st.pending_launches[0],
            )
            return TruckResult(st2, STOP, emits=((LAUNCH, st2.launching_job),))
        return TruckResult(replace(st, state=T_DELIVERING), _truck_hold_directive(st))

    if s == T_LAUNCHING and ev.kind == EV_MSG and ev.msg_kind == LAUNCH_COMPLETE:
        if ev.job != st.launching_job:
            return TruckResult(st, None, violation=True)
        if st.pending_launches:
            st2 = replace(
                st,
                pending_launches=st.pending_launches[1:],
                launching_job=st.pending_launches[0],
            )
            return TruckResult(st2, STOP, emits=((LAUNCH, st2.launching_job),))
        st2 = replace(st, state=T_DELIVERING, launching_job=None)
        return TruckResult(st2, _truck_hold_directive(st2))

    if s == T_STOPPED and ev.kind == EV_RESUME:
        st2 = replace(st, state=T_DELIVERING)
        return TruckResult(st2, _truck_hold_directive(st2))

    if s == T_STOPPED and ev.kind in (EV_ARRIVED_HOLD, EV_ARRIVED_END):
        return TruckResult(st, STOP)

    return TruckResult(st, None, violation=True)


@dataclass(frozen=True)
class DroneProtocolState:
    state: str = D_DOCKED
    job: int | None = None
    docking_requested: bool = False


@dataclass(frozen=True)
class DroneResult:
    state: DroneProtocolState
    emits: tuple[tuple[str, int], ...] = ()
    arm_timer: float | None = None
    violation: bool = False


def drone_transition(st: DroneProtocolState, ev: Event,
                     params: ParameterSet) -> DroneResult:
    s = st.state

    if s == D_DOCKED and ev.kind == EV_MSG and ev.msg_kind == LAUNCH:
        st2 = DroneProtocolState(state=D_LOADING, job=ev.job)
        return DroneResult(st2, arm_timer=params.takeoff_duration)

    if s == D_LOADING and ev.kind == EV_TIMER:
        st2 = replace(st, state=D_DELIVERING)
        return DroneResult(st2, emits=((LAUNCH_COMPLETE, st.job),))

    if s == D_DELIVERING and ev.kind == EV_ARRIVED_TARGET:
        st2 = replace(st, state=D_UNLOADING)
        return DroneResult(st2, arm_timer=params.unloading_time_uav)

    if s == D_UNLOADING and ev.kind == EV_TIMER:
        return DroneResult(replace(st, state=D_RETURNING))

    if s == D_RETURNING and ev.kind == EV_IN_DOCK_RANGE:
        if st.docking_requested:
            return DroneResult(st)  # request already out; engine retransmits
        return DroneResult(
            replace(st, docking_requested=True),
            emits=((DOCKING_REQUEST, st.job),),
        )

    if s == D_RETURNING and ev.kind == EV_DOCKED_DONE:
        job = st.job
        return DroneResult(DroneProtocolState(), emits=((DOCKING_COMPLETE, job),))

    return DroneResult(st, violation=True)


def _add(tup: tuple, item) -> tuple:
    return tup if item in tup else tup + (item,)


def _drop(tup: tuple, item) -> tuple:
    return tuple(x for x in tup if x != item)
