"""Vehicle motion: quadrotor rigid-body dynamics, truck kinematics, energy.

The quadrotor follows the simplified diagonal-inertia model: translational
acceleration from thrust tilted through the attitude (pitch theta, roll phi,
yaw psi) minus gravity, and angular acceleration from body torque minus the
gyroscopic cross-coupling term. Integration is semi-implicit Euler at a
fixed step; the hot path (waypoint controller + dynamics + energy accrual
fused) is compiled with numba and shared by the public step functions so
there is exactly one implementation of the physics.

The truck advances along a pre-expanded route with bounded acceleration,
braking in anticipation of stop anchors, and obeying STOP / SLOW / GO
directives from the coordination protocol.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .scenario import ParameterSet, QuadrotorParams

# controller phases
PHASE_HOVER = 0
PHASE_CRUISE = 1
PHASE_VERTICAL = 2  # takeoff: climb with position hold
PHASE_LAND = 3  # gentle descent onto a (possibly moving) dock

# state vector layout
_X, _Y, _Z, _VX, _VY, _VZ, _TH, _PH, _PS, _WTH, _WPH, _WPS, _EN = range(13)

_MAX_TILT = math.radians(35.0)
_ACC_CLAMP = 6.0  # m/s^2 on the demanded acceleration vector
_KV = 0.9  # velocity demand per meter of position error
_KA = 2.5  # acceleration demand per m/s of velocity error
_ATT_KP = 80.0  # attitude PD (maps to angular acceleration)
_ATT_KD = 18.0
_LAND_SPEED = 2.5  # m/s cap while docking / landing
_VERT_SPEED = 4.0  # m/s cap for the takeoff climb


class DynamicsDiverged(RuntimeError):
    """A mobility step produced a non-finite state."""


class AttitudeSingular(ValueError):
    """Pitch at or beyond 90 degrees; the attitude parametrization breaks."""


@dataclass(frozen=True)
class QuadrotorState:
    position: tuple[float, float, float]
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    attitude: tuple[float, float, float] = (0.0, 0.0, 0.0)  # theta, phi, psi
    angular_rate: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Controls:
    thrust: float  # N
    torque: tuple[float, float, float]  # N m, body frame


def _wrap_angle(a: float) -> float:
    while a <= -math.pi:
        a += 2.0 * math.pi
    while a > math.pi:
        a -= 2.0 * math.pi
    return a


def quadrotor_accelerations(state: QuadrotorState, qp: QuadrotorParams,
                            controls: Controls):
    """Translational and angular acceleration for the given inputs."""
    th, ph, ps = state.attitude
    if abs(th) >= math.pi / 2.0 - 1e-9:
        raise AttitudeSingular(f"pitch {th:.4f} rad at the 90 degree singularity")
    ct, st = math.cos(th), math.sin(th)
    cp, sp = math.cos(ph), math.sin(ph)
    cs, ss = math.cos(ps), math.sin(ps)
    f = controls.thrust / qp.mass
    lin = (
        f * (cs * st * cp + ss * sp),
        f * (ss * st * cp - cs * sp),
        -qp.gravity + f * (ct * cp),
    )
    wth, wph, wps = state.angular_rate
    # gyroscopic cross terms of the diagonal-inertia body (Ixx = Iyy)
    cth = (qp.inertia_xx - qp.inertia_zz) * wph * wps
    cph = (qp.inertia_zz - qp.inertia_xx) * wth * wps
    cps = 0.0
    tq = controls.torque
    ang = (
        (tq[0] - cth) / qp.inertia_xx,
        (tq[1] - cph) / qp.inertia_xx,
        (tq[2] - cps) / qp.inertia_zz,
    )
    return lin, ang


@njit(cache=True)
def _dyn_step(s, thrust, tq0, tq1, tq2, dt, m, g, ixx, izz, vmax, c_t, c_d,
              accrue_energy):
    """Semi-implicit Euler step + energy accrual on the raw state vector."""
    if accrue_energy:
        vmag = math.sqrt(s[_VX] ** 2 + s[_VY] ** 2 + s[_VZ] ** 2)
        power = c_t * thrust ** 1.5 + c_d * vmag ** 3
        s[_EN] += power * dt

    ct = math.cos(s[_TH])
    st = math.sin(s[_TH])
    cp = math.cos(s[_PH])
    sp = math.sin(s[_PH])
    cs = math.cos(s[_PS])
    ss = math.sin(s[_PS])
    f = thrust / m
    ax = f * (cs * st * cp + ss * sp)
    ay = f * (ss * st * cp - cs * sp)
    az = -g + f * (ct * cp)

    cth = (ixx - izz) * s[_WPH] * s[_WPS]
    cph = (izz - ixx) * s[_WTH] * s[_WPS]
    ath = (tq0 - cth) / ixx
    aph = (tq1 - cph) / ixx
    aps = tq2 / izz

    s[_VX] += ax * dt
    s[_VY] += ay * dt
    s[_VZ] += az * dt
    vmag = math.sqrt(s[_VX] ** 2 + s[_VY] ** 2 + s[_VZ] ** 2)
    if vmag > vmax:
        k = vmax / vmag
        s[_VX] *= k
        s[_VY] *= k
        s[_VZ] *= k
    s[_X] += s[_VX] * dt
    s[_Y] += s[_VY] * dt
    s[_Z] += s[_VZ] * dt

    s[_WTH] += ath * dt
    s[_WPH] += aph * dt
    s[_WPS] += aps * dt
    s[_TH] += s[_WTH] * dt
    s[_PH] += s[_WPH] * dt
    s[_PS] += s[_WPS] * dt
    for i in (_TH, _PH, _PS):
        while s[i] > math.pi:
            s[i] -= 2.0 * math.pi
        while s[i] <= -math.pi:
            s[i] += 2.0 * math.pi

    ok = True
    for i in range(13):
        if not math.isfinite(s[i]):
            ok = False
    return ok


@njit(cache=True)
def _controller(s, wx, wy, wz, phase, m, g, ixx, izz, vmax, tmax):
    """Cascaded PD: position -> velocity -> acceleration -> (T, torque)."""
    ex = wx - s[_X]
    ey = wy - s[_Y]
    ez = wz - s[_Z]
    if phase == PHASE_CRUISE:
        vcap_h = vmax * 0.97
        vcap_v = _VERT_SPEED
    elif phase == PHASE_VERTICAL:
        vcap_h = 2.0
        vcap_v = _VERT_SPEED
    elif phase == PHASE_LAND:
        vcap_h = _LAND_SPEED
        vcap_v = _LAND_SPEED
    else:
        vcap_h = 3.0
        vcap_v = 3.0
    vdx = _KV * ex
    vdy = _KV * ey
    vdz = _KV * ez
    hmag = math.sqrt(vdx * vdx + vdy * vdy)
    if hmag > vcap_h:
        k = vcap_h / hmag
        vdx *= k
        vdy *= k
    if vdz > vcap_v:
        vdz = vcap_v
    elif vdz < -vcap_v:
        vdz = -vcap_v

    adx = _KA * (vdx - s[_VX])
    ady = _KA * (vdy - s[_VY])
    adz = _KA * (vdz - s[_VZ])
    amag = math.sqrt(adx * adx + ady * ady + adz * adz)
    if amag > _ACC_CLAMP:
        k = _ACC_CLAMP / amag
        adx *= k
        ady *= k
        adz *= k

    azg = adz + g
    if azg < 0.3 * g:
        azg = 0.3 * g
    # rotate the demanded acceleration into the yaw frame (psi held)
    cs = math.cos(s[_PS])
    ss = math.sin(s[_PS])
    abx = cs * adx + ss * ady
    aby = -ss * adx + cs * ady
    th_des = math.atan2(abx, azg)
    ph_des = math.atan2(-aby, math.sqrt(abx * abx + azg * azg))
    if th_des > _MAX_TILT:
        th_des = _MAX_TILT
    elif th_des < -_MAX_TILT:
        th_des = -_MAX_TILT
    if ph_des > _MAX_TILT:
        ph_des = _MAX_TILT
    elif ph_des < -_MAX_TILT:
        ph_des = -_MAX_TILT
    thrust = m * math.sqrt(abx * abx + aby * aby + azg * azg)
    if thrust > tmax:
        thrust = tmax
    elif thrust < 0.0:
        thrust = 0.0

    eth = th_des - s[_TH]
    eph = ph_des - s[_PH]
    eps = -s[_PS]
    while eps > math.pi:
        eps -= 2.0 * math.pi
    while eps <= -math.pi:
        eps += 2.0 * math.pi
    tq0 = ixx * (_ATT_KP * eth - _ATT_KD * s[_WTH])
    tq1 = ixx * (_ATT_KP * eph - _ATT_KD * s[_WPH])
    tq2 = izz * (_ATT_KP * eps - _ATT_KD * s[_WPS])
    return thrust, tq0, tq1, tq2


@njit(cache=True)
def autopilot_step(s, wx, wy, wz, phase, dt, m, g, ixx, izz, vmax, tmax,
                   c_t, c_d):
    """One fused waypoint-tracking step; returns False on divergence."""
    thrust, tq0, tq1, tq2 = _controller(s, wx, wy, wz, phase, m, g, ixx, izz,
                                        vmax, tmax)
    return _dyn_step(s, thrust, tq0, tq1, tq2, dt, m, g, ixx, izz, vmax,
                     c_t, c_d, True)


def state_to_vector(state: QuadrotorState, energy: float = 0.0) -> np.ndarray:
    v = np.empty(13, np.float64)
    v[0:3] = state.position
    v[3:6] = state.velocity
    v[6:9] = state.attitude
    v[9:12] = state.angular_rate
    v[12] = energy
    return v


def vector_to_state(v: np.ndarray) -> QuadrotorState:
    return QuadrotorState(
        position=(v[0], v[1], v[2]),
        velocity=(v[3], v[4], v[5]),
        attitude=(v[6], v[7], v[8]),
        angular_rate=(v[9], v[10], v[11]),
    )


def step_quadrotor(state: QuadrotorState, qp: QuadrotorParams,
                   controls: Controls, dt: float) -> QuadrotorState:
    """Integrate the given raw controls for one step of dt in (0, 0.1] s."""
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1] s, got {dt}")
    v = state_to_vector(state)
    ok = _dyn_step(v, controls.thrust, *controls.torque, dt, qp.mass, qp.gravity,
                   qp.inertia_xx, qp.inertia_zz, qp.max_speed, 0.0, 0.0, False)
    if not ok:
        raise DynamicsDiverged(
            f"non-finite state after step from {state} with {controls}"
        )
    return vector_to_state(v)


def waypoint_controls(state: QuadrotorState, qp: QuadrotorParams,
                      waypoint, phase: int = PHASE_CRUISE) -> Controls:
    v = state_to_vector(state)
    thrust, tq0, tq1, tq2 = _controller(
        v, waypoint[0], waypoint[1], waypoint[2], phase,
        qp.mass, qp.gravity, qp.inertia_xx, qp.inertia_zz, qp.max_speed,
        qp.max_thrust,
    )
    return Controls(thrust, (tq0, tq1, tq2))


# ---------------------------------------------------------------------------
# Energy account


@dataclass
class EnergyAccount:
    consumed: float = 0.0  # joules
    by_phase: dict = field(default_factory=dict)

    def add(self, phase: str, joules: float):
        if joules < 0:
            raise ValueError("energy accrual cannot be negative")
        self.consumed += joules
        self.by_phase[phase] = self.by_phase.get(phase, 0.0) + joules


def accrue_energy(account: EnergyAccount, controls: Controls,
                  state: QuadrotorState, dt: float, params: ParameterSet,
                  phase: str = "cruise") -> EnergyAccount:
    """Add P*dt with the induced-power and parasitic-drag proxies.

    A DOCKED drone rides the truck and consumes exactly nothing.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if phase == "docked":
        account.add(phase, 0.0)
        return account
    vmag = math.sqrt(sum(c * c for c in state.velocity))
    power = (params.energy_thrust_coef * controls.thrust ** 1.5
             + params.energy_drag_coef * vmag ** 3)
    account.add(phase, power * dt)
    return account


# ---------------------------------------------------------------------------
# Truck motion along an expanded route

GO = "GO"
SLOW = "SLOW"
STOP = "STOP"


class ExpandedRoute:
    """Concatenated arcs with cumulative distance and interpolation."""

    def __init__(self, arcs, pos):
        self.arcs = tuple(arcs)
        self.x0 = []
        self.y0 = []
        self.ux = []
        self.uy = []
        self.length = []
        self.limit = []
        self.cum = [0.0]
        self.node_s: list[tuple[float, int]] = []  # (s, node id) at arc ends
        for a in self.arcs:
            x1, y1 = pos[a.u]
            x2, y2 = pos[a.v]
            d = math.hypot(x2 - x1, y2 - y1)
            self.x0.append(x1)
            self.y0.append(y1)
            if d > 1e-9:
                self.ux.append((x2 - x1) / d)
                self.uy.append((y2 - y1) / d)
            else:
                self.ux.append(0.0)
                self.uy.append(0.0)
            self.length.append(a.length)
            self.limit.append(a.speed_limit)
            self.cum.append(self.cum[-1] + a.length)
            self.node_s.append((self.cum[-1], a.v))
        self.total = self.cum[-1]
        self._geo_scale = [
            (math.hypot(pos[a.v][0] - pos[a.u][0], pos[a.v][1] - pos[a.u][1]) / a.length)
            if a.length > 1e-9 else 0.0
            for a in self.arcs
        ]

    def arc_index_at(self, s: float) -> int:
        """Arc containing s, taking the later arc at exact boundaries."""
        if not self.arcs:
            return 0
        lo, hi = 0, len(self.arcs) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if self.cum[mid + 1] <= s:
                lo = mid + 1
            else:
                hi = mid
        return lo

    def position_at(self, s: float) -> tuple[float, float]:
        if not self.arcs:
            raise ValueError("empty route has no geometry")
        s = min(max(s, 0.0), self.total)
        i = self.arc_index_at(s)
        local = (s - self.cum[i]) * self._geo_scale[i]
        return (self.x0[i] + self.ux[i] * local, self.y0[i] + self.uy[i] * local)

    def limit_at(self, s: float) -> float:
        if not self.arcs:
            return 0.0
        return self.limit[self.arc_index_at(min(max(s, 0.0), self.total - 1e-9))]

    def gates(self) -> list[tuple[int, int]]:
        """The intersection-leaving sequence as (node, chosen arc id)."""
        return [(a.u, a.id) for a in self.arcs]


@dataclass
class TruckState:
    route: ExpandedRoute
    s: float = 0.0
    speed: float = 0.0
    arc: int = 0  # maintained incrementally by step_truck

    @property
    def arc_index(self) -> int:
        return self.arc

    @property
    def offset(self) -> float:
        return self.s - self.route.cum[self.arc]

    def position(self) -> tuple[float, float]:
        r = self.route
        i = self.arc
        local = (self.s - r.cum[i]) * r._geo_scale[i]
        return (r.x0[i] + r.ux[i] * local, r.y0[i] + r.uy[i] * local)


def step_truck(state: TruckState, params: ParameterSet, dt: float,
               directive: str = GO, stop_s: float | None = None) -> bool:
    """Advance one step; returns True if a stop anchor was reached.

    The speed target honors the arc limit, the global maximum, and the
    protocol directive; acceleration and braking are bounded; braking is
    anticipatory so the truck halts at `stop_s` rather than overshooting.
    """
    if not 0.0 < dt <= 0.1:
        raise ValueError(f"dt must be in (0, 0.1] s, got {dt}")
    r = state.route
    if state.s >= r.total and (stop_s is None or stop_s >= r.total):
        state.speed = 0.0
        return stop_s is not None
    limit = params.truck_max_speed
    arc_limit = r.limit[state.arc]
    if arc_limit < limit:
        limit = arc_limit
    if directive == STOP:
        target = 0.0
    elif directive == SLOW:
        target = limit * params.slow_factor
    else:
        target = limit
    if stop_s is not None and directive != STOP:
        remaining = stop_s - state.s
        if remaining < 0.0:
            remaining = 0.0
        brake = math.sqrt(2.0 * params.truck_decel * remaining)
        if brake < target:
            target = brake
    dv = target - state.speed
    if dv > 0:
        state.speed += min(dv, params.truck_accel * dt)
    else:
        state.speed += max(dv, -params.truck_decel * dt)
    if state.speed < 0.0:
        state.speed = 0.0
    new_s = state.s + state.speed * dt
    arrived = False
    if stop_s is not None and new_s >= stop_s - 1e-9:
        new_s = stop_s
        state.speed = 0.0
        arrived = True
    if new_s > r.total:
        new_s = r.total
        state.speed = 0.0
    cum = r.cum
    n_last = len(r.arcs) - 1
    while state.arc < n_last and new_s >= cum[state.arc + 1]:
        state.arc += 1
        if r.limit[state.arc] < state.speed:
            state.speed = r.limit[state.arc]
    state.s = new_s
    return arrived


# ---------------------------------------------------------------------------
# Hierarchical mobility prediction


@dataclass(frozen=True)
class AgentView:
    """What an observer knows about an agent when predicting its motion."""

    position: tuple[float, float, float]
    velocity: tuple[float, float, float] | None = None
    route: ExpandedRoute | None = None
    route_s: float | None = None
    next_waypoint_s: float | None = None  # advance is capped here
    max_speed: float | None = None


def predict_position(view: AgentView, horizon: float) -> tuple[float, float, float]:
    """Best-effort future position, picking the most informed method.

    Route knowledge advances the agent along its route at expected speeds up
    to the next waypoint; otherwise constant-velocity extrapolation;
    otherwise the last known position.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if horizon == 0.0:
        return view.position
    if view.route is not None and view.route_s is not None and view.route.arcs:
        r = view.route
        s = view.route_s
        cap = r.total if view.next_waypoint_s is None else min(view.next_waypoint_s, r.total)
        remaining = horizon
        vmax = view.max_speed or float("inf")
        while remaining > 1e-12 and s < cap - 1e-9:
            i = r.arc_index_at(min(s, r.total - 1e-9))
            v = min(vmax, r.limit[i])
            seg_end = min(r.cum[i + 1], cap)
            dt_seg = (seg_end - s) / v
            if dt_seg >= remaining:
                s += v * remaining
                remaining = 0.0
            else:
                s = seg_end
                remaining -= dt_seg
        x, y = r.position_at(min(s, r.total))
        return (x, y, view.position[2])
    if view.velocity is not None:
        return (
            view.position[0] + view.velocity[0] * horizon,
            view.position[1] + view.velocity[1] * horizon,
            view.position[2] + view.velocity[2] * horizon,
        )
    return view.position
