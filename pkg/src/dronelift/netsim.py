"""Abstract LTE and C-V2X link models over deterministic obstacle shadowing.

Both technologies share the same propagation core: log-distance path loss
plus, per building crossed by the 3-D line of sight below roof height, a
fixed wall penalty and an attenuation rate per obstructed meter. There is no
stochastic fading; all randomness sits in the medium-access models (grant
waits, semi-persistent slot selection) and is driven by per-episode RNG
streams.

The medium-access abstractions replace full protocol stacks:

* LTE: two hops via the base station. Delay = scheduling-grant wait
  (uniform 4..16 ms) + 4 ms uplink processing + FIFO queueing at the base
  station + a downlink service whose duration stretches as the weaker hop's
  SINR margin shrinks (poor links need more transmission resources). One
  HARQ retransmission (+8 ms) per hop before the packet counts as lost.
* C-V2X (sidelink, Mode-4-like): single hop. Each sender owns one
  (subframe, subchannel) slot per 100 ms window, reselected every 5..15
  windows among slots not sensed busy. Delay = 3 ms processing + the wait
  from message generation to the owned slot. Two in-range senders on the
  same slot lose the packet unless one is received 10 dB stronger.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

SPEED_OF_LIGHT = 299_792_458.0


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class ChannelParams:
    """Radio and propagation constants for one technology."""

    carrier_hz: float
    bandwidth_hz: float = 20e6
    tx_power_ue_dbm: float = 23.0
    tx_power_enb_dbm: float = 43.0
    path_loss_exponent: float = 2.7
    ref_loss_db: float = 40.0  # loss at 1 m
    gamma_db_per_m: float = 0.4  # attenuation per obstructed meter
    wall_penalty_db: float = 9.0  # flat penalty per obstructing building
    noise_floor_dbm: float = -121.0
    sinr_threshold_db: float = 2.0
    max_obstruction_db: float = 42.0  # rooftop-diffraction bound on shadowing


@dataclass(frozen=True)
class LteModelParams:
    channel: ChannelParams = field(default_factory=lambda: ChannelParams(carrier_hz=2.1e9))
    grant_wait_min_ms: int = 4
    grant_wait_max_ms: int = 16
    hop_ms: float = 4.0  # uplink transmission/processing
    harq_retx_ms: float = 8.0
    service_ref_margin_db: float = 9.0  # margin at which service stays at hop_ms
    service_max_factor: float = 8.0  # clamp on the margin-driven stretch
    queue_wait_cap_ms: float = 160.0  # beyond this the eNB sheds the packet
    control_margin_db: float = 12.0  # link-adaptation headroom for control messages


@dataclass(frozen=True)
class Cv2xModelParams:
    channel: ChannelParams = field(default_factory=lambda: ChannelParams(carrier_hz=5.9e9))
    processing_ms: float = 3.0  # intra-UE share
    sel_window_min_ms: int = 1
    sel_window_max_ms: int = 20
    window_ms: int = 100  # equals the CAM interval
    subchannels: int = 4
    resel_min_windows: int = 5
    resel_max_windows: int = 15
    capture_threshold_db: float = 10.0
    sensing_threshold_dbm: float = -82.0


# ---------------------------------------------------------------------------
# Records and metrics

DELIVERED = "delivered"
LOST_SINR = "lost-sinr"
LOST_COLLISION = "lost-collision"


@dataclass(frozen=True)
class CamMessage:
    sender: int
    t_gen: float
    size_bytes: int = 190


@dataclass(frozen=True)
class TransmissionRecord:
    sender: int
    t_gen: float
    outcome: str
    delay: float  # seconds; NaN when lost
    path: str  # "direct" or "uplink+downlink"


@dataclass(frozen=True)
class LinkMetrics:
    generated: int
    delivered: int
    lost_sinr: int
    lost_collision: int
    pdr: float
    delay_mean: float
    delay_p50: float
    delay_p95: float


def aggregate_metrics(records) -> LinkMetrics:
    """PDR and delay statistics over one group of transmission records."""
    records = list(records)
    if not records:
        raise ValueError("empty record group; report absent groups as absent, not zero")
    delays = sorted(r.delay for r in records if r.outcome == DELIVERED)
    delivered = len(delays)
    lost_sinr = sum(1 for r in records if r.outcome == LOST_SINR)
    lost_coll = sum(1 for r in records if r.outcome == LOST_COLLISION)

    def pct(q):
        if not delays:
            return float("nan")
        i = min(len(delays) - 1, max(0, math.ceil(q * len(delays)) - 1))
        return delays[i]

    return LinkMetrics(
        generated=len(records),
        delivered=delivered,
        lost_sinr=lost_sinr,
        lost_collision=lost_coll,
        pdr=delivered / len(records),
        delay_mean=sum(delays) / delivered if delivered else float("nan"),
        delay_p50=pct(0.50),
        delay_p95=pct(0.95),
    )


def aggregate_by(records_with_keys) -> dict:
    groups: dict = {}
    for key, rec in records_with_keys:
        groups.setdefault(key, []).append(rec)
    return {k: aggregate_metrics(v) for k, v in sorted(groups.items())}


# ---------------------------------------------------------------------------
# Deterministic obstacle shadowing


@njit(cache=True)
def _obstruction_kernel(
    tx0, tx1, tx2, rx0, rx1, rx2,
    ex1, ey1, ex2, ey2, estart, heights,
    bminx, bminy, bmaxx, bmaxy,
):
    """Per-building shadowing of the 3-D segment tx->rx.

    Returns (number of obstructing buildings, total obstructed 3-D length).
    """
    n_blocked = 0
    total_len = 0.0
    dx = rx0 - tx0
    dy = rx1 - tx1
    dz = rx2 - tx2
    seg2 = math.sqrt(dx * dx + dy * dy)
    seg3 = math.sqrt(dx * dx + dy * dy + dz * dz)
    if seg2 < 1e-12:
        return 0, 0.0
    sminx = min(tx0, rx0)
    smaxx = max(tx0, rx0)
    sminy = min(tx1, rx1)
    smaxy = max(tx1, rx1)
    ts = np.empty(34, np.float64)
    for b in range(heights.shape[0]):
        h = heights[b]
        if tx2 >= h and rx2 >= h:
            continue
        if smaxx < bminx[b] or sminx > bmaxx[b] or smaxy < bminy[b] or sminy > bmaxy[b]:
            continue
        e0 = estart[b]
        e1 = estart[b + 1]
        nts = 0
        ts[nts] = 0.0
        nts += 1
        ts[nts] = 1.0
        nts += 1
        for e in range(e0, e1):
            qx = ex1[e]
            qy = ey1[e]
            ex = ex2[e] - qx
            ey = ey2[e] - qy
            denom = dx * ey - dy * ex
            if abs(denom) < 1e-12:
                continue
            t = ((qx - tx0) * ey - (qy - tx1) * ex) / denom
            u = ((qx - tx0) * dy - (qy - tx1) * dx) / denom
            if -1e-12 <= u <= 1.0 + 1e-12 and 0.0 < t < 1.0 and nts < 34:
                ts[nts] = t
                nts += 1
        # insertion sort of the crossing parameters
        for i in range(1, nts):
            key = ts[i]
            j = i - 1
            while j >= 0 and ts[j] > key:
                ts[j + 1] = ts[j]
                j -= 1
            ts[j + 1] = key
        blen = 0.0
        for i in range(nts - 1):
            a = ts[i]
            c = ts[i + 1]
            if c - a < 1e-9:
                continue
            mid = 0.5 * (a + c)
            px = tx0 + mid * dx
            py = tx1 + mid * dy
            inside = False
            for e in range(e0, e1):
                y1 = ey1[e]
                y2 = ey2[e]
                if (y1 > py) != (y2 > py):
                    xint = ex1[e] + (py - y1) / (y2 - y1) * (ex2[e] - ex1[e])
                    if px < xint:
                        inside = not inside
            if not inside:
                continue
            # clip to the altitudes below roof height
            if abs(dz) < 1e-12:
                if tx2 < h:
                    blen += c - a
            else:
                th = (h - tx2) / dz
                if dz > 0.0:
                    lo = a
                    hi = min(c, th)
                else:
                    lo = max(a, th)
                    hi = c
                if hi > lo:
                    blen += hi - lo
        if blen > 1e-12:
            n_blocked += 1
            total_len += blen * seg3
    return n_blocked, total_len


class BuildingsIndex:
    """Flattened building geometry for the propagation kernel."""

    def __init__(self, buildings):
        ex1, ey1, ex2, ey2 = [], [], [], []
        estart = [0]
        heights = []
        bminx, bminy, bmaxx, bmaxy = [], [], [], []
        for b in buildings:
            fp = b.footprint
            n = len(fp)
            for i in range(n):
                x1, y1 = fp[i]
                x2, y2 = fp[(i + 1) % n]
                ex1.append(x1)
                ey1.append(y1)
                ex2.append(x2)
                ey2.append(y2)
            estart.append(len(ex1))
            heights.append(b.height)
            xs = [p[0] for p in fp]
            ys = [p[1] for p in fp]
            bminx.append(min(xs))
            bminy.append(min(ys))
            bmaxx.append(max(xs))
            bmaxy.append(max(ys))
        f64 = np.float64
        self.ex1 = np.array(ex1, f64)
        self.ey1 = np.array(ey1, f64)
        self.ex2 = np.array(ex2, f64)
        self.ey2 = np.array(ey2, f64)
        self.estart = np.array(estart, np.int64)
        self.heights = np.array(heights, f64)
        self.bminx = np.array(bminx, f64)
        self.bminy = np.array(bminy, f64)
        self.bmaxx = np.array(bmaxx, f64)
        self.bmaxy = np.array(bmaxy, f64)

    def obstruction(self, tx, rx) -> tuple[int, float]:
        return _obstruction_kernel(
            tx[0], tx[1], tx[2], rx[0], rx[1], rx[2],
            self.ex1, self.ey1, self.ex2, self.ey2, self.estart, self.heights,
            self.bminx, self.bminy, self.bmaxx, self.bmaxy,
        )


def path_loss(tx, rx, buildings: BuildingsIndex, ch: ChannelParams) -> float:
    """Deterministic loss in dB between two 3-D positions.

    Symmetric in its endpoints; d <= 1 m returns the reference loss.
    """
    d = math.sqrt(
        (rx[0] - tx[0]) ** 2 + (rx[1] - tx[1]) ** 2 + (rx[2] - tx[2]) ** 2
    )
    loss = ch.ref_loss_db
    if d > 1.0:
        loss += 10.0 * ch.path_loss_exponent * math.log10(d)
    n_blocked, obst_len = buildings.obstruction(tx, rx)
    if n_blocked:
        extra = n_blocked * ch.wall_penalty_db + ch.gamma_db_per_m * obst_len
        if extra > ch.max_obstruction_db:
            extra = ch.max_obstruction_db
        loss += extra
    return loss


def rsrp_grid(bounds, enb_pos, tx_power_dbm, buildings: BuildingsIndex,
              ch: ChannelParams, height: float, resolution: float):
    """Received-power map at `height` above ground on a square lattice.

    Returns (origin, resolution, 2-D array [ny, nx] in dBm); cell centers sit
    at origin + (i + 0.5) * resolution.
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    nx = max(1, int(bounds[0] / resolution))
    ny = max(1, int(bounds[1] / resolution))
    grid = np.empty((ny, nx), np.float64)
    for j in range(ny):
        cy = (j + 0.5) * resolution
        for i in range(nx):
            cx = (i + 0.5) * resolution
            grid[j, i] = tx_power_dbm - path_loss(enb_pos, (cx, cy, height), buildings, ch)
    return (0.0, 0.0), resolution, grid


# ---------------------------------------------------------------------------
# Link simulators (one instance per episode; hold the shared medium state)


def _dbm_to_mw(v: float) -> float:
    return 10.0 ** (v / 10.0)


class LteLink:
    """Infrastructure-scheduled two-hop link drone -> eNB -> truck."""

    PATH = "uplink+downlink"

    def __init__(self, buildings: BuildingsIndex, enb_pos, params: LteModelParams, rng):
        self.b = buildings
        self.enb = tuple(enb_pos)
        self.p = params
        self.rng = rng
        self._subframes: dict[int, list[float]] = {}  # subframe -> rx powers at eNB (mW)
        self._busy_until_ms = 0.0
        self._noise_mw = _dbm_to_mw(params.channel.noise_floor_dbm)

    def _uplink_attempt(self, sf: int, rx_mw: float) -> tuple[bool, float]:
        """Register the transmission and decode against co-subframe interference."""
        others = self._subframes.setdefault(sf, [])
        interference = sum(others)
        others.append(rx_mw)
        if len(self._subframes) > 4096:
            cutoff = sf - 1000
            for k in [k for k in self._subframes if k < cutoff]:
                del self._subframes[k]
        sinr_db = 10.0 * math.log10(rx_mw / (self._noise_mw + interference))
        return sinr_db >= self.p.channel.sinr_threshold_db, sinr_db

    def transmit(self, msg: CamMessage, tx_pos, truck_pos) -> TransmissionRecord:
        p = self.p
        ch = p.channel
        up_loss = path_loss(tx_pos, self.enb, self.b, ch)
        up_rx_mw = _dbm_to_mw(ch.tx_power_ue_dbm - up_loss)
        t_ms = msg.t_gen * 1000.0

        grant = self.rng.randint(p.grant_wait_min_ms, p.grant_wait_max_ms)
        sf = int(t_ms + grant)
        ok, up_sinr = self._uplink_attempt(sf, up_rx_mw)
        harq_ms = 0.0
        if not ok:
            harq_ms += p.harq_retx_ms
            sf = int(t_ms + grant + p.harq_retx_ms)
            ok, up_sinr = self._uplink_attempt(sf, up_rx_mw)
            if not ok:
                return TransmissionRecord(msg.sender, msg.t_gen, LOST_SINR, float("nan"), self.PATH)

        down_loss = path_loss(self.enb, truck_pos, self.b, ch)
        down_margin = (ch.tx_power_enb_dbm - down_loss - ch.noise_floor_dbm
                       - ch.sinr_threshold_db)
        up_margin = up_sinr - ch.sinr_threshold_db

        # A weak hop runs at a lower MCS and occupies the base station for
        # longer; under load that queueing is what drives the delay up, and
        # shedding at the queue cap is what drives the loss up. Doomed
        # downlink transmissions still burn their share of resources.
        margin = max(0.5, min(up_margin, down_margin))
        stretch = min(p.service_max_factor, max(1.0, p.service_ref_margin_db / margin))
        service_ms = p.hop_ms * stretch
        if down_margin < 0:
            harq_ms += p.harq_retx_ms  # one downlink repeat, chase combining

        arrival_ms = t_ms + grant + p.hop_ms + harq_ms
        wait_ms = self._busy_until_ms - arrival_ms
        if wait_ms < 0.0:
            wait_ms = 0.0
        elif wait_ms > p.queue_wait_cap_ms:
            return TransmissionRecord(msg.sender, msg.t_gen, LOST_COLLISION, float("nan"), self.PATH)
        self._busy_until_ms = arrival_ms + wait_ms + service_ms
        if down_margin < -3.0:  # combining cannot bridge a deep fade
            return TransmissionRecord(msg.sender, msg.t_gen, LOST_SINR, float("nan"), self.PATH)
        delay_ms = grant + p.hop_ms + harq_ms + wait_ms + service_ms
        return TransmissionRecord(msg.sender, msg.t_gen, DELIVERED, delay_ms / 1000.0, self.PATH)


class Cv2xLink:
    """Direct sidelink with sensing-based semi-persistent slot ownership."""

    PATH = "direct"

    def __init__(self, buildings: BuildingsIndex, params: Cv2xModelParams, rng):
        self.b = buildings
        self.p = params
        self.rng = rng
        # sender id -> (phase_ms, offset_ms, subchannel, windows_left)
        self._sps: dict[int, tuple[int, int, int, int]] = {}

    def _slot_of(self, sender: int) -> tuple[int, int]:
        phase, offset, chan, _ = self._sps[sender]
        return ((phase + offset) % self.p.window_ms, chan)

    def _select(self, sender: int, phase_ms: int, positions=None):
        """Pick a free slot uniformly among those not sensed as occupied."""
        p = self.p
        occupied = set()
        if positions is not None and sender in positions:
            me = positions[sender]
            for other, st in self._sps.items():
                if other == sender or other not in positions:
                    continue
                loss = path_loss(positions[other], me, self.b, p.channel)
                if p.channel.tx_power_ue_dbm - loss >= p.sensing_threshold_dbm:
                    occupied.add(((st[0] + st[1]) % p.window_ms, st[2]))
        candidates = []
        for off in range(p.sel_window_min_ms, p.sel_window_max_ms + 1):
            for chan in range(p.subchannels):
                if ((phase_ms + off) % p.window_ms, chan) not in occupied:
                    candidates.append((off, chan))
        if not candidates:
            candidates = [
                (off, chan)
                for off in range(p.sel_window_min_ms, p.sel_window_max_ms + 1)
                for chan in range(p.subchannels)
            ]
        off, chan = candidates[self.rng.randrange(len(candidates))]
        windows = self.rng.randint(p.resel_min_windows, p.resel_max_windows)
        self._sps[sender] = (phase_ms, off, chan, windows)

    def deactivate(self, sender: int):
        self._sps.pop(sender, None)

    def transmit(self, msg: CamMessage, tx_pos, truck_pos, active_positions) -> TransmissionRecord:
        """Resolve one CAM. `active_positions` maps every currently
        transmitting sender id (including this one) to its position."""
        p = self.p
        ch = p.channel
        phase = int(round(msg.t_gen * 1000.0)) % p.window_ms
        st = self._sps.get(msg.sender)
        if st is None or st[0] != phase or st[3] <= 0:
            self._select(msg.sender, phase, positions=active_positions)
        phase_ms, off, chan, windows = self._sps[msg.sender]
        self._sps[msg.sender] = (phase_ms, off, chan, windows - 1)
        my_slot = ((phase_ms + off) % p.window_ms, chan)

        rx_db = ch.tx_power_ue_dbm - path_loss(tx_pos, truck_pos, self.b, ch)

        # Slot collision with any other active owner of the same slot.
        for other, ost in self._sps.items():
            if other == msg.sender or other not in active_positions:
                continue
            if ((ost[0] + ost[1]) % p.window_ms, ost[2]) != my_slot:
                continue
            other_db = ch.tx_power_ue_dbm - path_loss(
                active_positions[other], truck_pos, self.b, ch
            )
            if other_db < ch.noise_floor_dbm - 10.0:
                continue  # too weak to matter at the receiver
            if rx_db - other_db < p.capture_threshold_db:
                return TransmissionRecord(
                    msg.sender, msg.t_gen, LOST_COLLISION, float("nan"), self.PATH
                )

        if rx_db - ch.noise_floor_dbm < ch.sinr_threshold_db:
            return TransmissionRecord(msg.sender, msg.t_gen, LOST_SINR, float("nan"), self.PATH)
        delay_ms = p.processing_ms + off
        return TransmissionRecord(msg.sender, msg.t_gen, DELIVERED, delay_ms / 1000.0, self.PATH)
