"""Planar ego kinematics, scripted agents and infraction detection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..model import Action
from .world import (HALF_WIDTH, LANE_OFFSET, SIDEWALK, RoadNetwork, WorldSpec, build_path,
                    make_town)

DYNAMICS_VERSION = 1


@dataclass(frozen=True)
class VehicleParams:
    accel: float = 3.5  # m/s^2 at full throttle
    brake: float = 8.0  # m/s^2 at full brake
    drag: float = 0.1  # 1/s, linear in speed
    curvature: float = 0.35  # 1/m at |steer| = 1
    length: float = 4.5
    width: float = 1.8
    version: int = DYNAMICS_VERSION


EGO = VehicleParams()
AGENT_VEHICLE_SIZE = (4.5, 2.0)
PEDESTRIAN_SIZE = (0.6, 0.6)
AGENT_VEHICLE_HEIGHT = 1.5
PEDESTRIAN_HEIGHT = 1.8

INFRACTION_KINDS = ("sidewalk", "opposite-lane", "collision-pedestrian",
                    "collision-vehicle", "collision-static")


@dataclass(frozen=True)
class InfractionEvent:
    kind: str
    timestamp: float
    position: tuple

    def to_dict(self):
        return {"kind": self.kind, "timestamp": self.timestamp, "position": list(self.position)}


@dataclass
class SimState:
    x: float
    y: float
    heading: float  # radians, counter-clockwise from +x
    speed_kmh: float = 0.0
    t: float = 0.0
    driven_km: float = 0.0
    agents: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))  # x, y, heading, kind
    infractions: list = field(default_factory=list)
    flags: dict | None = None  # violation flags, filled lazily

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])


# ---------------------------------------------------------------- agents

AGENT_CAR, AGENT_PED = 0.0, 1.0


class AgentScript:
    """Agents whose poses are pure functions of time.

    Vehicles loop around city blocks at constant speed; pedestrians either
    pace a sidewalk or shuttle across the road.
    """

    def __init__(self, world: WorldSpec):
        self.world = world
        net = world.network
        rng = np.random.default_rng([world.town, world.seed, 7])
        self.loops = []
        blocks = _full_blocks(net)
        for _ in range(world.n_vehicles):
            if not blocks:
                break
            cyc = list(blocks[rng.integers(len(blocks))])
            if rng.random() < 0.5:
                cyc = cyc[::-1]
            path = build_path(net, cyc + [cyc[0]], 12.0, 0.0, closed=True)
            self.loops.append((path, float(rng.uniform(0, path.length)), float(rng.uniform(15, 25) / 3.6)))
        self.peds = []
        for _ in range(world.n_pedestrians):
            e = int(rng.integers(len(net.edges)))
            crossing = bool(rng.random() < 0.4)
            self.peds.append((e, crossing, float(rng.uniform(10, net.seg_len[e] - 10)),
                              float(rng.choice([-1.0, 1.0])), float(rng.uniform(0.8, 1.6)),
                              float(rng.uniform(0, 60))))

    def at(self, t: float) -> np.ndarray:
        net = self.world.network
        rows = []
        for path, s0, v in self.loops:
            s = (s0 + v * t) % path.length
            p = path.point_at(s)
            rows.append((p[0], p[1], path.heading_at(s), AGENT_CAR))
        for e, crossing, along, side, speed, phase in self.peds:
            a = net.seg_a[e]
            d = net.seg_dir[e]
            left = np.array([-d[1], d[0]])
            if crossing:
                span = 2 * (HALF_WIDTH + 2.0)
                # walk across, wait 20 s, walk back, wait 20 s
                period = 2 * span / speed + 40.0
                u = (t + phase) % period
                leg = span / speed
                if u < leg:
                    off = -side * (HALF_WIDTH + 2.0) + side * speed * u
                    hd = side
                elif u < leg + 20.0:
                    off, hd = side * (HALF_WIDTH + 2.0), side
                elif u < 2 * leg + 20.0:
                    off = side * (HALF_WIDTH + 2.0) - side * speed * (u - leg - 20.0)
                    hd = -side
                else:
                    off, hd = -side * (HALF_WIDTH + 2.0), -side
                p = a + d * along + left * off
                heading = math.atan2(left[1] * hd, left[0] * hd)
            else:
                lo, hi = 8.0, net.seg_len[e] - 8.0
                span = hi - lo
                u = (t * speed + phase * speed) % (2 * span)
                pos = lo + (u if u < span else 2 * span - u)
                p = a + d * pos + left * side * (HALF_WIDTH + SIDEWALK / 2)
                sgn = 1.0 if u < span else -1.0
                heading = math.atan2(d[1] * sgn, d[0] * sgn)
            rows.append((p[0], p[1], heading, AGENT_PED))
        return np.array(rows, dtype=float).reshape(-1, 4)


def _full_blocks(net: RoadNetwork):
    """Grid cells whose four bounding edges all exist, as node cycles."""
    edges = set(net.edges)
    has = lambda a, b: (min(a, b), max(a, b)) in edges  # noqa: E731
    out = []
    xs = sorted(set(np.round(net.nodes[:, 0], 6)))
    ys = sorted(set(np.round(net.nodes[:, 1], 6)))
    lookup = {(round(x, 6), round(y, 6)): i for i, (x, y) in enumerate(net.nodes)}
    for i in range(len(xs) - 1):
        for j in range(len(ys) - 1):
            a = lookup[(xs[i], ys[j])]
            b = lookup[(xs[i + 1], ys[j])]
            c = lookup[(xs[i + 1], ys[j + 1])]
            d = lookup[(xs[i], ys[j + 1])]
            if has(a, b) and has(b, c) and has(c, d) and has(d, a):
                # counter-clockwise order drives with left turns; reversed gives right turns
                out.append((a, b, c, d))
    return out


def agent_footprints(agents: np.ndarray):
    out = []
    for x, y, h, kind in agents:
        size = AGENT_VEHICLE_SIZE if kind == AGENT_CAR else PEDESTRIAN_SIZE
        out.append(box_corners(x, y, h, *size))
    return out


# ---------------------------------------------------------------- ego motion


def _longitudinal(v0: float, a: float, c: float, dt: float):
    """Exact solution of dv/dt = a - c v with v clamped at 0. Returns (v1, distance)."""
    vinf = a / c
    if v0 <= 0.0 and a <= 0.0:
        return 0.0, 0.0
    e = math.exp(-c * dt)
    v1 = vinf + (v0 - vinf) * e
    if v1 >= 0.0:
        return v1, vinf * dt + (v0 - vinf) * (1.0 - e) / c
    t0 = math.log((v0 - vinf) / -vinf) / c
    e0 = math.exp(-c * t0)
    return 0.0, max(vinf * t0 + (v0 - vinf) * (1.0 - e0) / c, 0.0)


def step(state: SimState, a: Action, dt: float, agents: AgentScript | None = None,
         params: VehicleParams = EGO) -> SimState:
    """Advance the ego by ``dt`` seconds under constant controls.

    Longitudinal: dv/dt = throttle*accel - brake*brake_decel - drag*v, v >= 0.
    Lateral: constant path curvature ``-steer * curvature`` (positive steer
    turns right). Both are integrated in closed form, so the travelled arc
    length equals the integral of speed exactly.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    steer = min(max(float(a.steer), -1.0), 1.0)
    thr = min(max(float(a.throttle), 0.0), 1.0)
    brk = min(max(float(a.brake), 0.0), 1.0)
    acc = thr * params.accel - brk * params.brake
    v1, dist = _longitudinal(state.speed_kmh / 3.6, acc, params.drag, dt)
    kappa = -steer * params.curvature
    th0 = state.heading
    if abs(kappa) < 1e-12:
        x = state.x + dist * math.cos(th0)
        y = state.y + dist * math.sin(th0)
        th1 = th0
    else:
        th1 = th0 + kappa * dist
        x = state.x + (math.sin(th1) - math.sin(th0)) / kappa
        y = state.y - (math.cos(th1) - math.cos(th0)) / kappa
    if not -math.pi <= th1 < math.pi:
        th1 = (th1 + math.pi) % (2 * math.pi) - math.pi
    t = state.t + dt
    return SimState(x, y, th1, v1 * 3.6, t, state.driven_km + dist / 1000.0,
                    agents.at(t) if agents is not None else state.agents,
                    list(state.infractions))


# ---------------------------------------------------------------- geometry helpers


def box_corners(x, y, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2, width / 2
    loc = np.array([(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)])
    rot = np.array([[c, -s], [s, c]])
    return loc @ rot.T + np.array([x, y])


def _axes(poly):
    edges = np.roll(poly, -1, axis=0) - poly
    n = np.stack([-edges[:, 1], edges[:, 0]], axis=1)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def polygons_overlap(p, q) -> bool:
    """Separating-axis test for two convex polygons."""
    for axes in (_axes(p), _axes(q)):
        for ax in axes:
            a = p @ ax
            b = q @ ax
            if a.max() < b.min() or b.max() < a.min():
                return False
    return True


def ego_footprint(state: SimState, params: VehicleParams = EGO) -> np.ndarray:
    return box_corners(state.x, state.y, state.heading, params.length, params.width)


# ---------------------------------------------------------------- infractions


def violation_flags(state: SimState, world: WorldSpec) -> dict:
    if state.flags is not None:
        return state.flags
    net = world.network
    fp = ego_footprint(state)
    flags = dict.fromkeys(INFRACTION_KINDS, False)
    flags["sidewalk"] = not bool(net.drivable(fp).all())
    q = net.lane_query(state.pos, state.heading)
    flags["opposite-lane"] = bool(q is not None and not q[3] and q[2] > 0.0)
    lo, hi = fp.min(axis=0), fp.max(axis=0)
    b = net.buildings
    near = (b[:, 0] <= hi[0]) & (b[:, 2] >= lo[0]) & (b[:, 1] <= hi[1]) & (b[:, 3] >= lo[1])
    for x0, y0, x1, y1 in b[near]:
        if polygons_overlap(fp, np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])):
            flags["collision-static"] = True
            break
    for (ax, ay, ah, kind), poly in zip(state.agents, agent_footprints(state.agents)):
        if abs(ax - state.x) > 8 or abs(ay - state.y) > 8:
            continue
        if polygons_overlap(fp, poly):
            flags["collision-pedestrian" if kind == AGENT_PED else "collision-vehicle"] = True
    state.flags = flags
    return flags


def detect_infractions(prev: SimState, nxt: SimState, world: WorldSpec) -> list:
    """Events for violations that start between ``prev`` and ``nxt`` (rising edges)."""
    f0 = violation_flags(prev, world)
    f1 = violation_flags(nxt, world)
    return [InfractionEvent(k, nxt.t, (nxt.x, nxt.y)) for k in INFRACTION_KINDS if f1[k] and not f0[k]]


def count_violation_intervals(flags_seq) -> dict:
    """Brute-force recount: number of maximal True runs per kind."""
    out = dict.fromkeys(INFRACTION_KINDS, 0)
    prev = dict.fromkeys(INFRACTION_KINDS, False)
    for f in flags_seq:
        for k in INFRACTION_KINDS:
            if f[k] and not prev[k]:
                out[k] += 1
        prev = f
    return out


def initial_state(net: RoadNetwork, nodes, start_along: float, agents: AgentScript | None = None,
                  speed_kmh: float = 0.0) -> SimState:
    a, b = nodes[0], nodes[1]
    d = net.direction(a, b)
    p = net.nodes[a] + d * start_along + np.array([d[1], -d[0]]) * LANE_OFFSET
    st = SimState(float(p[0]), float(p[1]), math.atan2(d[1], d[0]), speed_kmh)
    if agents is not None:
        st.agents = agents.at(0.0)
    return st


def with_pose(state: SimState, **kw) -> SimState:
    st = replace(state, **kw)
    st.flags = None
    return st


__all__ = ["VehicleParams", "SimState", "InfractionEvent", "AgentScript", "step", "detect_infractions",
           "violation_flags", "count_violation_intervals", "initial_state", "make_town"]
