"""Closed-loop episode runner."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..depth import PROFILES, SOURCE_RESOLUTION
from ..model import Command, Observation
from ..sensors import depth_to_png_units, png_units_to_depth, process_views
from .dynamics import AgentScript, InfractionEvent, SimState, detect_infractions, initial_state, step
from .render import render_cameras
from .world import TASKS, WEATHERS, EpisodeSpec, RoutePath, build_path, shortest_route

CONTROL_HZ = 10.0
GOAL_RADIUS = 3.0
REPLAN_OFFSET = 5.0  # metres off the planned lane centre before a new route is computed
REPLAN_RETRY = 10  # steps between attempts when off-road


@dataclass
class DriveContext:
    """What a policy may look at; learned policies use only ``observation`` and ``command``."""

    state: SimState
    path: RoutePath
    progress: float
    command: Command
    observation: Observation | None


@dataclass
class EpisodeResult:
    task: str
    town: int
    weather: str
    index: int
    seed: int
    success: bool
    reason: str  # goal | timeout | policy-error
    elapsed: float
    driven_km: float
    route_km: float
    replans: int
    infractions: list = field(default_factory=list)
    diagnostic: str | None = None

    def count(self, kind: str) -> int:
        return sum(1 for e in self.infractions if e.kind == kind)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["infractions"] = [e.to_dict() for e in self.infractions]
        return d

    @classmethod
    def from_dict(cls, d) -> "EpisodeResult":
        d = dict(d)
        d["infractions"] = [InfractionEvent(e["kind"], e["timestamp"], tuple(e["position"]))
                            for e in d.get("infractions", [])]
        return cls(**d)


def episode_seed(seed: int, ep: EpisodeSpec) -> list:
    return [int(seed), ep.town, TASKS.index(ep.task), WEATHERS.index(ep.weather), ep.index]


def replan(net, state: SimState, goal_nodes, goal_along) -> tuple[list, float] | None:
    """Shortest route from the segment under the ego to the goal segment."""
    q = net.lane_query(state.pos, state.heading)
    if q is None:
        return None
    e, fwd, _, _ = q
    a, b = net.edges[e] if fwd else net.edges[e][::-1]
    length = net.edge_length(a, b)
    along = float(np.dot(state.pos - net.nodes[a], net.direction(a, b)))
    along = float(np.clip(along, 1.0, max(length - 14.0, 1.0)))
    goal = tuple(goal_nodes)
    if (a, b) == goal and along < goal_along - GOAL_RADIUS:
        return [a, b], along
    best = None
    for c in sorted(net.adj[b]):
        if c == a:
            continue
        r = shortest_route(net, (b, c), goal)
        if r is None:
            continue
        n = [a] + r
        total = sum(net.edge_length(n[i], n[i + 1]) for i in range(len(n) - 1))
        if best is None or total < best[0]:
            best = (total, n)
    if best is None:
        return None
    return best[1], along


def run_episode(policy, ep: EpisodeSpec, seed: int = 0, profile: str = "desk",
                dt: float = 1.0 / CONTROL_HZ, time_budget: float | None = None,
                record=None) -> EpisodeResult:
    """Drive ``ep`` with ``policy`` until the goal is reached or time runs out.

    ``policy.act(obs, command, ctx)`` is called once per control step.
    ``record``, when given, is called as ``record(step, ctx, action, frames)``
    before the action is applied.
    """
    world = ep.world(seed)
    net = world.network
    agents = AgentScript(world) if world.dynamic else None
    path = ep.path()
    goal_nodes = (ep.nodes[-2], ep.nodes[-1])
    goal = path.point_at(path.length)
    budget = ep.time_budget if time_budget is None else time_budget
    n_steps = int(math.floor(budget / dt + 1e-9))
    state = initial_state(net, ep.nodes, ep.start_along, agents)
    mods = tuple(getattr(policy, "modalities", ()))
    src = SOURCE_RESOLUTION[profile]
    size = PROFILES[profile]
    base_seed = episode_seed(seed, ep)
    s_hint = 0.0
    replans = 0
    retry_at = 0
    events: list = []

    def result(success, reason, diag=None):
        return EpisodeResult(ep.task, ep.town, ep.weather, ep.index, seed, success, reason, state.t,
                             state.driven_km, path_km, replans, events, diag)

    path_km = path.length / 1000.0
    for k in range(n_steps):
        if np.hypot(*(state.pos - goal)) < GOAL_RADIUS:
            return result(True, "goal")
        s, lat = path.project(state.pos, hint=s_hint, window=15.0)
        if abs(lat) > REPLAN_OFFSET and k >= retry_at:
            plan = replan(net, state, goal_nodes, ep.goal_along)
            if plan is None:
                retry_at = k + REPLAN_RETRY
            else:
                nodes, along = plan
                path = build_path(net, nodes, along, ep.goal_along)
                replans += 1
                s, lat = path.project(state.pos)
        s_hint = s
        command = path.command_at(s)
        frames = None
        obs = None
        if mods or record is not None:
            cams = ("center", "left30", "right30") if record is not None else ("center",)
            frames = render_cameras(world, state, src, [*base_seed, k], cams)
        if mods:
            c = frames["center"]
            depth_m = png_units_to_depth(depth_to_png_units(c.depth))
            obs = Observation(process_views(c.rgb, depth_m, c.semantic, size=size, modalities=mods),
                              state.speed_kmh)
        ctx = DriveContext(state, path, s, command, obs)
        try:
            action = policy.act(obs, command, ctx)
        except Exception as exc:  # a broken policy fails the episode, it does not crash the run
            return result(False, "policy-error", f"{type(exc).__name__}: {exc}")
        if record is not None:
            record(k, ctx, action, frames)
        nxt = step(state, action, dt, agents)
        events.extend(detect_infractions(state, nxt, world))
        state = nxt
    if np.hypot(*(state.pos - goal)) < GOAL_RADIUS:
        return result(True, "goal")
    return result(False, "timeout")


class ModelPolicy:
    """Adapter exposing a CIL model through the episode policy interface."""

    def __init__(self, model):
        from ..model import modalities

        self.model = model
        self.modalities = modalities(model.cfg.fusion)

    def act(self, obs, command, ctx=None):
        return self.model.act(obs, command)


class ConstantPolicy:
    modalities: tuple = ()

    def __init__(self, action):
        self.action = action

    def act(self, obs, command, ctx=None):
        return self.action
