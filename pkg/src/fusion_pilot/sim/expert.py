"""Privileged route-following autopilot used to record demonstrations."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..model import Action
from .dynamics import AGENT_PED, EGO, SimState
from .world import RoutePath

CRUISE_KMH = 35.0
TURN_KMH = 15.0


@dataclass(frozen=True)
class ExpertConfig:
    cruise_kmh: float = CRUISE_KMH
    turn_kmh: float = TURN_KMH
    lookahead_min: float = 4.0
    lookahead_gain: float = 0.25  # extra metres per m/s
    speed_gain: float = 0.4
    brake_gain: float = 0.15
    gap_min: float = 5.0
    gap_decel: float = 4.0  # comfortable braking used to size the safety gap
    corridor: float = 1.9  # half-width of the lane corridor checked for agents


def _ego_frame(state: SimState, pts):
    c, s = math.cos(state.heading), math.sin(state.heading)
    rel = np.atleast_2d(pts) - np.array([state.x, state.y])
    return rel[:, 0] * c + rel[:, 1] * s, -rel[:, 0] * s + rel[:, 1] * c


def safety_gap(speed_kmh: float, cfg: ExpertConfig = ExpertConfig()) -> float:
    v = speed_kmh / 3.6
    return cfg.gap_min + v * v / (2 * cfg.gap_decel)


def obstacle_ahead(state: SimState, path: RoutePath, s: float, cfg: ExpertConfig = ExpertConfig()) -> bool:
    """True when an agent occupies the lane corridor within the safety gap."""
    if not len(state.agents):
        return False
    gap = safety_gap(state.speed_kmh, cfg)
    fx, fy = _ego_frame(state, state.agents[:, :2])
    near = (fx > 0) & (fx < gap + EGO.length / 2)
    for k in np.nonzero(near | (np.hypot(fx, fy) < gap + 6))[0]:
        margin = cfg.corridor + (0.3 if state.agents[k, 3] == AGENT_PED else 1.0)
        if 0 < fx[k] <= gap + EGO.length / 2 and abs(fy[k]) < margin:
            return True
        # along the route, which matters inside turns where the ego frame misleads
        sa, lat = path.project(state.agents[k, :2], hint=s + gap / 2, window=gap / 2 + 2)
        if 0 < sa - s <= gap + EGO.length / 2 and abs(lat) < margin:
            return True
    return False


def expert_action(state: SimState, path: RoutePath, s: float | None = None,
                  cfg: ExpertConfig = ExpertConfig()) -> Action:
    """Pure pursuit on the lane centre with a two-level target speed."""
    if s is None:
        s, _ = path.project(state.pos)
    v = state.speed_kmh / 3.6
    look = cfg.lookahead_min + cfg.lookahead_gain * v
    target = path.point_at(s + look)
    fx, fy = _ego_frame(state, target)
    ld = max(math.hypot(fx[0], fy[0]), 1e-6)
    kappa = 2.0 * fy[0] / (ld * ld)  # left positive
    steer = float(np.clip(-kappa / EGO.curvature, -1.0, 1.0))

    if obstacle_ahead(state, path, s, cfg):
        return Action(steer, 0.0, 1.0)
    v_t = (cfg.turn_kmh if path.in_turn_zone(s) else cfg.cruise_kmh) / 3.6
    err = v_t - v
    if err >= -0.5:
        hold = EGO.drag * v_t / EGO.accel
        return Action(steer, float(np.clip(hold + cfg.speed_gain * err, 0.0, 1.0)), 0.0)
    return Action(steer, 0.0, float(np.clip(-cfg.brake_gain * err, 0.0, 1.0)))


class ExpertPolicy:
    """Policy wrapper: needs no rendered modalities, reads the privileged context."""

    modalities: tuple = ()

    def __init__(self, cfg: ExpertConfig = ExpertConfig()):
        self.cfg = cfg

    def act(self, obs, command, ctx) -> Action:
        return expert_action(ctx.state, ctx.path, ctx.progress, self.cfg)
