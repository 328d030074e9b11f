"""Column raycaster producing RGB, planar depth and 12-class semantics.

Buildings and agents are vertical boxes; the ground is classified per pixel
by the road network. Depth is the distance along the optical axis, with
``SKY_DEPTH`` for rays that hit nothing. Weather only changes colours.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import (AGENT_CAR, AGENT_VEHICLE_HEIGHT, PEDESTRIAN_HEIGHT, SimState,
                       agent_footprints)
from ..depth import semantic_remap
from .world import WorldSpec

CAMERA_HEIGHT = 1.6
CAMERA_FORWARD = 0.5
HFOV_DEG = 90.0
SKY_DEPTH = 1000.0
CAMERAS = {"center": 0.0, "left30": 30.0, "right30": -30.0}
MAX_LAYERS = 4

# 12-class source ids (see depth.SOURCE_CLASSES)
NONE, BUILDING, PEDESTRIAN, ROAD_LINE, ROAD, SIDEWALK, VEGETATION, VEHICLE, WALL = 0, 1, 4, 6, 7, 8, 9, 10, 11

_BASE = np.zeros((12, 3))
_BASE[NONE] = (135, 180, 235)
_BASE[BUILDING] = (150, 120, 100)
_BASE[PEDESTRIAN] = (220, 70, 60)
_BASE[ROAD_LINE] = (225, 225, 210)
_BASE[ROAD] = (85, 85, 90)
_BASE[SIDEWALK] = (165, 160, 150)
_BASE[VEGETATION] = (70, 125, 55)
_BASE[VEHICLE] = (40, 60, 170)
_BASE[WALL] = (120, 110, 105)


@dataclass
class CameraFrame:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float64 metres
    semantic: np.ndarray  # (H, W) uint8, 12-class

    @property
    def semantic5(self) -> np.ndarray:
        """Labels remapped onto other / road-surface / vehicle / pedestrian / lane-limits."""
        return semantic_remap(self.semantic)


def _ray_hits(origin, dirs, segs):
    """Distances (W, S) from ``origin`` along unit ``dirs`` to segments (S, 4); inf if missed,
    plus the fractional position along each segment."""
    if len(segs) == 0:
        return np.full((len(dirs), 0), np.inf), np.zeros((len(dirs), 0))
    p1 = segs[:, 0:2]
    e = segs[:, 2:4] - p1
    w = p1 - origin
    dx, dy = dirs[:, 0:1], dirs[:, 1:2]
    denom = dx * e[None, :, 1] - dy * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * dy - w[None, :, 1] * dx) / denom
    ok = (np.abs(denom) > 1e-12) & (u >= 0) & (u <= 1) & (t > 1e-6)
    return np.where(ok, t, np.inf), np.where(ok, u, 0.0)


def _scene_segments(world: WorldSpec, state: SimState):
    """(S, 4) segments, heights, classes and colour ids for everything vertical."""
    net = world.network
    walls = net.wall_segments()
    nb = len(net.buildings)
    segs = [walls[:, :4]]
    heights = [walls[:, 4]]
    cls = [np.full(len(walls), BUILDING, dtype=np.uint8)]
    # perimeter blocks (the last four) read as walls
    cls[0][(nb - 4) * 4:] = WALL
    ident = [np.repeat(np.arange(nb), 4)]
    if len(state.agents):
        polys = agent_footprints(state.agents)
        for k, ((_, _, _, kind), poly) in enumerate(zip(state.agents, polys)):
            s = np.concatenate([poly, np.roll(poly, -1, axis=0)], axis=1)
            segs.append(s)
            car = kind == AGENT_CAR
            heights.append(np.full(4, AGENT_VEHICLE_HEIGHT if car else PEDESTRIAN_HEIGHT))
            cls.append(np.full(4, VEHICLE if car else PEDESTRIAN, dtype=np.uint8))
            ident.append(np.full(4, 100 + k))
    return (np.concatenate(segs), np.concatenate(heights), np.concatenate(cls),
            np.concatenate(ident))


def render_camera(world: WorldSpec, state: SimState, yaw_offset_deg: float, size: tuple[int, int],
                  rng: np.random.Generator, scene=None) -> CameraFrame:
    """Render one pinhole camera mounted on the ego, rotated by ``yaw_offset_deg`` (left positive)."""
    w, h = size
    f = (w / 2) / math.tan(math.radians(HFOV_DEG) / 2)
    yaw = state.heading + math.radians(yaw_offset_deg)
    origin = np.array([state.x + CAMERA_FORWARD * math.cos(state.heading),
                       state.y + CAMERA_FORWARD * math.sin(state.heading)])
    xs = (np.arange(w) + 0.5 - w / 2) / f  # right positive
    alpha = np.arctan(xs)
    ang = yaw - alpha
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    cos_a = np.cos(alpha)
    m = (h / 2 - (np.arange(h) + 0.5)) / f  # vertical slope, up positive

    segs, heights, cls, ident = scene if scene is not None else _scene_segments(world, state)
    t, u = _ray_hits(origin, dirs, segs)
    order = np.argsort(t, axis=1)[:, :MAX_LAYERS]
    rows = np.arange(w)[:, None]
    t_k = t[rows, order]  # (W, K)
    u_k = u[rows, order]
    seg_k = order

    depth = np.full((h, w), SKY_DEPTH)
    sem = np.full((h, w), NONE, dtype=np.uint8)
    tex = np.zeros((h, w))
    colour_id = np.full((h, w), -1)
    assigned = np.zeros((h, w), dtype=bool)
    with np.errstate(divide="ignore"):
        z_ground = np.where(m < 0, CAMERA_HEIGHT / -m, np.inf)  # (H,)
    for k in range(t_k.shape[1]):
        tk = t_k[:, k]
        finite = np.isfinite(tk)
        if not finite.any():
            break
        zk = tk * cos_a  # planar depth of the hit
        ht = CAMERA_HEIGHT + m[:, None] * zk[None, :]  # ray height at the hit
        top = heights[seg_k[:, k]][None, :]
        vis = finite[None, :] & (ht >= 0) & (ht <= top) & (zk[None, :] < z_ground[:, None]) & ~assigned
        depth[vis] = np.broadcast_to(zk[None, :], (h, w))[vis]
        sem[vis] = np.broadcast_to(cls[seg_k[:, k]][None, :], (h, w))[vis]
        seg_len = np.linalg.norm(segs[seg_k[:, k], 2:4] - segs[seg_k[:, k], 0:2], axis=1)
        along = u_k[:, k] * seg_len
        with np.errstate(invalid="ignore"):
            pattern = (np.floor(along / 1.5) + np.floor(ht / 1.2)) % 2  # window/panel checker
        tex[vis] = pattern[vis]
        colour_id[vis] = np.broadcast_to(ident[seg_k[:, k]][None, :], (h, w))[vis]
        assigned |= vis
    ground = ~assigned & (m[:, None] < 0)
    if ground.any():
        gy, gx = np.nonzero(ground)
        zg = z_ground[gy]
        r = zg / cos_a[gx]
        pts = origin[None, :] + dirs[gx] * r[:, None]
        labels = world.network.ground_labels(pts)
        depth[gy, gx] = zg
        sem[gy, gx] = labels
        tex[gy, gx] = (np.floor(pts[:, 0] / 2.0) + np.floor(pts[:, 1] / 2.0)) % 2
    rgb = _shade(sem, depth, tex, colour_id, m, world, rng)
    return CameraFrame(rgb, depth, sem)


def _shade(sem, depth, tex, colour_id, m, world, rng):
    wp = world.weather_params
    h, w = sem.shape
    col = _BASE[sem].copy()
    # per-object hue variation
    obj = colour_id >= 0
    if obj.any():
        ids = colour_id[obj]
        var = np.stack([np.sin(ids * 1.7), np.sin(ids * 2.3 + 1), np.sin(ids * 3.1 + 2)], axis=1)
        col[obj] += 35 * var
    col *= (1.0 - 0.12 * tex)[..., None]
    road = (sem == ROAD) | (sem == ROAD_LINE)
    if wp.wet > 0:
        col[road] *= 1.0 - 0.45 * wp.wet
        # sky reflections on wet tarmac
        col[road] += wp.wet * 60 * rng.random((int(road.sum()), 1))
    # sky gradient
    sky = sem == NONE
    col[sky] *= (0.85 + 0.3 * np.clip(np.broadcast_to(m[:, None], (h, w))[sky], 0, 1))[:, None]
    col = (col - 128.0) * wp.contrast + 128.0
    col *= wp.gain * np.asarray(wp.tint)[None, None, :]
    fog = 1.0 - np.exp(-wp.fog * np.minimum(depth, 200.0))
    fog_col = 128.0 * wp.gain * np.asarray(wp.tint)
    col = col * (1 - fog[..., None]) + fog_col[None, None, :] * fog[..., None]
    if wp.rain > 0:
        streaks = rng.random((h, w)) < wp.rain
        streaks |= np.roll(streaks, 1, axis=0)
        col[streaks] = col[streaks] * 0.5 + 100.0
    col += rng.normal(0.0, wp.noise, col.shape)
    return np.clip(np.round(col), 0, 255).astype(np.uint8)


def render_cameras(world: WorldSpec, state: SimState, size: tuple[int, int], seed_seq,
                   cameras=tuple(CAMERAS)) -> dict:
    """Render the requested cameras; noise streams derive from ``seed_seq``."""
    scene = _scene_segments(world, state)
    out = {}
    for i, name in enumerate(cameras):
        rng = np.random.default_rng([*seed_seq, i])
        out[name] = render_camera(world, state, CAMERAS[name], size, rng, scene)
    return out
