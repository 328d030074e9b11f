"""Procedural two-lane grid towns, routes and episode suites.

Geometry (metres): every road has one lane per direction. Lane centres sit
``LANE_OFFSET`` right of the road centreline, the kerb is at ``HALF_WIDTH``,
sidewalks run ``SIDEWALK`` beyond the kerb and buildings start at
``SETBACK``. Kerb corners at junctions are rounded with radius ``CORNER_R``
so that right turns (radius ``R_RIGHT``) and left turns (radius ``R_LEFT``)
share their arc centre with the kerb arc.
"""

from __future__ import annotations

import functools
import heapq
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..model import Command

WORLD_FORMAT_VERSION = 1

LANE_OFFSET = 2.0
HALF_WIDTH = 4.0
SIDEWALK = 3.0
SETBACK = 9.0
CORNER_R = 4.0
R_RIGHT = 6.0
R_LEFT = 10.0
MARKING_HALF = 0.25
PATH_STEP = 0.5
GROUND_RES = 0.1

WEATHERS = ("clear-noon", "clear-after-rain", "heavy-rain-noon", "clear-sunset",
            "wet-cloudy-noon", "soft-rainy-sunset")
TRAIN_WEATHERS = WEATHERS[:4]
NEW_WEATHERS = WEATHERS[4:]

# (rows, cols, spacing, edges to remove, layout seed)
TOWN_LAYOUTS = {1: (4, 4, 48.0, 3, 11), 2: (3, 4, 40.0, 2, 23)}


def _left(d):
    return np.array([-d[1], d[0]])


def _right(d):
    return np.array([d[1], -d[0]])


@dataclass
class RoadNetwork:
    town: int
    nodes: np.ndarray  # (V, 2)
    edges: list  # undirected (a, b), a < b
    buildings: np.ndarray  # (B, 4) xmin, ymin, xmax, ymax
    heights: np.ndarray  # (B,)

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.edges = [tuple(int(v) for v in e) for e in self.edges]
        self.buildings = np.asarray(self.buildings, dtype=float).reshape(-1, 4)
        self.heights = np.asarray(self.heights, dtype=float)
        self.adj = {v: [] for v in range(len(self.nodes))}
        for a, b in self.edges:
            self.adj[a].append(b)
            self.adj[b].append(a)
        a = self.nodes[[e[0] for e in self.edges]]
        b = self.nodes[[e[1] for e in self.edges]]
        self.seg_a = a
        self.seg_len = np.linalg.norm(b - a, axis=1)
        self.seg_dir = (b - a) / self.seg_len[:, None]
        self._fillets = self._build_fillets()
        self._walls = self._building_walls()

    # ------------------------------------------------------------ topology

    def degree(self, v) -> int:
        return len(self.adj[v])

    def is_intersection(self, v) -> bool:
        return self.degree(v) >= 3

    def edge_length(self, a, b) -> float:
        return float(np.linalg.norm(self.nodes[b] - self.nodes[a]))

    def direction(self, a, b) -> np.ndarray:
        d = self.nodes[b] - self.nodes[a]
        return d / np.linalg.norm(d)

    def connected(self) -> bool:
        seen, stack = {0}, [0]
        while stack:
            v = stack.pop()
            for u in self.adj[v]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        return len(seen) == len(self.nodes)

    def total_length(self) -> float:
        return float(self.seg_len.sum())

    # ------------------------------------------------------------ surfaces

    def _build_fillets(self):
        """Rounded kerb corners: (centre, quadrant dirs) per node and arm pair."""
        out = []
        for v in range(len(self.nodes)):
            arms = [self.direction(v, u) for u in self.adj[v]]
            for i in range(len(arms)):
                for j in range(i + 1, len(arms)):
                    if abs(float(np.dot(arms[i], arms[j]))) < 1e-9:
                        out.append((self.nodes[v], arms[i], arms[j]))
        if not out:
            return np.zeros((0, 6))
        return np.array([np.concatenate([c, d1, d2]) for c, d1, d2 in out])

    def _local(self, pts):
        rel = pts[:, None, :] - self.seg_a[None, :, :]
        along = rel[..., 0] * self.seg_dir[None, :, 0] + rel[..., 1] * self.seg_dir[None, :, 1]
        perp = self.seg_dir[None, :, 0] * rel[..., 1] - self.seg_dir[None, :, 1] * rel[..., 0]
        return along, perp

    def _in_fillet(self, pts):
        if not len(self._fillets):
            return np.zeros(len(pts), dtype=bool)
        c = self._fillets[:, 0:2]
        d1 = self._fillets[:, 2:4]
        d2 = self._fillets[:, 4:6]
        rel = pts[:, None, :] - c[None]
        u = (rel * d1[None]).sum(-1)
        w = (rel * d2[None]).sum(-1)
        lo, hi = HALF_WIDTH, HALF_WIDTH + CORNER_R
        in_sq = (u >= lo) & (u <= hi) & (w >= lo) & (w <= hi)
        outside_arc = (u - hi) ** 2 + (w - hi) ** 2 >= CORNER_R ** 2
        return np.any(in_sq & outside_arc, axis=1)

    def drivable(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        along, perp = self._local(pts)
        in_rect = (np.abs(perp) <= HALF_WIDTH) & (along >= -HALF_WIDTH) & \
                  (along <= self.seg_len[None] + HALF_WIDTH)
        return np.any(in_rect, axis=1) | self._in_fillet(pts)

    def classify_ground(self, pts) -> np.ndarray:
        """12-class source labels for ground points (road, road-line, sidewalk, vegetation)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        along, perp = self._local(pts)
        ap = np.abs(perp)
        L = self.seg_len[None]
        in_rect = (ap <= HALF_WIDTH) & (along >= -HALF_WIDTH) & (along <= L + HALF_WIDTH)
        road = np.any(in_rect, axis=1) | self._in_fillet(pts)
        marking = np.any((ap <= MARKING_HALF) & (along >= HALF_WIDTH + CORNER_R) &
                         (along <= L - HALF_WIDTH - CORNER_R), axis=1)
        ext = HALF_WIDTH + SIDEWALK
        walk = np.any((ap <= ext) & (along >= -ext) & (along <= L + ext), axis=1)
        labels = np.full(len(pts), 9, dtype=np.uint8)  # vegetation
        labels[walk] = 8
        labels[road] = 7
        labels[marking] = 6
        return labels

    def ground_labels(self, pts) -> np.ndarray:
        """Raster approximation of :meth:`classify_ground` (``GROUND_RES`` cells), for rendering."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if not hasattr(self, "_ground"):
            self._ground = self._ground_raster()
        origin, grid = self._ground
        ij = np.floor((pts - origin) / GROUND_RES).astype(np.int64)
        h, w = grid.shape
        inside = (ij[:, 0] >= 0) & (ij[:, 0] < w) & (ij[:, 1] >= 0) & (ij[:, 1] < h)
        out = np.full(len(pts), 9, dtype=np.uint8)
        out[inside] = grid[ij[inside, 1], ij[inside, 0]]
        return out

    def _ground_raster(self):
        """Fill the label grid with axis-aligned rectangles in ``classify_ground`` priority order."""
        ext = HALF_WIDTH + SIDEWALK + 1.0
        lo = self.nodes.min(axis=0) - ext
        hi = self.nodes.max(axis=0) + ext
        w, h = (np.ceil((hi - lo) / GROUND_RES).astype(int))
        grid = np.full((h, w), 9, dtype=np.uint8)
        if not np.all(np.isclose(np.abs(self.seg_dir).max(axis=1), 1.0)):
            xs = lo[0] + (np.arange(w) + 0.5) * GROUND_RES
            for r in range(h):
                y = lo[1] + (r + 0.5) * GROUND_RES
                grid[r] = self.classify_ground(np.stack([xs, np.full(w, y)], axis=1))
            return lo, grid

        def span(a, b, axis):
            i0 = int(np.ceil((a - lo[axis]) / GROUND_RES - 0.5))
            i1 = int(np.floor((b - lo[axis]) / GROUND_RES - 0.5))
            return max(i0, 0), max(i1 + 1, 0)

        def fill(label, along0, along1, half):
            for a, d, L in zip(self.seg_a, self.seg_dir, self.seg_len):
                p0 = a + d * along0 + np.array([-d[1], d[0]]) * half
                p1 = a + d * (L + along1) - np.array([-d[1], d[0]]) * half
                x0, x1 = sorted((p0[0], p1[0]))
                y0, y1 = sorted((p0[1], p1[1]))
                c0, c1 = span(x0, x1, 0)
                r0, r1 = span(y0, y1, 1)
                grid[r0:r1, c0:c1] = label

        fill(8, -ext + 1.0, ext - 1.0, HALF_WIDTH + SIDEWALK)
        fill(7, -HALF_WIDTH, HALF_WIDTH, HALF_WIDTH)
        span_hi = HALF_WIDTH + CORNER_R
        for v in range(len(self.nodes)):
            c = self.nodes[v]
            c0, c1 = span(c[0] - span_hi, c[0] + span_hi, 0)
            r0, r1 = span(c[1] - span_hi, c[1] + span_hi, 1)
            xs = lo[0] + (np.arange(c0, c1) + 0.5) * GROUND_RES
            ys = lo[1] + (np.arange(r0, r1) + 0.5) * GROUND_RES
            pts = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
            block = grid[r0:r1, c0:c1]
            block[self._in_fillet(pts).reshape(block.shape)] = 7
        fill(6, HALF_WIDTH + CORNER_R, -(HALF_WIDTH + CORNER_R), MARKING_HALF)
        return lo, grid

    def _building_walls(self):
        segs = []
        for (x0, y0, x1, y1), h in zip(self.buildings, self.heights):
            corners = [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
            for k in range(4):
                segs.append((*corners[k], *corners[(k + 1) % 4], h))
        return np.array(segs)

    def wall_segments(self) -> np.ndarray:
        """(S, 5) array: x1, y1, x2, y2, height for every building face."""
        return self._walls

    # ------------------------------------------------------------ lanes

    def lane_query(self, p, heading):
        """Locate a point on the road network.

        Returns ``(edge_index, forward, signed_offset, in_junction)`` where
        ``forward`` says whether the heading agrees with the edge direction and
        ``signed_offset`` is the lateral distance left of the centreline in
        the travel direction (own lane centre at ``-LANE_OFFSET``). Returns
        None off-road.
        """
        p = np.asarray(p, dtype=float)[None]
        along, perp = self._local(p)
        along, perp = along[0], perp[0]
        inside = (np.abs(perp) <= HALF_WIDTH) & (along >= -HALF_WIDTH) & \
                 (along <= self.seg_len + HALF_WIDTH)
        if not inside.any():
            return None
        cand = np.nonzero(inside)[0]
        hd = np.array([np.cos(heading), np.sin(heading)])
        align = np.abs(self.seg_dir[cand] @ hd)
        e = int(cand[np.argmax(align)])
        fwd = bool(self.seg_dir[e] @ hd >= 0)
        offset = perp[e] if fwd else -perp[e]
        junction = bool(along[e] < HALF_WIDTH + CORNER_R or along[e] > self.seg_len[e] - HALF_WIDTH - CORNER_R)
        return e, fwd, float(offset), junction

    def to_dict(self) -> dict:
        return {"town": self.town, "nodes": self.nodes.tolist(), "edges": [list(e) for e in self.edges],
                "buildings": self.buildings.tolist(), "heights": self.heights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "RoadNetwork":
        return cls(d["town"], d["nodes"], d["edges"], d["buildings"], d["heights"])


@functools.lru_cache(maxsize=None)
def make_town(town: int) -> RoadNetwork:
    if town not in TOWN_LAYOUTS:
        raise ValueError(f"unknown town {town}")
    rows, cols, spacing, n_remove, seed = TOWN_LAYOUTS[town]
    rng = np.random.default_rng(seed)
    nodes = np.array([(c * spacing, r * spacing) for r in range(rows) for c in range(cols)])
    idx = lambda r, c: r * cols + c  # noqa: E731
    edges = []
    for r in range(rows):
        for c in range(cols):
            if c + 1 < cols:
                edges.append((idx(r, c), idx(r, c + 1)))
            if r + 1 < rows:
                edges.append((idx(r, c), idx(r + 1, c)))
    removed = 0
    candidates = list(edges)
    for k in rng.permutation(len(edges)).tolist():
        if removed >= n_remove:
            break
        cut = candidates[k]
        rest = [e for e in edges if e != cut]
        deg = np.bincount(np.array(rest).ravel(), minlength=len(nodes))
        # no dead ends: every node keeps a way in and a different way out
        if deg.min() < 2:
            continue
        if not RoadNetwork(town, nodes, rest, np.zeros((0, 4)), np.zeros(0)).connected():
            continue
        edges = rest
        removed += 1
    # buildings: one block per grid cell, inset from the surrounding centrelines
    hrng = np.random.default_rng(seed + 1)
    blocks, heights = [], []
    for r in range(rows - 1):
        for c in range(cols - 1):
            x0, y0 = c * spacing + SETBACK, r * spacing + SETBACK
            x1, y1 = (c + 1) * spacing - SETBACK, (r + 1) * spacing - SETBACK
            blocks.append((x0, y0, x1, y1))
            heights.append(hrng.uniform(6.0, 14.0))
    xmax, ymax = (cols - 1) * spacing, (rows - 1) * spacing
    t = 10.0
    s = SETBACK
    for rect in [(-s - t, -s - t, xmax + s + t, -s), (-s - t, ymax + s, xmax + s + t, ymax + s + t),
                 (-s - t, -s, -s, ymax + s), (xmax + s, -s, xmax + s + t, ymax + s)]:
        blocks.append(rect)
        heights.append(hrng.uniform(8.0, 12.0))
    return RoadNetwork(town, nodes, edges, np.array(blocks), np.array(heights))


# ---------------------------------------------------------------- weather / world


@dataclass(frozen=True)
class Weather:
    name: str
    gain: float
    contrast: float
    tint: tuple
    noise: float
    fog: float
    wet: float  # 0..1 darkening/reflection of the road
    rain: float  # streak density


WEATHER_TABLE = {
    "clear-noon": Weather("clear-noon", 1.00, 1.00, (1.00, 1.00, 1.00), 2.0, 0.002, 0.0, 0.0),
    "clear-after-rain": Weather("clear-after-rain", 0.95, 1.05, (0.95, 1.00, 1.08), 3.0, 0.004, 0.5, 0.0),
    "heavy-rain-noon": Weather("heavy-rain-noon", 0.75, 0.70, (0.92, 0.95, 1.05), 8.0, 0.012, 0.7, 0.04),
    "clear-sunset": Weather("clear-sunset", 0.85, 0.95, (1.25, 0.90, 0.70), 3.0, 0.004, 0.0, 0.0),
    "wet-cloudy-noon": Weather("wet-cloudy-noon", 0.70, 0.55, (0.85, 0.95, 1.15), 9.0, 0.010, 0.9, 0.02),
    "soft-rainy-sunset": Weather("soft-rainy-sunset", 0.60, 0.50, (1.35, 0.80, 0.55), 10.0, 0.012, 0.8, 0.04),
}


@dataclass
class WorldSpec:
    town: int
    weather: str
    n_vehicles: int = 0
    n_pedestrians: int = 0
    seed: int = 0
    version: int = WORLD_FORMAT_VERSION

    def __post_init__(self):
        if self.weather not in WEATHER_TABLE:
            raise ValueError(f"unknown weather {self.weather!r}")
        make_town(self.town)

    @property
    def network(self) -> RoadNetwork:
        return make_town(self.town)

    @property
    def weather_params(self) -> Weather:
        return WEATHER_TABLE[self.weather]

    @property
    def dynamic(self) -> bool:
        return self.n_vehicles + self.n_pedestrians > 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("version", WORLD_FORMAT_VERSION) != WORLD_FORMAT_VERSION:
            raise ValueError(f"unsupported world format version {d.get('version')}")
        return cls(**d)


# ---------------------------------------------------------------- routes


def _line_intersection(p1, d1, p2, d2):
    m = np.array([d1, -d2]).T
    t = np.linalg.solve(m, p2 - p1)
    return p1 + t[0] * d1


def turn_kind(d_in, d_out) -> str:
    z = d_in[0] * d_out[1] - d_in[1] * d_out[0]
    if abs(z) < 1e-9:
        if np.dot(d_in, d_out) < 0:
            return "uturn"
        return "straight"
    return "left" if z > 0 else "right"


_TURN_COMMAND = {"left": Command.TURN_LEFT, "right": Command.TURN_RIGHT,
                 "straight": Command.GO_STRAIGHT}

# command window around a junction, metres of path before / after the node
COMMAND_LEAD = 18.0
COMMAND_TAIL = 4.0
TURN_SLOW_LEAD = 12.0


@dataclass
class RoutePath:
    """Dense lane-centre polyline for a node route plus its annotations."""

    nodes: list
    points: np.ndarray
    s: np.ndarray
    heading: np.ndarray
    junctions: list  # dicts: node, s_node, s_enter, s_exit, kind, command (or None)

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def point_at(self, s) -> np.ndarray:
        s = min(max(float(s), 0.0), self.length)
        return np.array([np.interp(s, self.s, self.points[:, 0]), np.interp(s, self.s, self.points[:, 1])])

    def heading_at(self, s) -> float:
        i = int(np.clip(np.searchsorted(self.s, s), 0, len(self.s) - 1))
        return float(self.heading[i])

    def project(self, p, hint=None, window=30.0):
        """Arc length and signed lateral offset (left positive) of the closest path point."""
        p = np.asarray(p, dtype=float)
        if hint is None:
            lo, hi = 0, len(self.s)
        else:
            lo = int(np.searchsorted(self.s, hint - window))
            hi = int(np.searchsorted(self.s, hint + window)) + 1
        seg_p = self.points[lo:hi]
        if len(seg_p) < 2:
            lo, hi = 0, len(self.s)
            seg_p = self.points
        a, b = seg_p[:-1], seg_p[1:]
        ab = b - a
        ln2 = np.maximum((ab ** 2).sum(1), 1e-12)
        t = np.clip(((p - a) * ab).sum(1) / ln2, 0, 1)
        proj = a + t[:, None] * ab
        d2 = ((proj - p) ** 2).sum(1)
        k = int(np.argmin(d2))
        s = self.s[lo + k] + t[k] * np.sqrt(ln2[k])
        d = ab[k] / np.sqrt(ln2[k])
        lat = d[0] * (p[1] - proj[k][1]) - d[1] * (p[0] - proj[k][0])
        return float(s), float(lat)

    def command_at(self, s) -> Command:
        for j in self.junctions:
            if j["command"] is not None and j["s_node"] - COMMAND_LEAD <= s <= j["s_exit"] + COMMAND_TAIL:
                return Command(j["command"])
        return Command.CONTINUE

    def in_turn_zone(self, s) -> bool:
        for j in self.junctions:
            if j["kind"] in ("left", "right") and j["s_enter"] - TURN_SLOW_LEAD <= s <= j["s_exit"]:
                return True
        return False

    def commands(self) -> list:
        return [Command(j["command"]) for j in self.junctions if j["command"] is not None]


def _resample(poly, step=PATH_STEP):
    poly = np.asarray(poly, dtype=float)
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-9])
    poly = poly[keep]
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    n = max(int(np.ceil(s[-1] / step)), 1)
    ss = np.linspace(0.0, s[-1], n + 1)
    pts = np.stack([np.interp(ss, s, poly[:, 0]), np.interp(ss, s, poly[:, 1])], axis=1)
    return pts, ss


def build_path(net: RoadNetwork, nodes, start_along: float, goal_along: float,
               closed: bool = False) -> RoutePath:
    """Lane-centre path from ``start_along`` on the first edge to ``goal_along`` on the last."""
    nodes = list(nodes)
    if len(nodes) < 2:
        raise ValueError("route needs at least one edge")
    poly = []
    d0 = net.direction(nodes[0], nodes[1])
    p_start = net.nodes[nodes[0]] + d0 * start_along + _right(d0) * LANE_OFFSET
    poly.append(p_start)
    marks = []
    seq = nodes + ([nodes[1]] if closed else [])
    for i in range(1, len(seq) - 1):
        v = seq[i]
        d_in = net.direction(seq[i - 1], v)
        d_out = net.direction(v, seq[i + 1])
        kind = turn_kind(d_in, d_out)
        if kind == "uturn":
            raise ValueError(f"route makes a U-turn at node {v}")
        cmd = _TURN_COMMAND[kind] if net.is_intersection(v) else None
        p_in = net.nodes[v] + _right(d_in) * LANE_OFFSET
        if kind == "straight":
            marks.append((len(poly), len(poly), v, kind, cmd))
            poly.append(p_in)
            continue
        p_out = net.nodes[v] + _right(d_out) * LANE_OFFSET
        corner = _line_intersection(p_in, d_in, p_out, d_out)
        r = R_RIGHT if kind == "right" else R_LEFT
        t_in = corner - d_in * r
        t_out = corner + d_out * r
        normal = _left(d_in) if kind == "left" else _right(d_in)
        centre = t_in + normal * r
        a0 = np.arctan2(*(t_in - centre)[::-1])
        a1 = np.arctan2(*(t_out - centre)[::-1])
        da = (a1 - a0 + np.pi) % (2 * np.pi) - np.pi
        arc = [centre + r * np.array([np.cos(a0 + da * f), np.sin(a0 + da * f)])
               for f in np.linspace(0, 1, 16)]
        i0 = len(poly)
        poly.extend(arc)
        marks.append((i0, len(poly) - 1, v, kind, cmd))
    if closed:
        # start point repeats to close the loop
        poly.append(p_start)
    else:
        d_last = net.direction(nodes[-2], nodes[-1])
        poly.append(net.nodes[nodes[-2]] + d_last * goal_along + _right(d_last) * LANE_OFFSET)
    poly = np.array(poly)
    seg = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(poly, axis=0), axis=1))])
    pts, ss = _resample(poly)
    hd = np.arctan2(np.gradient(pts[:, 1]), np.gradient(pts[:, 0]))
    junctions = []
    for i0, i1, v, kind, cmd in marks:
        s_enter, s_exit = float(seg[i0]), float(seg[i1])
        if kind == "straight":
            s_node = s_enter
            s_enter, s_exit = s_node - HALF_WIDTH, s_node + HALF_WIDTH
        else:
            s_node = 0.5 * (s_enter + s_exit)
        junctions.append({"node": int(v), "s_node": s_node, "s_enter": s_enter, "s_exit": s_exit,
                          "kind": kind, "command": None if cmd is None else int(cmd)})
    return RoutePath(nodes, pts, ss, hd, junctions)


def shortest_route(net: RoadNetwork, from_edge, to_edge):
    """Node sequence from directed edge ``from_edge`` to directed edge ``to_edge``
    without U-turns (Dijkstra over directed edges)."""
    start = tuple(from_edge)
    goal = tuple(to_edge)
    dist = {start: 0.0}
    prev = {}
    heap = [(0.0, start)]
    while heap:
        d, e = heapq.heappop(heap)
        if e == goal:
            break
        if d > dist.get(e, np.inf):
            continue
        a, b = e
        for c in sorted(net.adj[b]):
            if c == a:
                continue
            ne = (b, c)
            nd = d + net.edge_length(b, c)
            if nd < dist.get(ne, np.inf):
                dist[ne] = nd
                prev[ne] = e
                heapq.heappush(heap, (nd, ne))
    if goal not in dist:
        return None
    chain = [goal]
    while chain[-1] != start:
        chain.append(prev[chain[-1]])
    chain.reverse()
    return [chain[0][0]] + [e[1] for e in chain]


# ---------------------------------------------------------------- episodes

TASKS = ("straight", "one-turn", "navigation", "navigation-dynamic")
BUDGET_SPEED_KMH = 10.0


@dataclass
class EpisodeSpec:
    town: int
    weather: str
    task: str
    nodes: list
    start_along: float
    goal_along: float
    time_budget: float
    dynamic: bool = False
    index: int = 0
    commands: list = field(default_factory=list)

    def path(self) -> RoutePath:
        return _cached_path(self.town, tuple(self.nodes), self.start_along, self.goal_along)

    def world(self, seed: int = 0) -> WorldSpec:
        nv, npd = (DYNAMIC_AGENTS[self.town] if self.dynamic else (0, 0))
        return WorldSpec(self.town, self.weather, nv, npd, seed)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# vehicles, pedestrians per town for dynamic tasks
DYNAMIC_AGENTS = {1: (6, 12), 2: (4, 8)}


@functools.lru_cache(maxsize=4096)
def _cached_path(town, nodes, start_along, goal_along):
    return build_path(make_town(town), list(nodes), start_along, goal_along)


def _directed_edges(net):
    out = []
    for a, b in net.edges:
        out.append((a, b))
        out.append((b, a))
    return out


def _route_for_task(net, task, rng):
    edges = _directed_edges(net)
    for _ in range(1000):
        a, b = edges[rng.integers(len(edges))]
        if task == "straight":
            nxt = [c for c in net.adj[b] if c != a and turn_kind(net.direction(a, b), net.direction(b, c)) == "straight"]
            if not nxt:
                continue
            return [a, b, nxt[rng.integers(len(nxt))]]
        if task == "one-turn":
            nxt = [c for c in net.adj[b] if c != a and turn_kind(net.direction(a, b), net.direction(b, c)) in ("left", "right")]
            if not nxt:
                continue
            return [a, b, nxt[rng.integers(len(nxt))]]
        # navigation: random walk with at least two turns
        route = [a, b]
        turns = 0
        for _ in range(int(rng.integers(3, 6))):
            u, v = route[-2], route[-1]
            nxt = [c for c in sorted(net.adj[v]) if c != u]
            c = nxt[rng.integers(len(nxt))]
            if turn_kind(net.direction(u, v), net.direction(v, c)) != "straight":
                turns += 1
            route.append(c)
        if turns >= 2:
            return route
    raise RuntimeError(f"could not sample a {task} route")


def make_suite(town: int, task: str, weathers, n_per_weather: int = 25, seed: int = 0) -> list:
    """Episode suite: the same ``n_per_weather`` start/goal pairs under every weather."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    net = make_town(town)
    rng = np.random.default_rng([town, TASKS.index(task), seed])
    base = []
    for k in range(n_per_weather):
        nodes = _route_for_task(net, task, rng)
        l0 = net.edge_length(nodes[0], nodes[1])
        l1 = net.edge_length(nodes[-2], nodes[-1])
        start = float(np.round(rng.uniform(14.0, max(l0 - 24.0, 15.0)), 2))
        goal = float(np.round(rng.uniform(16.0, l1 - 16.0), 2))
        path = _cached_path(town, tuple(nodes), start, goal)
        budget = path.length / (BUDGET_SPEED_KMH / 3.6)
        base.append((nodes, start, goal, budget, [int(c) for c in path.commands()]))
    suite = []
    for w in weathers:
        for k, (nodes, start, goal, budget, cmds) in enumerate(base):
            suite.append(EpisodeSpec(town, w, task, list(nodes), start, goal, float(budget),
                                     task == "navigation-dynamic", k, cmds))
    return suite


def save_suite(path, suite):
    doc = {"version": WORLD_FORMAT_VERSION, "episodes": [e.to_dict() for e in suite]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_suite(path) -> list:
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != WORLD_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported suite version {doc.get('version')}")
    return [EpisodeSpec.from_dict(e) for e in doc["episodes"]]
