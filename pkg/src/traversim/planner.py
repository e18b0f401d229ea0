"""2D costmap projection of a traversability map, cost-weighted A*, and rolling-goal exploration."""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

from .cloud import PointCloud
from .io import atomic_write_bytes, write_ply

SQRT2 = math.sqrt(2.0)
NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))
PATH_RGB = (255, 255, 0)


@dataclass(frozen=True)
class Costmap:
    """Cell costs in [0, 1]; NaN marks unknown cells. Cell (i, j) spans x along i, y along j."""

    costs: np.ndarray
    origin: tuple[float, float]   # xy of the lower corner of cell (0, 0)
    cell: float = 0.25

    def __post_init__(self):
        c = np.asarray(self.costs, dtype=np.float64)
        if c.ndim != 2 or min(c.shape) < 1:
            raise ValueError("costmap must be a non-empty 2D grid")
        known = np.isfinite(c)
        if np.any((c[known] < 0) | (c[known] > 1)):
            raise ValueError("costs must lie in [0, 1]")
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        object.__setattr__(self, "costs", c)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape

    @property
    def known(self) -> np.ndarray:
        return np.isfinite(self.costs)

    def cell_of(self, xy) -> tuple[int, int]:
        return (int(math.floor((xy[0] - self.origin[0]) / self.cell)),
                int(math.floor((xy[1] - self.origin[1]) / self.cell)))

    def center_of(self, ij) -> tuple[float, float]:
        return (self.origin[0] + (ij[0] + 0.5) * self.cell, self.origin[1] + (ij[1] + 0.5) * self.cell)

    def inside(self, ij) -> bool:
        return 0 <= ij[0] < self.shape[0] and 0 <= ij[1] < self.shape[1]

    def passable(self, block_threshold: float = 0.9) -> np.ndarray:
        return self.known & (np.nan_to_num(self.costs, nan=1.0) < block_threshold)


def build_costmap(points: np.ndarray, costs: np.ndarray, cell: float = 0.25, bounds=None) -> Costmap:
    """Max-aggregate per-point costs into xy cells; cells without costed points stay unknown.

    ``bounds`` = ((x0, y0), (x1, y1)) defaults to the extent of the points.
    """
    points = np.asarray(points, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    if len(points) != len(costs):
        raise ValueError("points and costs differ in length")
    valid = np.isfinite(costs)
    if bounds is None:
        if not np.any(valid):
            raise ValueError("degenerate bounds: no costed points")
        lo = points[valid, :2].min(axis=0)
        hi = points[valid, :2].max(axis=0) + 1e-9
    else:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    if np.any(hi <= lo) or not cell > 0:
        raise ValueError(f"degenerate bounds {lo.tolist()} - {hi.tolist()}")
    shape = tuple(int(v) for v in np.maximum(np.ceil((hi - lo) / cell), 1))
    grid = np.full(shape, -np.inf)
    ij = np.floor((points[valid, :2] - lo) / cell).astype(int)
    inside = (ij[:, 0] >= 0) & (ij[:, 0] < shape[0]) & (ij[:, 1] >= 0) & (ij[:, 1] < shape[1])
    ij = ij[inside]
    np.maximum.at(grid, (ij[:, 0], ij[:, 1]), costs[valid][inside])
    grid[np.isneginf(grid)] = np.nan
    return Costmap(np.clip(grid, 0.0, 1.0), (float(lo[0]), float(lo[1])), cell)


def costmap_from_map(tmap, local: PointCloud, cell: float = 0.25, bounds=None) -> Costmap:
    return build_costmap(local.points, tmap.point_costs(), cell, bounds)


def nearest_passable(costmap: Costmap, xy, block_threshold: float = 0.9) -> tuple[int, int] | None:
    """Passable cell whose center is closest to ``xy`` (lowest index on ties)."""
    ok = np.argwhere(costmap.passable(block_threshold))
    if len(ok) == 0:
        return None
    centers = np.asarray(costmap.origin) + (ok + 0.5) * costmap.cell
    d = np.hypot(centers[:, 0] - xy[0], centers[:, 1] - xy[1])
    return tuple(int(v) for v in ok[int(np.argmin(d))])


@dataclass
class Path:
    cells: list[tuple[int, int]]
    waypoints: list[tuple[float, float]]
    total_cost: float
    length: float

    @property
    def found(self) -> bool:
        return bool(self.cells)


NO_PATH = None


def edge_weight(c_a: float, c_b: float, step: float, cost_weight: float) -> float:
    return step * (1.0 + cost_weight * 0.5 * (c_a + c_b))


def _check_endpoint(costmap: Costmap, ij, name: str, passable: np.ndarray) -> None:
    if not costmap.inside(ij):
        raise ValueError(f"{name} {ij} lies outside the costmap")
    if not costmap.known[ij]:
        raise ValueError(f"{name} {ij} is in an unknown cell")
    if not passable[ij]:
        raise ValueError(f"{name} {ij} is in a blocked cell (cost {costmap.costs[ij]:.3f})")


def octile_distance(a, b, cell: float = 1.0) -> float:
    """Length of the shortest obstacle-free 8-connected route between two cells."""
    dx, dy = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (max(dx, dy) + (SQRT2 - 1.0) * min(dx, dy)) * cell


def _make_path(costmap: Costmap, cells, total: float) -> Path:
    length = sum(math.hypot(a[0] - b[0], a[1] - b[1]) for a, b in zip(cells, cells[1:])) * costmap.cell
    return Path(cells, [costmap.center_of(c) for c in cells], total, length)


def plan_astar(costmap: Costmap, start, goal, block_threshold: float = 0.9, cost_weight: float = 5.0,
               heuristic: bool = True) -> Path | None:
    """Cheapest 8-connected path between two cells, or None when the goal is unreachable.

    Edge weight is the step length times ``1 + cost_weight * mean(cell costs)``;
    unknown cells and cells at or above ``block_threshold`` are impassable.
    With ``heuristic=False`` the search is plain Dijkstra.
    """
    start, goal = tuple(int(v) for v in start), tuple(int(v) for v in goal)
    passable = costmap.passable(block_threshold)
    _check_endpoint(costmap, start, "start", passable)
    _check_endpoint(costmap, goal, "goal", passable)
    costs = np.nan_to_num(costmap.costs, nan=1.0)
    cell = costmap.cell
    nx, ny = costmap.shape

    def h(ij):
        return math.hypot(ij[0] - goal[0], ij[1] - goal[1]) * cell if heuristic else 0.0

    best = {start: 0.0}
    parent = {start: None}
    closed = set()
    # (f, g, tie counter, cell); the counter keeps ordering deterministic
    heap = [(h(start), 0.0, 0, start)]
    counter = 1
    while heap:
        _, g, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            cells = []
            node = cur
            while node is not None:
                cells.append(node)
                node = parent[node]
            return _make_path(costmap, cells[::-1], g)
        closed.add(cur)
        ci, cj = cur
        for di, dj in NEIGHBORS:
            ni, nj = ci + di, cj + dj
            if not (0 <= ni < nx and 0 <= nj < ny) or not passable[ni, nj] or (ni, nj) in closed:
                continue
            step = (SQRT2 if di and dj else 1.0) * cell
            ng = g + edge_weight(costs[ci, cj], costs[ni, nj], step, cost_weight)
            if ng < best.get((ni, nj), math.inf):
                best[(ni, nj)] = ng
                parent[(ni, nj)] = cur
                heapq.heappush(heap, (ng + h((ni, nj)), ng, counter, (ni, nj)))
                counter += 1
    return NO_PATH


def dijkstra_costs(costmap: Costmap, start, block_threshold: float = 0.9, cost_weight: float = 5.0) -> np.ndarray:
    """Cheapest cost from ``start`` to every cell (inf when unreachable)."""
    start = tuple(int(v) for v in start)
    passable = costmap.passable(block_threshold)
    _check_endpoint(costmap, start, "start", passable)
    costs = np.nan_to_num(costmap.costs, nan=1.0)
    dist = np.full(costmap.shape, np.inf)
    dist[start] = 0.0
    heap = [(0.0, start)]
    nx, ny = costmap.shape
    while heap:
        d, (ci, cj) = heapq.heappop(heap)
        if d > dist[ci, cj]:
            continue
        for di, dj in NEIGHBORS:
            ni, nj = ci + di, cj + dj
            if 0 <= ni < nx and 0 <= nj < ny and passable[ni, nj]:
                step = (SQRT2 if di and dj else 1.0) * costmap.cell
                nd = d + edge_weight(costs[ci, cj], costs[ni, nj], step, cost_weight)
                if nd < dist[ni, nj]:
                    dist[ni, nj] = nd
                    heapq.heappush(heap, (nd, (ni, nj)))
    return dist


@dataclass
class ExploreDecision:
    halt: bool
    goal: tuple[float, float] | None
    path: Path | None
    candidates: list[dict]


def explore_step(costmap: Costmap, position, heading: float, horizon: float = 4.0, step_deg: float = 15.0,
                 block_threshold: float = 0.9, cost_weight: float = 5.0) -> ExploreDecision:
    """Score goals on the horizon circle every ``step_deg`` and take the cheapest reachable one.

    A candidate's score is its path cost divided by the obstacle-free
    8-connected distance to its goal cell, so that grid quantization of the
    circle does not favour some bearings over others.  Ties go to the
    candidate closest to the current heading.  When no candidate is
    reachable the decision is to halt.
    """
    start = costmap.cell_of(position)
    passable = costmap.passable(block_threshold)
    if not costmap.inside(start) or not costmap.known[start]:
        raise ValueError("robot cell is outside the costmap or unknown")
    candidates = []
    n = int(round(360.0 / step_deg))
    for k in range(n):
        offset = math.radians(k * step_deg)
        if offset > math.pi:
            offset -= 2.0 * math.pi
        ang = heading + offset
        gxy = (position[0] + horizon * math.cos(ang), position[1] + horizon * math.sin(ang))
        gij = costmap.cell_of(gxy)
        entry = {"angle_offset_deg": math.degrees(offset), "goal": gxy, "cost": math.inf, "score": math.inf,
                 "path": None}
        if passable[start] and costmap.inside(gij) and passable[gij]:
            path = plan_astar(costmap, start, gij, block_threshold, cost_weight)
            if path is not None:
                entry["cost"] = path.total_cost
                entry["score"] = path.total_cost / max(octile_distance(start, gij, costmap.cell), costmap.cell)
                entry["path"] = path
        candidates.append(entry)
    reachable = [c for c in candidates if math.isfinite(c["cost"])]
    if not reachable:
        return ExploreDecision(True, None, None, candidates)
    best = min(reachable, key=lambda c: (round(c["score"], 9), abs(c["angle_offset_deg"]), c["angle_offset_deg"]))
    return ExploreDecision(False, best["goal"], best["path"], candidates)


def path_json(path: Path | None, meta: dict | None = None) -> dict:
    if path is None:
        return {"status": "no path", "waypoints": [], "total_cost": None, "length": None, **(meta or {})}
    return {
        "status": "ok",
        "waypoints": [[round(x, 6), round(y, 6)] for x, y in path.waypoints],
        "cells": [list(c) for c in path.cells],
        "total_cost": path.total_cost,
        "length": path.length,
        **(meta or {}),
    }


def export_path(path: Path | None, json_path, ply_path=None, z: float = 0.0, meta: dict | None = None) -> None:
    """Waypoint JSON, plus an optional yellow PLY polyline sampled every 5 cm."""
    atomic_write_bytes(json_path, (json.dumps(path_json(path, meta), indent=1) + "\n").encode())
    if ply_path is None or path is None or not path.waypoints:
        return
    wp = np.asarray(path.waypoints, dtype=np.float64)
    pts = [wp[:1]]
    for a, b in zip(wp[:-1], wp[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / 0.05)))
        t = np.linspace(0.0, 1.0, n + 1)[1:, None]
        pts.append(a + t * (b - a))
    xy = np.concatenate(pts)
    cloud = PointCloud(np.column_stack([xy, np.full(len(xy), z)]))
    write_ply(ply_path, cloud, colors=np.tile(np.array(PATH_RGB, dtype=np.uint8), (len(xy), 1)))
