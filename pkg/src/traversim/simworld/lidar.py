"""Synthetic spinning LIDAR: ray marching against the heightfield plus analytic obstacle hits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..cloud import PointCloud
from ..geometry import Pose
from .world import World

MARCH_STEP = 0.1
BISECT_TOL = 1e-3


@dataclass(frozen=True)
class LidarConfig:
    rings: int = 64
    azimuth_steps: int = 512
    max_range: float = 30.0
    vertical_fov: tuple[float, float] = (-22.5, 22.5)
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.rings < 1 or self.azimuth_steps < 1 or not self.max_range > 0:
            raise ValueError("rings and azimuth_steps must be >= 1 and max_range > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        object.__setattr__(self, "vertical_fov", tuple(float(v) for v in self.vertical_fov))

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, ring-major."""
        lo, hi = self.vertical_fov
        elev = np.radians(np.linspace(lo, hi, self.rings)) if self.rings > 1 else np.radians([(lo + hi) / 2])
        az = np.linspace(0.0, 2.0 * math.pi, self.azimuth_steps, endpoint=False)
        el, a = np.meshgrid(elev, az, indexing="ij")
        return np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)], axis=-1).reshape(-1, 3)


def terrain_hits(world: World, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
    """Ray parameter of the first heightfield crossing, inf if none within range.

    Rays advance by at least ``MARCH_STEP``; larger steps are taken only when
    the terrain slope bound proves no crossing can be skipped.  The bracketing
    interval is then bisected to ``BISECT_TOL``.
    """
    n = len(dirs)
    result = np.full(n, np.inf)
    slope = world.slope_bound
    horiz = np.hypot(dirs[:, 0], dirs[:, 1])
    # gap can only shrink if the ray descends faster than the terrain can rise
    closing = slope * horiz - dirs[:, 2]
    gap0 = origin[2] - world.height(origin[0], origin[1])
    if gap0 <= 0:
        return np.zeros(n)
    ceiling = _local_ceiling(world, origin, max_range)
    active = np.flatnonzero(closing > 0)
    t = np.zeros(len(active))
    gap = np.full(len(active), gap0)
    found_idx, found_lo, found_hi = [], [], []
    while len(active):
        d = dirs[active]
        step = np.maximum(MARCH_STEP, gap / closing[active])
        prev_t = t
        t = np.minimum(t + step, max_range)
        p = origin + t[:, None] * d
        gap = p[:, 2] - world.height(p[:, 0], p[:, 1])
        crossed = gap <= 0
        if np.any(crossed):
            found_idx.append(active[crossed])
            found_lo.append(prev_t[crossed])
            found_hi.append(t[crossed])
        # a rising ray above every terrain point in range can never come back down
        escaped = (d[:, 2] >= 0) & (p[:, 2] > ceiling)
        keep = ~crossed & ~escaped & (t < max_range)
        active, t, gap = active[keep], t[keep], gap[keep]
    if found_idx:
        idx = np.concatenate(found_idx)
        lo = np.concatenate(found_lo)
        hi = np.concatenate(found_hi)
        dc = dirs[idx]
        while np.max(hi - lo) > BISECT_TOL:
            mid = 0.5 * (lo + hi)
            pm = origin + mid[:, None] * dc
            below = pm[:, 2] - world.height(pm[:, 0], pm[:, 1]) <= 0
            hi = np.where(below, mid, hi)
            lo = np.where(below, lo, mid)
        result[idx] = hi
    return result


def _local_ceiling(world: World, origin: np.ndarray, radius: float, spacing: float = 1.0) -> float:
    """Upper bound of the terrain height within ``radius`` of ``origin`` (xy)."""
    ticks = np.arange(-radius, radius + spacing, spacing)
    gx, gy = np.meshgrid(origin[0] + ticks, origin[1] + ticks, indexing="ij")
    peak = float(np.max(world.height(gx, gy)))
    # any point lies within spacing/sqrt(2) of a grid node
    return peak + world.slope_bound * spacing / math.sqrt(2.0)


def simulate_scan(world: World, sensor_pose: Pose, cfg: LidarConfig = LidarConfig(), seed: int = 0) -> PointCloud:
    """One full sweep; returns hit points in the sensor frame."""
    origin = np.asarray(sensor_pose.position, dtype=np.float64)
    if not world.contains(origin[0], origin[1]):
        raise ValueError("sensor pose is outside the world domain")
    local_dirs = cfg.directions()
    dirs = local_dirs @ sensor_pose.rotation.T
    t = terrain_hits(world, origin, dirs, cfg.max_range)
    for obs in world.obstacles_near(origin[0], origin[1], cfg.max_range):
        t = np.minimum(t, obs.intersect(origin, dirs))
    hit = t <= cfg.max_range
    rng = np.random.default_rng(seed)
    ranges = t[hit]
    if cfg.noise_sigma > 0:
        ranges = ranges + rng.normal(0.0, cfg.noise_sigma, size=ranges.shape)
    return PointCloud(local_dirs[hit] * ranges[:, None])
