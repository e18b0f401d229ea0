"""Skid-steer robot kinematics with a slip model, and straight-drive episodes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..cloud import PointCloud
from ..geometry import Pose
from .lidar import LidarConfig, simulate_scan
from .world import World

GRAVITY = 9.81
MOVING, STUCK, TIPPED = "moving", "stuck", "tipped"


@dataclass(frozen=True)
class RobotConfig:
    wheel_radius: float = 0.2
    speed: float = 1.0
    body_length: float = 0.8
    body_width: float = 0.6
    clearance: float = 0.3
    tip_threshold_deg: float = 35.0
    slip_alpha: float = 1.5
    slip_beta: float = 0.5
    slip_cap: float = 1.2
    accel_noise: float = 0.05
    sensor_height: float = 0.35

    @property
    def sensor_offset(self) -> Pose:
        return Pose((0.0, 0.0, self.sensor_height))


@dataclass(frozen=True)
class EpisodeConfig:
    dt: float = 0.05
    max_time: float = 180.0
    scan_period: float = 1.0
    # time the robot keeps spinning its wheels after becoming immobilised
    stuck_dwell: float = 3.0
    lidar: LidarConfig = field(default_factory=lambda: LidarConfig(rings=32, azimuth_steps=256, max_range=12.0))
    robot: RobotConfig = field(default_factory=RobotConfig)
    record_scans: bool = True


@dataclass(frozen=True)
class RobotState:
    pose: Pose
    wheel_radius: float
    w1: float
    w2: float
    linear_velocity: float
    accel: np.ndarray
    status: str = MOVING
    time: float = 0.0
    velocity_world: np.ndarray = field(default_factory=lambda: np.zeros(3))


def slip_factor(pitch: float, roughness: float, cfg: RobotConfig = RobotConfig()) -> float:
    """Ratio of realised to commanded speed."""
    s = 1.0 - cfg.slip_alpha * math.tan(pitch) - cfg.slip_beta * roughness
    return min(max(s, 0.0), cfg.slip_cap)


def _footprint_samples(cfg: RobotConfig) -> np.ndarray:
    xs = np.linspace(-cfg.body_length / 2, cfg.body_length / 2, 5)
    ys = np.linspace(-cfg.body_width / 2, cfg.body_width / 2, 3)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


_FOOT_CACHE: dict[RobotConfig, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _footprint_fit(cfg: RobotConfig):
    cached = _FOOT_CACHE.get(cfg)
    if cached is None:
        local = _footprint_samples(cfg)
        design = np.column_stack([local, np.ones(len(local))])
        cached = _FOOT_CACHE.setdefault(cfg, (local, design, np.linalg.pinv(design)))
    return cached


def terrain_under(world: World, x: float, y: float, yaw: float, cfg: RobotConfig):
    """Terrain heights sampled over the body footprint, with local coordinates."""
    local = _footprint_fit(cfg)[0]
    c, s = math.cos(yaw), math.sin(yaw)
    wx = x + c * local[:, 0] - s * local[:, 1]
    wy = y + s * local[:, 0] + c * local[:, 1]
    return local, world.height(wx, wy)


def surface_frame(world: World, x: float, y: float, yaw: float, cfg: RobotConfig):
    """Least-squares plane under the body.

    Returns (pitch, roll, roughness, height at the body center); roughness is
    the standard deviation of the terrain about the fitted plane.
    """
    _, design, pinv = _footprint_fit(cfg)
    _, h = terrain_under(world, x, y, yaw, cfg)
    coef = pinv @ h
    resid = h - design @ coef
    return math.atan(coef[0]), math.atan(coef[1]), float(np.sqrt(np.mean(resid * resid))), float(coef[2])


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def body_orientation(yaw: float, grad_fwd: float, grad_left: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    fwd = np.array([c, s, grad_fwd])
    left = np.array([-s, c, grad_left])
    fwd /= math.sqrt(fwd @ fwd)
    up = _cross(fwd, left)
    up /= math.sqrt(up @ up)
    left = _cross(up, fwd)
    return np.column_stack([fwd, left, up])


def place_robot(world: World, x: float, y: float, yaw: float, cfg: RobotConfig = RobotConfig()) -> Pose:
    """Pose resting on the terrain at (x, y) with the given heading."""
    pitch, roll, _, z = surface_frame(world, x, y, yaw, cfg)
    rot = body_orientation(yaw, math.tan(pitch), math.tan(roll))
    return Pose.from_matrix(rot, (x, y, z + cfg.clearance))


def initial_state(world: World, pose: Pose, cfg: RobotConfig = RobotConfig()) -> RobotState:
    w = cfg.speed / cfg.wheel_radius
    pose = place_robot(world, pose.position[0], pose.position[1], pose.yaw, cfg)
    accel = pose.rotation.T @ np.array([0.0, 0.0, GRAVITY])
    return RobotState(pose, cfg.wheel_radius, w, w, 0.0, accel, MOVING, 0.0)


def blocking_obstacle(world: World, pose: Pose, lookahead: float, cfg: RobotConfig):
    frame = pose.heading_frame()
    front = cfg.body_length / 2.0
    x, y = pose.position[:2]
    for obs in world.obstacles_near(x, y, front + lookahead + 1.0):
        if obs.height_above_ground <= cfg.clearance:
            continue
        if obs.overlaps_rect(frame, (front, front + lookahead), cfg.body_width / 2.0):
            return obs
    return None


def footprint_collides(world: World, pose: Pose, cfg: RobotConfig = RobotConfig()) -> bool:
    frame = pose.heading_frame()
    half = cfg.body_length / 2.0
    x, y = pose.position[:2]
    return any(
        obs.overlaps_rect(frame, (-half, half), cfg.body_width / 2.0)
        for obs in world.obstacles_near(x, y, half + 1.0)
    )


def _imu(rot: np.ndarray, accel_world: np.ndarray, rng, sigma: float) -> np.ndarray:
    acc = rot.T @ (accel_world + np.array([0.0, 0.0, GRAVITY]))
    if rng is not None and sigma > 0:
        acc = acc + rng.normal(0.0, sigma, size=3)
    return acc


def step_robot(world: World, state: RobotState, dt: float, cfg: RobotConfig = RobotConfig(), rng=None) -> RobotState:
    """Advance the robot one time step along its heading.

    ``rng`` (a numpy Generator) adds accelerometer noise; without it the step
    is noise free.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    pose = state.pose
    x, y = pose.position[:2]
    if not world.contains(x, y):
        raise ValueError("robot is outside the world domain")
    t = state.time + dt
    rot = pose.rotation
    if state.status != MOVING:
        zero = np.zeros(3)
        accel = _imu(rot, zero, rng, cfg.accel_noise)
        return replace(state, linear_velocity=0.0, accel=accel, time=t, velocity_world=zero)

    v_cmd = state.wheel_radius * (state.w1 + state.w2) / 2.0
    yaw = pose.yaw
    pitch, roll, rough, _ = surface_frame(world, x, y, yaw, cfg)
    tip = math.radians(cfg.tip_threshold_deg)
    if abs(pitch) > tip or abs(roll) > tip:
        accel = _imu(rot, -state.velocity_world / dt, rng, cfg.accel_noise)
        return replace(state, linear_velocity=0.0, accel=accel, status=TIPPED, time=t,
                       velocity_world=np.zeros(3))

    v = v_cmd * slip_factor(pitch, rough, cfg)
    if v <= 0.0 or blocking_obstacle(world, pose, max(v_cmd * dt * cfg.slip_cap, 1e-3), cfg) is not None:
        accel = _imu(rot, -state.velocity_world / dt, rng, cfg.accel_noise)
        return replace(state, linear_velocity=0.0, accel=accel, status=STUCK, time=t,
                       velocity_world=np.zeros(3))

    c, s = math.cos(yaw), math.sin(yaw)
    limit = v * dt
    old = pose.position

    def _center(h_step):
        nx, ny = x + c * h_step, y + s * h_step
        return np.array([nx, ny, surface_frame(world, nx, ny, yaw, cfg)[3] + cfg.clearance])

    # 3D displacement must not exceed v*dt: secant shrink, bisection as fallback
    h_step = limit * math.cos(pitch)
    dist = np.linalg.norm(_center(h_step) - old)
    for _ in range(3):
        if dist <= limit:
            break
        h_step *= (limit / dist) * (1.0 - 1e-12)
        dist = np.linalg.norm(_center(h_step) - old)
    if dist > limit:
        lo, hi = 0.0, h_step
        for _ in range(40):
            mid = 0.5 * (lo + hi)
            if np.linalg.norm(_center(mid) - old) > limit:
                hi = mid
            else:
                lo = mid
        h_step = lo
    if not world.contains(x + c * h_step, y + s * h_step):
        raise ValueError("robot left the world domain")
    new_pose = place_robot(world, x + c * h_step, y + s * h_step, yaw, cfg)
    vel = (new_pose.position - old) / dt
    accel = _imu(new_pose.rotation, (vel - state.velocity_world) / dt, rng, cfg.accel_noise)
    return replace(state, pose=new_pose, linear_velocity=float(np.linalg.norm(vel)), accel=accel,
                   time=t, velocity_world=vel)


@dataclass
class Scan:
    time: float
    pose: Pose          # robot pose when the scan was taken
    cloud: PointCloud   # sensor frame


@dataclass
class Episode:
    """Recorded rollout; arrays are indexed by step (row 0 is the start state)."""

    episode_id: int
    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    accels: np.ndarray
    statuses: list[str]
    wheel_radius: float = 0.2
    stop_time: float | None = None
    scans: list[Scan] = field(default_factory=list)
    sensor_offset: Pose = field(default_factory=lambda: RobotConfig().sensor_offset)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def final_status(self) -> str:
        return self.statuses[-1]

    def pose_at(self, i: int) -> Pose:
        return Pose(self.positions[i], self.orientations[i])

    def index_at(self, t: float) -> int:
        """Index of the last record with time <= t."""
        return int(np.searchsorted(self.times, t + 1e-9, side="right") - 1)

    def to_jsonl(self, path) -> None:
        lines = []
        for i in range(len(self.times)):
            rec = {
                "t": round(float(self.times[i]), 6),
                "pose": [float(v) for v in (*self.positions[i], *self.orientations[i])],
                "w1": float(self.w1[i]),
                "w2": float(self.w2[i]),
                "accel": [float(v) for v in self.accels[i]],
                "status": self.statuses[i],
            }
            lines.append(json.dumps(rec, sort_keys=True))
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path, episode_id: int = 0, wheel_radius: float = 0.2) -> Episode:
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not recs:
            raise ValueError(f"{path}: empty episode dump")
        poses = np.array([r["pose"] for r in recs], dtype=np.float64)
        statuses = [r["status"] for r in recs]
        stop = next((r["t"] for r in recs if r["status"] != MOVING), None)
        return cls(
            episode_id,
            np.array([r["t"] for r in recs], dtype=np.float64),
            poses[:, :3], poses[:, 3:],
            np.array([r["w1"] for r in recs]), np.array([r["w2"] for r in recs]),
            np.array([r["accel"] for r in recs], dtype=np.float64),
            statuses, wheel_radius, stop,
        )


def run_episode(world: World, init: Pose, cfg: EpisodeConfig = EpisodeConfig(), seed: int = 0,
                episode_id: int = 0) -> Episode:
    """Drive straight at constant commanded speed until immobilised or out of time.

    After the robot becomes stuck or tipped, the rollout continues for
    ``cfg.stuck_dwell`` seconds with the wheels still commanded, so the trailing
    window at the end of the episode measures the blocked state.
    """
    rcfg = cfg.robot
    if not world.contains(*init.position[:2]):
        raise ValueError("initial pose is outside the world domain")
    if footprint_collides(world, init, rcfg):
        raise ValueError("initial pose is inside an obstacle")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE9]))
    state = initial_state(world, init, rcfg)
    n_max = int(round(cfg.max_time / cfg.dt))
    steps_per_scan = max(1, int(round(cfg.scan_period / cfg.dt)))
    dwell_steps = int(round(cfg.stuck_dwell / cfg.dt))

    times, pos, quat, w1, w2, acc, stat = [], [], [], [], [], [], []
    scans: list[Scan] = []

    def record(s: RobotState):
        times.append(s.time)
        pos.append(s.pose.position)
        quat.append(s.pose.orientation)
        w1.append(s.w1)
        w2.append(s.w2)
        acc.append(s.accel)
        stat.append(s.status)

    def scan(s: RobotState, k: int):
        if cfg.record_scans:
            sensor = s.pose.compose(rcfg.sensor_offset)
            cloud = simulate_scan(world, sensor, cfg.lidar, seed=int(rng.integers(2**31)))
            scans.append(Scan(s.time, s.pose, cloud))

    record(state)
    scan(state, 0)
    stop_time = None
    k = 0
    dwell = 0
    while k < n_max:
        k += 1
        state = step_robot(world, state, cfg.dt, rcfg, rng)
        # fix accumulated float drift in the clock
        state = replace(state, time=round(k * cfg.dt, 9))
        record(state)
        if k % steps_per_scan == 0:
            scan(state, k)
        if state.status != MOVING:
            if stop_time is None:
                stop_time = state.time
            dwell += 1
            if dwell > dwell_steps:
                break
    return Episode(
        episode_id, np.array(times), np.array(pos), np.array(quat), np.array(w1), np.array(w2),
        np.array(acc), stat, rcfg.wheel_radius, stop_time, scans, rcfg.sensor_offset,
    )
