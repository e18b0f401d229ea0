"""Seeded procedural terrain: value-noise heightfield plus primitive obstacles."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..geometry import Pose

OBSTACLE_KINDS = ("rock", "trunk", "wall")


@dataclass
class WorldConfig:
    domain_m: float = 1000.0
    octaves: int = 4
    amplitude_m: float = 12.0
    max_slope: float = 0.45
    obstacle_density_per_km2: float = 50.0
    seed: int = 0
    base_wavelength_m: float = 80.0
    persistence: float = 0.4
    # planar tilt (dh/dx, dh/dy) added to the noise
    tilt: tuple[float, float] = (0.0, 0.0)
    # optional ramp along +x: {"pitch_deg", "start_x", "length_m"}
    ramp: dict | None = None
    obstacle_mix: dict = field(default_factory=lambda: {"rock": 0.5, "trunk": 0.4, "wall": 0.1})

    @classmethod
    def from_dict(cls, data: dict) -> WorldConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.tilt = tuple(cfg.tilt)
        return cfg

    @classmethod
    def load(cls, path) -> WorldConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tilt"] = list(self.tilt)
        return d

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True)
class Obstacle:
    """A solid primitive standing on the terrain.

    ``shape`` is ``sphere`` (dims = (radius,)), ``cylinder`` (dims = (radius,
    height), vertical, base at ``center[2]``) or ``box`` (dims = (length, width,
    height), yawed, base at ``center[2]``).
    """

    kind: str
    shape: str
    center: tuple[float, float, float]
    dims: tuple[float, ...]
    yaw: float = 0.0
    ground_z: float = 0.0

    @property
    def top(self) -> float:
        if self.shape == "sphere":
            return self.center[2] + self.dims[0]
        return self.center[2] + self.dims[-1]

    @property
    def height_above_ground(self) -> float:
        return self.top - self.ground_z

    @property
    def radius_xy(self) -> float:
        """Radius of a circle enclosing the footprint."""
        if self.shape == "box":
            return 0.5 * math.hypot(self.dims[0], self.dims[1])
        return self.dims[0]

    def footprint_radius_at_ground(self) -> float:
        if self.shape == "sphere":
            dz = self.ground_z - self.center[2]
            r = self.dims[0]
            return math.sqrt(max(r * r - dz * dz, 0.0)) if abs(dz) < r else 0.0
        return self.dims[0]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "shape": self.shape, "center": list(self.center),
            "dims": list(self.dims), "yaw": self.yaw, "ground_z": self.ground_z,
        }

    def overlaps_rect(self, frame: Pose, x_range, half_width: float) -> bool:
        """Whether the solid's horizontal section intersects a rectangle.

        The rectangle lies in the xy plane of ``frame`` (heading frame):
        ``x_range[0] <= x <= x_range[1]`` and ``|y| <= half_width``.
        """
        c, s = math.cos(frame.yaw), math.sin(frame.yaw)
        dx = self.center[0] - frame.position[0]
        dy = self.center[1] - frame.position[1]
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        if self.shape in ("sphere", "cylinder"):
            radius = self.dims[0]
            qx = min(max(lx, x_range[0]), x_range[1])
            qy = min(max(ly, -half_width), half_width)
            return (lx - qx) ** 2 + (ly - qy) ** 2 <= radius * radius
        # separating axis test between two rectangles in the frame's xy plane
        rel = self.yaw - frame.yaw
        cr, sr = math.cos(rel), math.sin(rel)
        hl, hw = self.dims[0] / 2.0, self.dims[1] / 2.0
        a_center = np.array([(x_range[0] + x_range[1]) / 2.0, 0.0])
        a_half = np.array([(x_range[1] - x_range[0]) / 2.0, half_width])
        b_center = np.array([lx, ly])
        b_axes = np.array([[cr, sr], [-sr, cr]])
        d = b_center - a_center
        for axis in (np.array([1.0, 0.0]), np.array([0.0, 1.0]), b_axes[0], b_axes[1]):
            ra = a_half[0] * abs(axis[0]) + a_half[1] * abs(axis[1])
            rb = hl * abs(axis @ b_axes[0]) + hw * abs(axis @ b_axes[1])
            if abs(d @ axis) > ra + rb:
                return False
        return True

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Smallest positive ray parameter hitting the solid (inf when missed)."""
        o = np.asarray(origins, dtype=np.float64)
        d = np.asarray(dirs, dtype=np.float64)
        o = np.broadcast_to(o, d.shape)
        if self.shape == "sphere":
            return _ray_sphere(o, d, np.asarray(self.center), self.dims[0])
        if self.shape == "cylinder":
            return _ray_cylinder(o, d, np.asarray(self.center), self.dims[0], self.dims[1])
        return _ray_box(o, d, np.asarray(self.center), self.dims, self.yaw)


def _ray_sphere(o, d, center, radius):
    oc = o - center
    b = np.einsum("ij,ij->i", oc, d)
    c = np.einsum("ij,ij->i", oc, oc) - radius * radius
    disc = b * b - c
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(ok & (t0 > 1e-9), t0, t)
    t = np.where(ok & (t0 <= 1e-9) & (t1 > 1e-9), t1, t)
    return t


def _ray_cylinder(o, d, base, radius, height):
    ox, oy = o[:, 0] - base[0], o[:, 1] - base[1]
    dx, dy = d[:, 0], d[:, 1]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    c = ox * ox + oy * oy - radius * radius
    t = np.full(len(d), np.inf)
    z0, z1 = base[2], base[2] + height
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - a * c
        ok = (disc >= 0) & (a > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for root in ((-b - sq) / a, (-b + sq) / a):
            z = o[:, 2] + root * d[:, 2]
            hit = ok & (root > 1e-9) & (z >= z0) & (z <= z1)
            t = np.where(hit & (root < t), root, t)
        # caps
        for zc in (z0, z1):
            tc = (zc - o[:, 2]) / d[:, 2]
            px = ox + tc * dx
            py = oy + tc * dy
            hit = np.isfinite(tc) & (tc > 1e-9) & (px * px + py * py <= radius * radius)
            t = np.where(hit & (tc < t), tc, t)
    return t


def _ray_box(o, d, base, dims, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    rot_t = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    center = np.array([base[0], base[1], base[2] + dims[2] / 2.0])
    lo = (o - center) @ rot_t.T
    ld = d @ rot_t.T
    half = np.asarray(dims) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / ld
        t1 = (-half - lo) * inv
        t2 = (half - lo) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = ld == 0
    inside = np.abs(lo) <= half
    t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
    tmin = np.max(np.minimum(t1, t2), axis=1)
    tmax = np.min(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where(hit, t, np.inf)


class World:
    """Immutable terrain built from a :class:`WorldConfig`."""

    def __init__(self, config: WorldConfig, lattices, amplitudes, wavelengths, obstacles):
        self.config = config
        self.half = config.domain_m / 2.0
        self._lattices = lattices
        self._amps = amplitudes
        self._wavelengths = wavelengths
        self.obstacles: tuple[Obstacle, ...] = tuple(obstacles)
        self._obs_xy = (
            np.array([o.center[:2] for o in self.obstacles]) if self.obstacles else np.zeros((0, 2))
        )
        self._obs_r = np.array([o.radius_xy for o in self.obstacles])
        self.slope_bound = _structure_slope(config) + noise_slope_bound(amplitudes, wavelengths)

    @property
    def seed(self) -> int:
        return self.config.seed

    def contains(self, x, y) -> bool:
        return bool(np.all(np.abs(np.asarray(x)) <= self.half) and np.all(np.abs(np.asarray(y)) <= self.half))

    def height(self, x, y) -> np.ndarray:
        """Vectorised terrain height (no domain check)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = self.config.tilt[0] * x + self.config.tilt[1] * y
        for lat, amp, lam in zip(self._lattices, self._amps, self._wavelengths):
            if amp == 0.0:
                continue
            h = h + amp * _value_noise(lat, (x + self.half) / lam, (y + self.half) / lam)
        ramp = self.config.ramp
        if ramp:
            grad = math.tan(math.radians(ramp["pitch_deg"]))
            along = np.clip(x - ramp["start_x"], 0.0, ramp["length_m"])
            h = h + grad * along
        return h

    def obstacles_near(self, x: float, y: float, radius: float) -> list[Obstacle]:
        if not self.obstacles:
            return []
        d = np.hypot(self._obs_xy[:, 0] - x, self._obs_xy[:, 1] - y) - self._obs_r
        return [self.obstacles[i] for i in np.flatnonzero(d <= radius)]


def height_at(world: World, x, y):
    if not world.contains(x, y):
        raise ValueError(f"point ({x}, {y}) is outside the world domain")
    h = world.height(x, y)
    return float(h) if np.ndim(h) == 0 else h


def surface_pitch(world: World, pose: Pose, step: float = 0.1) -> float:
    """Terrain inclination along the pose heading in radians, positive uphill."""
    x, y = pose.position[:2]
    yaw = pose.yaw
    fx, fy = math.cos(yaw) * step, math.sin(yaw) * step
    if not world.contains([x - fx, x + fx], [y - fy, y + fy]):
        raise ValueError("pose is outside the world domain")
    dh = world.height(x + fx, y + fy) - world.height(x - fx, y - fy)
    return math.atan(float(dh) / (2.0 * step))


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(lattice: np.ndarray, u, v):
    """Bilinear-smoothstep interpolation of lattice values; lattice in [-1, 1]."""
    n = lattice.shape[0] - 1
    u = np.clip(u, 0.0, n - 1e-9)
    v = np.clip(v, 0.0, n - 1e-9)
    i = np.floor(u).astype(np.int64)
    j = np.floor(v).astype(np.int64)
    su = _smoothstep(u - i)
    sv = _smoothstep(v - j)
    a = lattice[i, j]
    b = lattice[i + 1, j]
    c = lattice[i, j + 1]
    d = lattice[i + 1, j + 1]
    return (a + su * (b - a)) * (1.0 - sv) + (c + su * (d - c)) * sv


def noise_slope_bound(amplitudes, wavelengths) -> float:
    # per octave |dh/dx|, |dh/dy| <= 1.5 * 2 * amp / wavelength
    return float(sum(3.0 * math.sqrt(2.0) * a / lam for a, lam in zip(amplitudes, wavelengths)))


def _structure_slope(cfg: WorldConfig) -> float:
    slope = math.hypot(*cfg.tilt)
    if cfg.ramp:
        slope += math.tan(math.radians(cfg.ramp["pitch_deg"]))
    return slope


def build_world(config: WorldConfig, seed: int | None = None) -> World:
    """Generate the terrain and obstacles deterministically from config and seed."""
    if seed is None:
        seed = config.seed
    if config.domain_m <= 0:
        raise ValueError("domain size must be positive")
    if config.octaves < 0 or config.amplitude_m < 0 or config.max_slope <= 0:
        raise ValueError("octaves and amplitude must be non-negative, max_slope positive")
    if config.obstacle_density_per_km2 < 0:
        raise ValueError("obstacle density must be non-negative")
    if config.seed != seed:
        config = WorldConfig.from_dict({**config.to_dict(), "seed": seed})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x77]))

    structure = _structure_slope(config)
    if structure > config.max_slope + 1e-12:
        raise ValueError(f"tilt/ramp slope {structure:.3f} exceeds max_slope {config.max_slope}")
    wavelengths = [config.base_wavelength_m / 2.0 ** k for k in range(config.octaves)]
    amplitudes = [config.amplitude_m * config.persistence ** k for k in range(config.octaves)]
    bound = noise_slope_bound(amplitudes, wavelengths)
    budget = config.max_slope - structure
    if bound > budget:
        scale = budget / bound if bound > 0 else 0.0
        amplitudes = [a * scale for a in amplitudes]
    lattices = []
    for lam in wavelengths:
        n = int(math.ceil(config.domain_m / lam)) + 2
        lattices.append(rng.uniform(-1.0, 1.0, size=(n, n)))

    proto = World(config, lattices, amplitudes, wavelengths, [])
    area_km2 = (config.domain_m / 1000.0) ** 2
    n_obs = int(round(config.obstacle_density_per_km2 * area_km2))
    kinds = list(config.obstacle_mix)
    probs = np.array([config.obstacle_mix[k] for k in kinds], dtype=np.float64)
    probs /= probs.sum()
    obstacles = []
    margin = min(5.0, proto.half * 0.1)
    for _ in range(n_obs):
        kind = kinds[int(rng.choice(len(kinds), p=probs))]
        x, y = rng.uniform(-proto.half + margin, proto.half - margin, size=2)
        obstacles.append(_make_obstacle(kind, float(x), float(y), proto, rng))
    return World(config, lattices, amplitudes, wavelengths, obstacles)


def _make_obstacle(kind: str, x: float, y: float, world: World, rng) -> Obstacle:
    ground = float(world.height(x, y))
    if kind == "rock":
        r = float(rng.uniform(0.4, 1.2))
        return Obstacle("rock", "sphere", (x, y, ground + 0.2 * r), (r,), 0.0, ground)
    if kind == "trunk":
        r = float(rng.uniform(0.12, 0.45))
        height = float(rng.uniform(3.0, 8.0))
        return Obstacle("trunk", "cylinder", (x, y, ground - 0.5), (r, height + 0.5), 0.0, ground)
    if kind == "wall":
        length = float(rng.uniform(2.0, 8.0))
        height = float(rng.uniform(1.5, 2.5))
        yaw = float(rng.uniform(-math.pi, math.pi))
        return Obstacle("wall", "box", (x, y, ground - 0.5), (length, 0.3, height + 0.5), yaw, ground)
    raise ValueError(f"unknown obstacle kind {kind!r}")


def flat_world(domain_m: float = 1000.0, obstacles=(), seed: int = 0) -> World:
    """Zero-height world, optionally with hand-placed obstacles (for tests and demos)."""
    cfg = WorldConfig(domain_m=domain_m, octaves=0, amplitude_m=0.0, obstacle_density_per_km2=0.0, seed=seed)
    base = build_world(cfg, seed)
    return World(cfg, base._lattices, base._amps, base._wavelengths, obstacles)


def with_obstacles(world: World, obstacles) -> World:
    return World(world.config, world._lattices, world._amps, world._wavelengths,
                 list(world.obstacles) + list(obstacles))


def place_obstacle(world: World, kind: str, x: float, y: float, **dims) -> Obstacle:
    """Obstacle of ``kind`` standing on the terrain at (x, y) with explicit dimensions."""
    ground = float(world.height(x, y))
    if kind == "rock":
        r = dims.get("radius", 1.0)
        return Obstacle("rock", "sphere", (x, y, ground + 0.2 * r), (r,), 0.0, ground)
    if kind == "trunk":
        r = dims.get("radius", 0.3)
        h = dims.get("height", 5.0)
        return Obstacle("trunk", "cylinder", (x, y, ground - 0.5), (r, h + 0.5), 0.0, ground)
    if kind == "wall":
        length = dims.get("length", 6.0)
        thick = dims.get("thickness", 0.3)
        h = dims.get("height", 2.0)
        yaw = dims.get("yaw", 0.0)
        return Obstacle("wall", "box", (x, y, ground - 0.5), (length, thick, h + 0.5), yaw, ground)
    raise ValueError(f"unknown obstacle kind {kind!r}")
