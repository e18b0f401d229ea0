"""Small canned worlds and drives used by the demos and the acceptance checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import seeding
from .datagen.samples import Sample, extract_samples
from .simworld.robot import EpisodeConfig, Episode, RobotConfig, place_robot, run_episode
from .simworld.world import World, WorldConfig, build_world, flat_world, place_obstacle, with_obstacles


def ramp_world(pitch_deg: float = 15.0, seed: int = 0, length_m: float = 12.0, roughness_m: float = 0.05,
               domain_m: float = 120.0) -> World:
    """Gentle noise plus one straight ramp rising along +x from x=0."""
    cfg = WorldConfig(
        domain_m=domain_m, octaves=2, amplitude_m=roughness_m, max_slope=math.tan(math.radians(pitch_deg)) + 0.05,
        obstacle_density_per_km2=0.0, base_wavelength_m=8.0, persistence=0.5,
        ramp={"pitch_deg": pitch_deg, "start_x": 0.0, "length_m": length_m},
    )
    return build_world(cfg, seed)


@dataclass
class RampDrives:
    uphill_episode: Episode
    downhill_episode: Episode
    uphill: list[Sample]
    downhill: list[Sample]

    def on_ramp(self, world: World, skip_m: float = 3.0) -> tuple[list[Sample], list[Sample]]:
        """Samples whose trailing window lies entirely on the slope."""
        ramp = world.config.ramp
        lo, hi = ramp["start_x"], ramp["start_x"] + ramp["length_m"]
        ups = [s for s in self.uphill if lo + skip_m <= s.pose.position[0] <= hi]
        downs = [s for s in self.downhill if lo <= s.pose.position[0] <= hi - skip_m]
        return ups, downs

    def mid_pair(self, world: World) -> tuple[Sample, Sample]:
        """The uphill and downhill samples closest to the middle of the ramp."""
        ramp = world.config.ramp
        mid = ramp["start_x"] + ramp["length_m"] / 2.0
        if not self.uphill or not self.downhill:
            raise RuntimeError("ramp drive produced no samples")

        def nearest(samples):
            return min(samples, key=lambda s: (abs(s.pose.position[0] - mid), s.timestamp))

        return nearest(self.uphill), nearest(self.downhill)


def ramp_drives(world: World, y: float = 0.0, lead_m: float = 8.0, seed: int = 0,
                label_mode: str = "raw") -> RampDrives:
    """Drive up and down the ramp along the line ``y`` and cut samples from both drives.

    Both drives start ``lead_m`` before the ramp and stop shortly after its
    middle.
    """
    ramp = world.config.ramp
    if not ramp:
        raise ValueError("world has no ramp")
    length = ramp["length_m"]
    cfg = EpisodeConfig(max_time=lead_m + length / 2.0 + 4.0)
    up = run_episode(world, place_robot(world, ramp["start_x"] - lead_m, y, 0.0), cfg,
                     seeding.derive_seed(seed, seeding.EPISODE, 0), episode_id=0)
    down = run_episode(world, place_robot(world, ramp["start_x"] + length + lead_m, y, math.pi), cfg,
                       seeding.derive_seed(seed, seeding.EPISODE, 1), episode_id=1)
    s_up = extract_samples(up, world, label_mode=label_mode, seed=seeding.derive_seed(seed, seeding.EXTRACT, 0))
    s_down = extract_samples(down, world, label_mode=label_mode, seed=seeding.derive_seed(seed, seeding.EXTRACT, 1))
    return RampDrives(up, down, s_up, s_down)


def flat_cruise(duration: float = 180.0, seed: int = 0) -> tuple[World, Episode]:
    world = flat_world(domain_m=2.0 * duration + 60.0)
    start = -duration / 2.0 - 10.0
    ep = run_episode(world, place_robot(world, start, 0.0, 0.0), EpisodeConfig(max_time=duration), seed)
    return world, ep


def rock_stop(distance: float = 5.0, radius: float = 0.8, seed: int = 0) -> tuple[World, Episode]:
    """Flat ground with a rock dead ahead; the robot drives into it and stalls."""
    base = flat_world(domain_m=80.0)
    rock = place_obstacle(base, "rock", distance + radius, 0.0, radius=radius)
    world = with_obstacles(base, [rock])
    ep = run_episode(world, place_robot(world, 0.0, 0.0, 0.0), EpisodeConfig(max_time=30.0), seed)
    return world, ep


def wall_stop(distance: float = 5.0, seed: int = 0) -> tuple[World, Episode]:
    """Flat ground with a wall whose face is ``distance`` ahead of the robot's front edge."""
    base = flat_world(domain_m=80.0)
    front = RobotConfig().body_length / 2.0
    wall = place_obstacle(base, "wall", front + distance + 0.15, 0.0, length=6.0, thickness=0.3, height=2.0,
                          yaw=math.pi / 2)
    world = with_obstacles(base, [wall])
    ep = run_episode(world, place_robot(world, 0.0, 0.0, 0.0), EpisodeConfig(max_time=30.0), seed)
    return world, ep
