"""Deterministic procedural stand-in for a game-engine simulator."""

from .lidar import LidarConfig, simulate_scan
from .robot import (
    MOVING, STUCK, TIPPED, Episode, EpisodeConfig, RobotConfig, RobotState, Scan,
    initial_state, place_robot, run_episode, slip_factor, step_robot,
)
from .world import (
    Obstacle, World, WorldConfig, build_world, flat_world, height_at, place_obstacle,
    surface_pitch, with_obstacles,
)

__all__ = [
    "LidarConfig", "simulate_scan", "MOVING", "STUCK", "TIPPED", "Episode", "EpisodeConfig",
    "RobotConfig", "RobotState", "Scan", "initial_state", "place_robot", "run_episode",
    "slip_factor", "step_robot", "Obstacle", "World", "WorldConfig", "build_world", "flat_world",
    "height_at", "place_obstacle", "surface_pitch", "with_obstacles",
]
