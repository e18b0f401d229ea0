import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from traversim.geometry import Pose
from traversim.scenarios import wall_stop
from traversim.simworld import (
    MOVING, STUCK, EpisodeConfig, Episode, LidarConfig, RobotConfig, WorldConfig, build_world, flat_world,
    height_at, initial_state, place_obstacle, place_robot, run_episode, simulate_scan, slip_factor, step_robot,
    surface_pitch, with_obstacles,
)
from traversim.simworld.robot import GRAVITY

NO_SCANS = EpisodeConfig(record_scans=False)


def tilted_world(grad_x, domain=200.0):
    cfg = WorldConfig(domain_m=domain, octaves=0, amplitude_m=0.0, obstacle_density_per_km2=0.0,
                      tilt=(grad_x, 0.0), max_slope=1.0)
    return build_world(cfg, 0)


# --- build_world ----------------------------------------------------------

def test_world_is_deterministic(rng):
    cfg = WorldConfig(domain_m=500.0)
    a, b = build_world(cfg, 5), build_world(cfg, 5)
    xy = rng.uniform(-240, 240, size=(1000, 2))
    assert a.height(xy[:, 0], xy[:, 1]).tobytes() == b.height(xy[:, 0], xy[:, 1]).tobytes()
    assert [o.to_dict() for o in a.obstacles] == [o.to_dict() for o in b.obstacles]
    c = build_world(cfg, 6)
    assert not np.array_equal(a.height(xy[:, 0], xy[:, 1]), c.height(xy[:, 0], xy[:, 1]))


def test_flat_config_is_zero(rng):
    w = build_world(WorldConfig(domain_m=100.0, amplitude_m=0.0, obstacle_density_per_km2=0.0), 3)
    xy = rng.uniform(-50, 50, size=(200, 2))
    np.testing.assert_array_equal(w.height(xy[:, 0], xy[:, 1]), 0.0)
    assert w.obstacles == ()


def test_obstacle_count_tracks_density():
    w = build_world(WorldConfig(domain_m=1000.0, obstacle_density_per_km2=50.0), 1)
    assert 45 <= len(w.obstacles) <= 55


def test_nonpositive_domain_rejected():
    with pytest.raises(ValueError):
        build_world(WorldConfig(domain_m=0.0), 0)


def test_slope_stays_within_bound(rng):
    cfg = WorldConfig(domain_m=400.0, max_slope=0.45, obstacle_density_per_km2=0.0)
    w = build_world(cfg, 2)
    xy = rng.uniform(-190, 190, size=(2000, 2))
    h = 1e-4
    gx = (w.height(xy[:, 0] + h, xy[:, 1]) - w.height(xy[:, 0] - h, xy[:, 1])) / (2 * h)
    gy = (w.height(xy[:, 0], xy[:, 1] + h) - w.height(xy[:, 0], xy[:, 1] - h)) / (2 * h)
    assert np.hypot(gx, gy).max() <= 0.45 + 1e-6


def test_world_config_round_trip(tmp_path):
    cfg = WorldConfig(domain_m=321.0, octaves=3, seed=9, tilt=(0.1, -0.2))
    cfg.save(tmp_path / "w.json")
    assert WorldConfig.load(tmp_path / "w.json") == cfg
    with pytest.raises(ValueError, match="unknown"):
        WorldConfig.from_dict({"domain": 3})


# --- height_at / surface_pitch -------------------------------------------

def test_flat_height_and_pitch():
    w = flat_world(100.0)
    assert height_at(w, 3.0, -7.0) == 0.0
    assert surface_pitch(w, Pose.from_xyz_rpy(1, 2, 0, yaw=0.7)) == pytest.approx(0.0, abs=1e-12)


def test_ramp_pitch_sign():
    w = tilted_world(0.1)
    assert surface_pitch(w, Pose.from_xyz_rpy(0, 0, 0)) == pytest.approx(math.atan(0.1), abs=1e-6)
    assert surface_pitch(w, Pose.from_xyz_rpy(0, 0, 0, yaw=math.pi)) == pytest.approx(-math.atan(0.1), abs=1e-6)


def test_height_outside_domain_raises():
    with pytest.raises(ValueError, match="outside"):
        height_at(flat_world(10.0), 6.0, 0.0)


# --- simulate_scan --------------------------------------------------------

def test_scan_on_flat_ground_hits_plane():
    w = flat_world(200.0)
    pose = Pose((0.0, 0.0, 1.0))
    cloud = simulate_scan(w, pose, LidarConfig(rings=16, azimuth_steps=64, noise_sigma=0.0))
    world_pts = pose.apply(cloud.points)
    down = cloud.points[:, 2] < 0
    assert down.any()
    assert np.abs(world_pts[down, 2]).max() <= 1e-3


def test_scan_ray_budget():
    cfg = LidarConfig()
    assert (cfg.rings, cfg.azimuth_steps) == (64, 512)
    cloud = simulate_scan(flat_world(200.0), Pose((0, 0, 1.0)), cfg)
    assert len(cloud) <= 64 * 512


def test_scan_box_face_matches_analytic_ranges():
    base = flat_world(100.0)
    wall = place_obstacle(base, "wall", 5.15, 0.0, length=4.0, thickness=0.3, height=3.0, yaw=math.pi / 2)
    w = with_obstacles(base, [wall])
    cfg = LidarConfig(rings=16, azimuth_steps=360, noise_sigma=0.0, max_range=20.0)
    pose = Pose((0.0, 0.0, 1.0))
    cloud = simulate_scan(w, pose, cfg)
    dirs = cfg.directions()
    # oracle: rays meeting the plane x = 5 inside the face rectangle
    t = 5.0 / np.where(dirs[:, 0] > 0, dirs[:, 0], np.nan)
    hit = dirs * t[:, None] + pose.position
    on_face = (np.abs(hit[:, 1]) < 1.9) & (hit[:, 2] > 0.05) & (hit[:, 2] < 2.9)
    expected = np.sort(t[on_face])
    pts = cloud.points
    face = (np.abs(pts[:, 0] - 5.0) < 0.05) & (np.abs(pts[:, 1]) < 1.9) & (pts[:, 2] + 1.0 > 0.05)
    got = np.sort(np.linalg.norm(pts[face], axis=1))
    assert len(got) == len(expected) > 20
    np.testing.assert_allclose(got, expected, atol=1e-6)
    # the central ray returns range 5
    ahead = np.argmin(np.linalg.norm(pts / np.linalg.norm(pts, axis=1, keepdims=True) - [1, 0, 0], axis=1))
    assert np.linalg.norm(pts[ahead]) == pytest.approx(5.0, abs=0.05)


def test_scan_is_deterministic():
    w = build_world(WorldConfig(domain_m=200.0, obstacle_density_per_km2=2000.0), 4)
    pose = place_robot(w, 0, 0, 0).compose(RobotConfig().sensor_offset)
    cfg = LidarConfig(rings=8, azimuth_steps=64)
    assert simulate_scan(w, pose, cfg, 3).points.tobytes() == simulate_scan(w, pose, cfg, 3).points.tobytes()


# --- step_robot -----------------------------------------------------------

def test_flat_step_moves_one_tenth():
    w = flat_world(100.0)
    s0 = initial_state(w, place_robot(w, 0, 0, 0))
    s1 = step_robot(w, s0, 0.1)
    assert s1.status == MOVING
    assert np.linalg.norm(s1.pose.position - s0.pose.position) == pytest.approx(0.1, abs=1e-12)
    assert s0.wheel_radius * (s0.w1 + s0.w2) / 2 == pytest.approx(1.0)


def test_rock_just_ahead_blocks():
    base = flat_world(100.0)
    front = RobotConfig().body_length / 2
    rock = place_obstacle(base, "rock", front + 0.1 + 1.0, 0.0, radius=1.0)
    w = with_obstacles(base, [rock])
    s0 = initial_state(w, place_robot(w, 0, 0, 0))
    s1 = step_robot(w, s0, 0.1)
    assert s1.status == STUCK
    assert s1.linear_velocity == 0.0
    np.testing.assert_array_equal(s1.pose.position, s0.pose.position)


def test_uphill_is_slower_than_downhill():
    w = tilted_world(math.tan(math.radians(15.0)))
    up = initial_state(w, place_robot(w, 0, 0, 0.0))
    down = initial_state(w, place_robot(w, 0, 0, math.pi))
    d_up = np.linalg.norm(step_robot(w, up, 0.1).pose.position - up.pose.position)
    d_down = np.linalg.norm(step_robot(w, down, 0.1).pose.position - down.pose.position)
    # oracle: the slip model evaluated at +/-15 degrees
    assert d_up == pytest.approx(0.1 * slip_factor(math.radians(15), 0.0), rel=1e-6)
    assert d_down == pytest.approx(0.1 * slip_factor(math.radians(-15), 0.0), rel=1e-6)
    assert d_up < d_down


def test_step_rejects_bad_dt():
    w = flat_world(100.0)
    with pytest.raises(ValueError):
        step_robot(w, initial_state(w, place_robot(w, 0, 0, 0)), 0.0)


@given(st.floats(-math.radians(35), math.radians(35)), st.floats(-math.radians(35), math.radians(35)),
       st.floats(0, 0.3))
def test_slip_monotone_and_capped(p1, p2, rough):
    lo, hi = sorted((p1, p2))
    assert slip_factor(lo, rough) >= slip_factor(hi, rough)
    assert 0.0 <= slip_factor(p1, rough) <= 1.2


def test_slip_reference_points():
    assert slip_factor(0.0, 0.0) == 1.0
    assert 1.0 < slip_factor(math.radians(-5), 0.0) <= 1.2
    assert slip_factor(math.radians(-30), 0.0) == 1.2


def test_step_never_exceeds_cap():
    w = build_world(WorldConfig(domain_m=200.0, obstacle_density_per_km2=0.0, max_slope=0.6), 8)
    s = initial_state(w, place_robot(w, 0, 0, 2.0))
    for _ in range(200):
        nxt = step_robot(w, s, 0.05)
        assert np.linalg.norm(nxt.pose.position - s.pose.position) <= 1.0 * 0.05 * 1.2 + 1e-12
        s = nxt


def test_stuck_robot_holds_pose_and_feels_gravity_only():
    world, _ = wall_stop(1.0)
    s = initial_state(world, place_robot(world, 0, 0, 0))
    while s.status == MOVING:
        s = step_robot(world, s, 0.05)
    pose = s.pose
    for _ in range(5):
        s = step_robot(world, s, 0.05)
        assert s.pose == pose
        np.testing.assert_allclose(s.accel, pose.rotation.T @ [0, 0, GRAVITY], atol=1e-12)


# --- run_episode ----------------------------------------------------------

def test_flat_episode_runs_full_time():
    w = flat_world(500.0)
    ep = run_episode(w, place_robot(w, -100.0, 0, 0), NO_SCANS, seed=1)
    assert ep.duration == pytest.approx(180.0, abs=1e-9)
    assert ep.final_status == MOVING
    assert np.linalg.norm(ep.positions[-1] - ep.positions[0]) == pytest.approx(180.0, abs=1e-6)


def test_wall_five_meters_ahead_stops_near_five_seconds():
    _, ep = wall_stop(5.0)
    assert ep.final_status == STUCK
    assert ep.stop_time == pytest.approx(5.0, abs=0.1)


def test_episode_deterministic_and_dump_round_trip(tmp_path):
    w = build_world(WorldConfig(domain_m=200.0, obstacle_density_per_km2=0.0), 2)
    cfg = EpisodeConfig(max_time=10.0, record_scans=False)
    a = run_episode(w, place_robot(w, 0, 0, 1.0), cfg, seed=4)
    b = run_episode(w, place_robot(w, 0, 0, 1.0), cfg, seed=4)
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.accels.tobytes() == b.accels.tobytes()
    a.to_jsonl(tmp_path / "ep.jsonl")
    first = (tmp_path / "ep.jsonl").read_text().splitlines()[0]
    assert set(__import__("json").loads(first)) == {"t", "pose", "w1", "w2", "accel", "status"}
    c = Episode.from_jsonl(tmp_path / "ep.jsonl")
    np.testing.assert_allclose(c.positions, a.positions)
    assert c.statuses == a.statuses


def test_episode_records_scans():
    w = flat_world(200.0)
    cfg = EpisodeConfig(max_time=3.0, lidar=LidarConfig(rings=4, azimuth_steps=32, max_range=10.0))
    ep = run_episode(w, place_robot(w, 0, 0, 0), cfg)
    assert [s.time for s in ep.scans] == [0.0, 1.0, 2.0, 3.0]


def test_spawn_inside_obstacle_rejected():
    base = flat_world(100.0)
    w = with_obstacles(base, [place_obstacle(base, "rock", 0.0, 0.0, radius=1.0)])
    with pytest.raises(ValueError, match="inside an obstacle"):
        run_episode(w, place_robot(w, 0, 0, 0), NO_SCANS)
